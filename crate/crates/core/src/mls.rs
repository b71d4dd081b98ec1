//! The mutual learning orchestrator: source pretraining, then for each
//! visited distribution index an alternation of C→D (the frozen
//! classifier constrains the diffusion module's semantics) and D→C (the
//! frozen diffusion module supplies new transitional distributions to the
//! classifier), with replay over previously visited distributions.

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::dad::{DadModule, GradWindow};
use crate::diffusion::{reverse_loss_on_graph, VarianceSchedule};
use crate::domains::{apply_shift, gen_gaussian_mixture_pair, gen_two_moons, LabeledDataset, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, rbf_mmd2, MmdConfig};
use crate::models::{
    param_checksum, Classifier, DomainTag, FeatureBatch, FeatureExtractor, NoisePredictor,
};
use crate::numerics::graph::Graph;
use crate::numerics::optim::{poly_lr, SgdMomentum, TrainOpts};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::report::{AdaptationReport, PerKRecord};
use std::collections::BTreeMap;
use std::time::Instant;

// ---------------------------------------------------------------- replay

struct Store {
    batches: Vec<FeatureBatch>,
    inserted: u64,
}

/// Bounded per-distribution reservoirs of transitional batches. Index 0
/// holds source batches; index i > 0 holds transitional(i) batches.
pub struct ReplayBuffer {
    capacity: usize,
    stores: BTreeMap<usize, Store>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            capacity: capacity.max(1),
            stores: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, i: usize) -> usize {
        self.stores.get(&i).map_or(0, |s| s.batches.len())
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }

    /// Reservoir insertion: every batch ever inserted under `i` is kept
    /// with equal probability once the store exceeds capacity.
    pub fn insert(&mut self, i: usize, batch: FeatureBatch, rng: &mut Rng) -> Result<()> {
        let expected = if i == 0 {
            DomainTag::Source
        } else {
            DomainTag::Transitional(i)
        };
        if batch.domain != expected {
            return Err(Error::invalid(
                "replay_insert",
                format!("store {i} expects {}, got {}", expected.name(), batch.domain.name()),
            ));
        }
        if batch.labels.is_none() {
            return Err(Error::invalid("replay_insert", "replay batches carry labels"));
        }
        let store = self.stores.entry(i).or_insert(Store {
            batches: Vec::new(),
            inserted: 0,
        });
        store.inserted += 1;
        if store.batches.len() < self.capacity {
            store.batches.push(batch);
        } else {
            let j = rng.below(store.inserted as usize);
            if j < self.capacity {
                store.batches[j] = batch;
            }
        }
        Ok(())
    }

    /// Populated store indices strictly below k, ascending.
    pub fn keys_below(&self, k: usize) -> Vec<usize> {
        self.stores.keys().copied().filter(|&i| i < k).collect()
    }

    /// Store indices for one replay term: the full set when `m_replay`
    /// covers it, otherwise `m_replay` uniform draws with replacement.
    pub fn pick_indices(&self, k: usize, m_replay: usize, rng: &mut Rng) -> Vec<usize> {
        let avail = self.keys_below(k);
        if avail.is_empty() {
            return avail;
        }
        if m_replay >= avail.len() {
            avail
        } else {
            (0..m_replay).map(|_| avail[rng.below(avail.len())]).collect()
        }
    }

    pub fn sample(&self, i: usize, rng: &mut Rng) -> Result<&FeatureBatch> {
        let store = self
            .stores
            .get(&i)
            .filter(|s| !s.batches.is_empty())
            .ok_or_else(|| Error::invalid("replay_sample", format!("store {i} is empty")))?;
        Ok(&store.batches[rng.below(store.batches.len())])
    }
}

// --------------------------------------------------------------- helpers

fn sample_labeled(pool: &FeatureBatch, batch_size: usize, rng: &mut Rng) -> Result<FeatureBatch> {
    let labels = pool
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("sample_labeled", "pool carries no labels"))?;
    let n = pool.len();
    let idx: Vec<usize> = (0..batch_size.min(n)).map(|_| rng.below(n)).collect();
    FeatureBatch::new(
        pool.features.gather_rows(&idx),
        Some(idx.iter().map(|&i| labels[i]).collect()),
        pool.domain,
    )
}

/// Eval-mode cross-entropy of raw logits against labels.
pub fn ce_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let lv = g.constant(logits)?;
    let ce = g.softmax_cross_entropy(lv, labels)?;
    Ok(g.scalar_value(ce))
}

// --------------------------------------------------------- source stage

/// Joint training of the feature extractor and classifier with softmax
/// cross-entropy on labeled source data; the extractor is frozen at the
/// end. Returns the per-iteration loss trace.
pub fn train_source(
    fe: &mut FeatureExtractor,
    cl: &mut Classifier,
    source: &LabeledDataset,
    epochs: usize,
    opts: &TrainOpts,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if source.is_empty() {
        return Err(Error::invalid("train_source", "empty dataset"));
    }
    if fe.frozen {
        return Err(Error::invalid("train_source", "extractor already frozen"));
    }
    let n = source.len();
    let bs = opts.batch_size.min(n).max(1);
    let per_epoch = n.div_ceil(bs);
    let total = epochs * per_epoch;
    let mut opt = opts.optimizer();
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0usize;
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(bs) {
            let x = source.points.gather_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| source.labels[i]).collect();
            let mut g = Graph::new();
            let fvars = fe.mlp.bind(&mut g, true)?;
            let cvars = cl.mlp.bind(&mut g, true)?;
            let xv = g.constant(&x)?;
            let feats = fe.mlp.forward_with_vars(&mut g, &fvars, xv)?;
            let logits = cl.mlp.forward_with_vars(&mut g, &cvars, feats)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            trace.push(g.scalar_value(loss));
            let grads = g.backward(loss)?;
            let all_vars: Vec<_> = fvars.iter().chain(&cvars).copied().collect();
            let mut params = fe.mlp.params_mut();
            params.extend(cl.mlp.params_mut());
            grads.write_to(&all_vars, &mut params);
            let lr = poly_lr(opts.lr, iter, total, opts.poly_power)?;
            opt.step(&mut params, lr)?;
            iter += 1;
        }
    }
    fe.freeze();
    Ok(trace)
}

// ------------------------------------------------------------ MLS state

pub struct MlsState {
    pub k: usize,
    pub classifier: Classifier,
    pub classifier_snapshot: Classifier,
    pub dad: DadModule,
    pub buffer: ReplayBuffer,
    opt_dad: SgdMomentum,
    opt_cls: SgdMomentum,
}

impl MlsState {
    pub fn new(
        classifier: Classifier,
        dad: DadModule,
        replay_capacity: usize,
        opts: &TrainOpts,
    ) -> MlsState {
        let snapshot = classifier.snapshot();
        MlsState {
            k: 0,
            classifier,
            classifier_snapshot: snapshot,
            dad,
            buffer: ReplayBuffer::new(replay_capacity),
            opt_dad: opts.optimizer(),
            opt_cls: opts.optimizer(),
        }
    }

    /// C→D: r iterations on the noise predictor minimizing
    /// ce_weight * CE(snapshot(F^{D_k}), Y_S) + L_TR(F^T). With
    /// ce_weight = 0 the phase reduces exactly to target reverse training.
    pub fn c_to_d_phase(
        &mut self,
        source_pool: &FeatureBatch,
        target_feats: &Tensor,
        k: usize,
        r: usize,
        opts: &TrainOpts,
        ce_weight: f64,
        window: GradWindow,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if self.dad.frozen {
            return Err(Error::invalid("c_to_d_phase", "dad is frozen"));
        }
        if !self.classifier_snapshot.frozen {
            return Err(Error::invalid("c_to_d_phase", "snapshot must be frozen"));
        }
        if k == 0 || k > self.dad.k_max() {
            return Err(Error::StepOutOfRange {
                k,
                max: self.dad.k_max(),
            });
        }
        let mut trace = Vec::with_capacity(r);
        for i in 0..r {
            let t_idx: Vec<usize> = (0..opts.batch_size.min(target_feats.rows()))
                .map(|_| rng.below(target_feats.rows()))
                .collect();
            let t_batch = target_feats.gather_rows(&t_idx);
            let mut g = Graph::new();
            let bound = self.dad.predictor.bind(&mut g, true)?;
            let loss = if ce_weight > 0.0 {
                let sb = sample_labeled(source_pool, opts.batch_size, rng)?;
                let labels = sb.labels.as_ref().unwrap();
                let fv =
                    self.dad
                        .simulate_on_graph(&mut g, &bound, &sb.features, k, rng, window)?;
                let cvars = self.classifier_snapshot.mlp.bind(&mut g, false)?;
                let logits = self
                    .classifier_snapshot
                    .mlp
                    .forward_with_vars(&mut g, &cvars, fv)?;
                let ce = g.softmax_cross_entropy(logits, labels)?;
                let ce = g.scale(ce, ce_weight)?;
                let ltr = reverse_loss_on_graph(&mut g, &bound, &t_batch, &self.dad.sched, rng)?;
                g.add(ce, ltr)?
            } else {
                reverse_loss_on_graph(&mut g, &bound, &t_batch, &self.dad.sched, rng)?
            };
            trace.push(g.scalar_value(loss));
            let vars = bound.vars.clone();
            drop(bound);
            let grads = g.backward(loss)?;
            let mut params = self.dad.predictor.mlp.params_mut();
            grads.write_to(&vars, &mut params);
            let lr = poly_lr(opts.lr, i, r, opts.poly_power)?;
            self.opt_dad.step(&mut params, lr)?;
        }
        Ok(trace)
    }

    /// D→C: r iterations on the classifier minimizing the replay estimate
    /// of the previous-distribution average plus CE on fresh F^{D_k}
    /// batches, then fresh transitional(k) batches are stored for future
    /// phases. Requires the dad module frozen.
    pub fn d_to_c_phase(
        &mut self,
        source_pool: &FeatureBatch,
        k: usize,
        r: usize,
        m_replay: usize,
        opts: &TrainOpts,
        lpd_on: bool,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if !self.dad.frozen {
            return Err(Error::invalid("d_to_c_phase", "dad must be frozen"));
        }
        if lpd_on && k >= 1 && self.buffer.keys_below(k).is_empty() {
            return Err(Error::invalid(
                "d_to_c_phase",
                "replay buffer empty: store 0 must hold source batches",
            ));
        }
        let mut trace = Vec::with_capacity(r);
        for i in 0..r {
            let sb = sample_labeled(source_pool, opts.batch_size, rng)?;
            let sim = self.dad.simulate_transitional(&sb, k, rng)?;
            let mut g = Graph::new();
            let cvars = self.classifier.mlp.bind(&mut g, true)?;
            let fv = g.constant(&sim.features)?;
            let logits = self.classifier.mlp.forward_with_vars(&mut g, &cvars, fv)?;
            let ce_k = g.softmax_cross_entropy(logits, sim.labels.as_ref().unwrap())?;
            let loss = if lpd_on && k >= 1 {
                let picks = self.buffer.pick_indices(k, m_replay, rng);
                let mut terms = Vec::with_capacity(picks.len());
                for pi in &picks {
                    let b = self.buffer.sample(*pi, rng)?;
                    let bv = g.constant(&b.features)?;
                    let bl = self.classifier.mlp.forward_with_vars(&mut g, &cvars, bv)?;
                    terms.push(g.softmax_cross_entropy(bl, b.labels.as_ref().unwrap())?);
                }
                let mut acc = terms[0];
                for t in &terms[1..] {
                    acc = g.add(acc, *t)?;
                }
                let replay = g.scale(acc, 1.0 / terms.len() as f64)?;
                g.add(replay, ce_k)?
            } else {
                ce_k
            };
            trace.push(g.scalar_value(loss));
            let grads = g.backward(loss)?;
            let mut params = self.classifier.mlp.params_mut();
            grads.write_to(&cvars, &mut params);
            let lr = poly_lr(opts.lr, i, r, opts.poly_power)?;
            self.opt_cls.step(&mut params, lr)?;
        }
        // cache fresh level-k batches for later replay terms
        for _ in 0..self.buffer.capacity() {
            let sb = sample_labeled(source_pool, opts.batch_size, rng)?;
            let sim = self.dad.simulate_transitional(&sb, k, rng)?;
            self.buffer.insert(k, sim, rng)?;
        }
        self.k = k;
        Ok(trace)
    }
}

// -------------------------------------------------------------- runners

/// Standardized source/target datasets with the target split 80/20 into
/// an adaptation half (labels never used) and a labeled test half.
pub struct PreparedData {
    pub source: LabeledDataset,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
}

pub fn prepare_datasets(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let base = Rng::new(cfg.seed);
    let (source, target) = match &cfg.dataset {
        DatasetSpec::TwoMoons {
            n_per_domain,
            noise_std,
            rotation_deg,
        } => {
            let src = gen_two_moons(*n_per_domain, *noise_std, base.substream(20).seed())?;
            let tgt_base = gen_two_moons(*n_per_domain, *noise_std, base.substream(21).seed())?;
            let tgt = apply_shift(&tgt_base, *rotation_deg, &[0.0, 0.0], 1.0)?;
            (src, tgt)
        }
        DatasetSpec::GaussianMixture {
            classes,
            n_per_domain,
            mean_shift,
        } => gen_gaussian_mixture_pair(
            *classes,
            *n_per_domain,
            *mean_shift,
            base.substream(20).seed(),
        )?,
    };
    // shared preprocessing fitted on the source only
    let std = Standardizer::fit(&source.points);
    let source = std.apply_dataset(&source)?;
    let target = std.apply_dataset(&target)?;
    let mut order: Vec<usize> = (0..target.len()).collect();
    base.substream(22).shuffle(&mut order);
    let cut = (target.len() * 4) / 5;
    let target_train = target.subset(&order[..cut])?;
    let target_test = target.subset(&order[cut..])?;
    Ok(PreparedData {
        source,
        target_train,
        target_test,
    })
}

struct SourceStage {
    fe: FeatureExtractor,
    cl: Classifier,
    predictor: NoisePredictor,
    src_pool: FeatureBatch,
    tgt_pool: FeatureBatch,
    tgt_test_feats: Tensor,
    report: AdaptationReport,
}

/// Model construction + source training + baseline evaluation, shared by
/// every runner so degenerate configs take identical paths.
fn source_stage(cfg: &ExperimentConfig, data: &PreparedData) -> Result<SourceStage> {
    cfg.validate()?;
    if data.source.is_empty() || data.target_train.is_empty() || data.target_test.is_empty() {
        return Err(Error::invalid("source_stage", "empty dataset split"));
    }
    let base = Rng::new(cfg.seed);
    let mut init = base.substream(1);
    let mut fe = FeatureExtractor::new(
        data.source.dim(),
        cfg.extractor_hidden,
        cfg.feature_dim,
        &mut init,
    )?;
    let mut cl = Classifier::new(
        cfg.feature_dim,
        cfg.classifier_hidden,
        data.source.classes().max(2),
        &mut init,
    )?;
    let predictor = NoisePredictor::new(
        cfg.feature_dim,
        cfg.noise_hidden,
        cfg.noise_hidden_layers,
        cfg.emb_width,
        &mut init,
    )?;
    let opts = cfg.train_opts();
    let mut train_rng = base.substream(2);
    train_source(
        &mut fe,
        &mut cl,
        &data.source,
        cfg.epochs_source,
        &opts,
        &mut train_rng,
    )?;
    let src_pool = fe.extract(
        &data.source.points,
        DomainTag::Source,
        Some(data.source.labels.clone()),
    )?;
    // target labels stop here: adaptation only ever sees unlabeled batches
    let tgt_pool = fe.extract(&data.target_train.points, DomainTag::Target, None)?;
    let tgt_test_feats = fe
        .extract(&data.target_test.points, DomainTag::Target, None)?
        .features;
    let mut report = AdaptationReport::new(cfg);
    report.baseline_target_accuracy = accuracy(&cl, &fe, &data.target_test)?;
    Ok(SourceStage {
        fe,
        cl,
        predictor,
        src_pool,
        tgt_pool,
        tgt_test_feats,
        report,
    })
}

fn finish_report(
    stage: &SourceStage,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    cl: &Classifier,
    dad: Option<&DadModule>,
    started: Instant,
    mut report: AdaptationReport,
) -> Result<AdaptationReport> {
    report.final_source_accuracy = accuracy(cl, &stage.fe, &data.source)?;
    report.final_target_accuracy = accuracy(cl, &stage.fe, &data.target_test)?;
    let probe_rows: Vec<usize> = (0..stage.src_pool.len().min(500)).collect();
    let src_probe = FeatureBatch::new(
        stage.src_pool.features.gather_rows(&probe_rows),
        Some(
            probe_rows
                .iter()
                .map(|&i| stage.src_pool.labels.as_ref().unwrap()[i])
                .collect(),
        ),
        DomainTag::Source,
    )?;
    match dad {
        Some(dad) => {
            let stride = (cfg.k_steps / 20).max(1);
            let mut ks: Vec<usize> = (0..=cfg.k_steps).step_by(stride).collect();
            if ks.last() != Some(&cfg.k_steps) {
                ks.push(cfg.k_steps);
            }
            let mut prof_rng = Rng::new(cfg.seed).substream(6);
            report.mmd_profile = dad.distance_profile(
                &src_probe,
                &stage.tgt_test_feats,
                &ks,
                &mut prof_rng,
                MmdConfig::default(),
            )?;
        }
        None => {
            report.mmd_profile = vec![(
                0,
                rbf_mmd2(&src_probe.features, &stage.tgt_test_feats, MmdConfig::default())?,
            )];
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if !report.check() {
        return Err(Error::invalid("report", "accuracy out of [0,1]"));
    }
    Ok(report)
}

/// Frozen-snapshot cross-entropy on the probe batch simulated at level k
/// with a fixed noise stream, so before/after values are comparable.
fn probe_ce(
    dad: &DadModule,
    snapshot: &Classifier,
    probe: &FeatureBatch,
    k: usize,
    seed_rng: Rng,
) -> Result<f64> {
    let mut rng = seed_rng;
    let sim = dad.simulate_transitional(probe, k, &mut rng)?;
    let logits = snapshot.classify(&sim)?;
    ce_value(&logits, sim.labels.as_ref().unwrap())
}

fn checksum_guard(before: &str, after: &str, what: &'static str) -> Result<()> {
    if before != after {
        return Err(Error::invalid(what, "frozen parameters changed"));
    }
    Ok(())
}

/// A finished run: the report plus the trained models, for checkpointing
/// and feature export.
pub struct RunArtifacts {
    pub report: AdaptationReport,
    pub fe: FeatureExtractor,
    pub classifier: Classifier,
    pub dad: Option<DadModule>,
}

/// The full pipeline: source training, target reverse pretraining, the
/// alternating per-k mutual learning loop, final evaluation with the
/// diffusion module removed from the inference path.
pub fn run_mls(cfg: &ExperimentConfig, data: &PreparedData) -> Result<AdaptationReport> {
    run_mls_artifacts(cfg, data).map(|a| a.report)
}

pub fn run_mls_artifacts(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunArtifacts> {
    let started = Instant::now();
    let mut stage = source_stage(cfg, data)?;
    if cfg.k_steps == 0 {
        let report = stage.report.clone();
        let cl = stage.cl.clone();
        let report = finish_report(&stage, cfg, data, &cl, None, started, report)?;
        return Ok(RunArtifacts {
            report,
            fe: stage.fe,
            classifier: cl,
            dad: None,
        });
    }
    let sched = VarianceSchedule::linear(cfg.k_steps, cfg.beta_1, cfg.beta_k)?;
    let mut dad = DadModule::new(stage.predictor.clone(), sched);
    let opts = cfg.train_opts();
    let base = Rng::new(cfg.seed);
    if cfg.initial_training_on {
        let mut pre_rng = base.substream(3);
        dad.pretrain_target_reverse(&stage.tgt_pool, cfg.steps_dad_pretrain, &opts, &mut pre_rng)?;
    }
    let mut state = MlsState::new(stage.cl.clone(), dad, cfg.replay_capacity, &opts);
    let mut mls_rng = base.substream(4);
    let mut seed_rng = base.substream(7);
    for _ in 0..cfg.replay_capacity {
        let sb = sample_labeled(&stage.src_pool, cfg.batch_size, &mut seed_rng)?;
        state.buffer.insert(0, sb, &mut seed_rng)?;
    }
    let probe_rows: Vec<usize> = (0..stage.src_pool.len().min(cfg.batch_size)).collect();
    let probe = FeatureBatch::new(
        stage.src_pool.features.gather_rows(&probe_rows),
        Some(
            probe_rows
                .iter()
                .map(|&i| stage.src_pool.labels.as_ref().unwrap()[i])
                .collect(),
        ),
        DomainTag::Source,
    )?;
    let fe_sum = param_checksum(&stage.fe.mlp.params());
    let run_c2d = cfg.mls_on && !cfg.d_to_c_only;
    let run_d2c = !cfg.c_to_d_only;
    // without the mutual strategy the classifier still trains per k, but
    // with no replay over previous distributions
    let lpd = cfg.lpd_on && cfg.mls_on;
    for &k in &cfg.visited_ks() {
        let probe_stream = base.substream(1000 + k as u64);
        let ce_before = probe_ce(&state.dad, &state.classifier_snapshot, &probe, k, probe_stream.clone())?;
        let mut c2d_mean = 0.0;
        if run_c2d {
            let cls_sum = param_checksum(&state.classifier.mlp.params());
            let trace = state.c_to_d_phase(
                &stage.src_pool,
                &stage.tgt_pool.features,
                k,
                cfg.r,
                &opts,
                cfg.ce_weight,
                cfg.truncate_reverse_grad,
                &mut mls_rng,
            )?;
            c2d_mean = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
            checksum_guard(
                &cls_sum,
                &param_checksum(&state.classifier.mlp.params()),
                "c_to_d_phase isolation",
            )?;
        }
        let ce_after = probe_ce(&state.dad, &state.classifier_snapshot, &probe, k, probe_stream)?;
        let mut d2c_mean = 0.0;
        if run_d2c {
            state.dad.frozen = true;
            let dad_sum = param_checksum(&state.dad.predictor.mlp.params());
            let trace = state.d_to_c_phase(
                &stage.src_pool,
                k,
                cfg.r,
                cfg.m_replay,
                &opts,
                lpd,
                &mut mls_rng,
            )?;
            d2c_mean = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
            checksum_guard(
                &dad_sum,
                &param_checksum(&state.dad.predictor.mlp.params()),
                "d_to_c_phase isolation",
            )?;
            state.dad.frozen = false;
            state.classifier_snapshot = state.classifier.snapshot();
        }
        checksum_guard(&fe_sum, &param_checksum(&stage.fe.mlp.params()), "extractor freeze")?;
        stage.report.per_k.push(PerKRecord {
            k,
            c_to_d_loss: c2d_mean,
            d_to_c_loss: d2c_mean,
            probe_ce_before: ce_before,
            probe_ce_after: ce_after,
        });
    }
    if cfg.c_to_d_only {
        // the classifier never trained during the loop; give it the same
        // endpoint-only budget as the direct-transition baseline
        let iters = cfg.visited_ks().len() * cfg.r;
        state.dad.frozen = true;
        endpoint_classifier_training(&mut state, &stage.src_pool, cfg, iters, &mut mls_rng)?;
        state.dad.frozen = false;
    }
    let report = stage.report.clone();
    let cl = state.classifier.clone();
    state.dad.frozen = true;
    let report = finish_report(&stage, cfg, data, &cl, Some(&state.dad), started, report)?;
    Ok(RunArtifacts {
        report,
        fe: stage.fe,
        classifier: cl,
        dad: Some(state.dad),
    })
}

/// Endpoint-only classifier training on {F^S, F^{D_K}}: exactly the D→C
/// objective at k = K with a replay buffer holding only the source store.
fn endpoint_classifier_training(
    state: &mut MlsState,
    src_pool: &FeatureBatch,
    cfg: &ExperimentConfig,
    iters: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    state.d_to_c_phase(src_pool, cfg.k_steps, iters, 1, &cfg.train_opts(), true, rng)
}

/// The direct-transition baseline: no intermediate distributions; the
/// classifier trains only on source and full-depth simulated batches.
pub fn run_direct_transition(cfg: &ExperimentConfig, data: &PreparedData) -> Result<AdaptationReport> {
    run_direct_artifacts(cfg, data).map(|a| a.report)
}

pub fn run_direct_artifacts(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunArtifacts> {
    let started = Instant::now();
    let mut stage = source_stage(cfg, data)?;
    if cfg.k_steps == 0 {
        let report = stage.report.clone();
        let cl = stage.cl.clone();
        let report = finish_report(&stage, cfg, data, &cl, None, started, report)?;
        return Ok(RunArtifacts {
            report,
            fe: stage.fe,
            classifier: cl,
            dad: None,
        });
    }
    let sched = VarianceSchedule::linear(cfg.k_steps, cfg.beta_1, cfg.beta_k)?;
    let mut dad = DadModule::new(stage.predictor.clone(), sched);
    let opts = cfg.train_opts();
    let base = Rng::new(cfg.seed);
    if cfg.initial_training_on {
        let mut pre_rng = base.substream(3);
        dad.pretrain_target_reverse(&stage.tgt_pool, cfg.steps_dad_pretrain, &opts, &mut pre_rng)?;
    }
    dad.frozen = true;
    let mut state = MlsState::new(stage.cl.clone(), dad, cfg.replay_capacity, &opts);
    let mut mls_rng = base.substream(4);
    let mut seed_rng = base.substream(7);
    for _ in 0..cfg.replay_capacity {
        let sb = sample_labeled(&stage.src_pool, cfg.batch_size, &mut seed_rng)?;
        state.buffer.insert(0, sb, &mut seed_rng)?;
    }
    let iters = cfg.visited_ks().len() * cfg.r;
    let trace = endpoint_classifier_training(&mut state, &stage.src_pool, cfg, iters, &mut mls_rng)?;
    stage.report.per_k.push(PerKRecord {
        k: cfg.k_steps,
        c_to_d_loss: 0.0,
        d_to_c_loss: trace.iter().sum::<f64>() / trace.len().max(1) as f64,
        probe_ce_before: 0.0,
        probe_ce_after: 0.0,
    });
    let report = stage.report.clone();
    let cl = state.classifier.clone();
    let report = finish_report(&stage, cfg, data, &cl, Some(&state.dad), started, report)?;
    Ok(RunArtifacts {
        report,
        fe: stage.fe,
        classifier: cl,
        dad: Some(state.dad),
    })
}

/// Source-only baseline: train on source, evaluate on target, no
/// adaptation. Identical to `run_mls` with K = 0.
pub fn run_baseline(cfg: &ExperimentConfig, data: &PreparedData) -> Result<AdaptationReport> {
    run_baseline_artifacts(cfg, data).map(|a| a.report)
}

pub fn run_baseline_artifacts(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunArtifacts> {
    let mut degenerate = cfg.clone();
    degenerate.k_steps = 0;
    degenerate.k_stride = 1;
    run_mls_artifacts(&degenerate, data)
}
