//! The domain-adaptive diffusion module: composes the forward diffusion
//! and learned reverse operators to simulate transitional features
//! between the source and target domains, plus its target-domain initial
//! training.
//!
//! A transitional batch at level k is produced by diffusing source
//! features k steps (closed-form marginal, fresh noise) and then applying
//! the reverse operator k times (fresh noise each step except the last).
//! Level 0 is the identity on the source batch.

use crate::diffusion::{
    diffuse_k_steps, reverse_loss_on_graph, reverse_one_step, GraphNoiseModel, NoiseModel,
    VarianceSchedule,
};
use crate::error::{Error, Result};
use crate::metrics::{rbf_mmd2, MmdConfig};
use crate::models::{BoundPredictor, DomainTag, FeatureBatch, NoisePredictor};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::{poly_lr, TrainOpts};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

/// How far gradients propagate back through the reverse chain during
/// training of the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWindow {
    /// Backpropagate through all k reverse steps.
    Full,
    /// Backpropagate through the last n reverse steps only; earlier steps
    /// run outside the graph.
    Truncate(usize),
}

#[derive(Debug, Clone)]
pub struct DadModule {
    pub predictor: NoisePredictor,
    pub sched: VarianceSchedule,
    pub frozen: bool,
}

impl DadModule {
    pub fn new(predictor: NoisePredictor, sched: VarianceSchedule) -> DadModule {
        DadModule {
            predictor,
            sched,
            frozen: false,
        }
    }

    pub fn k_max(&self) -> usize {
        self.sched.k_max()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.k_max() {
            return Err(Error::StepOutOfRange {
                k,
                max: self.k_max(),
            });
        }
        Ok(())
    }

    /// Eval-mode simulation of the level-k feature tensor.
    pub fn simulate_features(&self, feats: &Tensor, k: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_k(k)?;
        if k == 0 {
            return Ok(feats.clone());
        }
        let shape = feats.shape().to_vec();
        let noise = rng.gaussian(shape.clone())?;
        let mut cur = diffuse_k_steps(feats, k, &self.sched, &noise)?;
        for step in (1..=k).rev() {
            let noise = if step > 1 {
                rng.gaussian(shape.clone())?
            } else {
                Tensor::zeros(shape.clone())
            };
            cur = reverse_one_step(&cur, step, &self.sched, &self.predictor, &noise)?;
        }
        Ok(cur)
    }

    /// Simulates transitional features from a source batch; labels are
    /// inherited and the output is tagged `transitional(k)`.
    pub fn simulate_transitional(
        &self,
        f_s: &FeatureBatch,
        k: usize,
        rng: &mut Rng,
    ) -> Result<FeatureBatch> {
        if f_s.domain != DomainTag::Source {
            return Err(Error::invalid(
                "simulate_transitional",
                format!("expected a source batch, got {}", f_s.domain.name()),
            ));
        }
        if k == 0 {
            // identity convention: features bit-identical, labels preserved
            return FeatureBatch::new(
                f_s.features.clone(),
                f_s.labels.clone(),
                DomainTag::Source,
            );
        }
        let feats = self.simulate_features(&f_s.features, k, rng)?;
        FeatureBatch::new(feats, f_s.labels.clone(), DomainTag::Transitional(k))
    }

    /// Graph-mode simulation: the diffusion leg and any truncated prefix
    /// of the reverse chain are constants; the remaining reverse steps are
    /// recorded so gradients reach the bound predictor's parameters. Uses
    /// the same noise-draw order as `simulate_features`.
    pub fn simulate_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundPredictor<'_>,
        feats: &Tensor,
        k: usize,
        rng: &mut Rng,
        window: GradWindow,
    ) -> Result<Var> {
        self.check_k(k)?;
        if k == 0 {
            return g.constant(feats);
        }
        let shape = feats.shape().to_vec();
        let rows = shape[0];
        let noise = rng.gaussian(shape.clone())?;
        let mut cur_eval = diffuse_k_steps(feats, k, &self.sched, &noise)?;
        let n_grad = match window {
            GradWindow::Full => k,
            GradWindow::Truncate(n) => n.min(k),
        };
        for step in (n_grad + 1..=k).rev() {
            let noise = if step > 1 {
                rng.gaussian(shape.clone())?
            } else {
                Tensor::zeros(shape.clone())
            };
            cur_eval = reverse_one_step(&cur_eval, step, &self.sched, &self.predictor, &noise)?;
        }
        let mut cur = g.constant(&cur_eval)?;
        for step in (1..=n_grad).rev() {
            let (a, b, ab) = (
                self.sched.alpha(step),
                self.sched.beta(step),
                self.sched.alpha_bar(step),
            );
            let coef = if b == 0.0 { 0.0 } else { b / (1.0 - ab).sqrt() };
            let pred = bound.predict_on_graph(g, cur, &vec![step; rows])?;
            let scaled_pred = g.scale(pred, coef / a.sqrt())?;
            let scaled_cur = g.scale(cur, 1.0 / a.sqrt())?;
            cur = g.sub(scaled_cur, scaled_pred)?;
            if step > 1 {
                let mut noise = rng.gaussian(shape.clone())?;
                let s = b.sqrt();
                for v in noise.data_mut() {
                    *v *= s;
                }
                let nv = g.constant(&noise)?;
                cur = g.add(cur, nv)?;
            }
        }
        Ok(cur)
    }

    /// Initial training of the reverse operator on target features via the
    /// noise-prediction loss. Returns the per-step loss trace.
    pub fn pretrain_target_reverse(
        &mut self,
        target: &FeatureBatch,
        steps: usize,
        opts: &TrainOpts,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::invalid(
                "pretrain_target_reverse",
                "module is frozen",
            ));
        }
        if target.domain != DomainTag::Target {
            return Err(Error::invalid(
                "pretrain_target_reverse",
                format!("expected target batches, got {}", target.domain.name()),
            ));
        }
        let pool = &target.features;
        let mut opt = opts.optimizer();
        let mut trace = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx: Vec<usize> = (0..opts.batch_size.min(pool.rows()))
                .map(|_| rng.below(pool.rows()))
                .collect();
            let batch = pool.gather_rows(&idx);
            let mut g = Graph::new();
            let bound = self.predictor.bind(&mut g, true)?;
            let loss = reverse_loss_on_graph(&mut g, &bound, &batch, &self.sched, rng)?;
            trace.push(g.scalar_value(loss));
            let vars = bound.vars.clone();
            drop(bound);
            let grads = g.backward(loss)?;
            let mut params = self.predictor.mlp.params_mut();
            grads.write_to(&vars, &mut params);
            let lr = poly_lr(opts.lr, step, steps, opts.poly_power)?;
            opt.step(&mut params, lr)?;
        }
        Ok(trace)
    }

    /// RBF-MMD^2 between the level-k transitional features and the target
    /// features, for each requested k.
    pub fn distance_profile(
        &self,
        f_s: &FeatureBatch,
        target_feats: &Tensor,
        ks: &[usize],
        rng: &mut Rng,
        cfg: MmdConfig,
    ) -> Result<Vec<(usize, f64)>> {
        if ks.is_empty() {
            return Err(Error::invalid("dad_distance_profile", "empty k list"));
        }
        let mut out = Vec::with_capacity(ks.len());
        for &k in ks {
            let sim = self.simulate_transitional(f_s, k, rng)?;
            out.push((k, rbf_mmd2(&sim.features, target_feats, cfg)?));
        }
        Ok(out)
    }
}

// keep the eval predictor trait importable for callers that stub it
impl NoiseModel for DadModule {
    fn predict(&self, f_k: &Tensor, ks: &[usize]) -> Result<Tensor> {
        self.predictor.predict(f_k, ks)
    }
}
