//! Experiment runner: parses configs, dispatches presets, and emits
//! reports, checkpoints, and feature-trajectory exports.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
//! 3 property failure in grad-check/selftest.

use clap::{Parser, Subcommand, ValueEnum};
use dad_core::config::{parse_config, ExperimentConfig};
use dad_core::dad::DadModule;
use dad_core::diffusion::{
    diffuse_k_steps, diffuse_one_step, reverse_loss_value, GraphNoiseModel, NoiseModel,
    VarianceSchedule,
};
use dad_core::error::Error as CoreError;
use dad_core::metrics::accuracy;
use dad_core::mls::{
    prepare_datasets, run_baseline_artifacts, run_direct_artifacts, run_mls_artifacts,
    PreparedData, RunArtifacts,
};
use dad_core::models::{
    Checkpoint, Classifier, DomainTag, FeatureExtractor, NoisePredictor,
};
use dad_core::numerics::gradcheck::grad_check;
use dad_core::numerics::rng::Rng;
use dad_core::numerics::tensor::Tensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dad", about = "domain-adaptive diffusion experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Baseline,
    Direct,
    Full,
    AblationNoMls,
    AblationNoIt,
    AblationNoLpd,
    AblationC2dOnly,
    AblationD2cOnly,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment preset and write report, checkpoint, and feature
    /// export into the output directory.
    Run {
        #[arg(long, value_enum)]
        preset: Preset,
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export source, target, and transitional features from a checkpoint
    /// as delimited text.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Transitional levels to export (repeatable).
        #[arg(long = "k")]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpointed classifier on the configured domain pair.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference verification of the model gradients.
    GradCheck,
    /// Diffusion Monte-Carlo property suite.
    Selftest,
}

enum AppError {
    Usage(String),
    Runtime(String),
    Property(String),
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> AppError {
        match e {
            CoreError::Config { .. } | CoreError::InvalidArg { .. } => {
                AppError::Usage(e.to_string())
            }
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

type AppResult<T> = Result<T, AppError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero status
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.cmd {
        Cmd::Run {
            preset,
            config,
            out,
        } => cmd_run(preset, config.as_deref(), &out),
        Cmd::ExportFeatures {
            checkpoint,
            config,
            ks,
            out,
        } => cmd_export_features(&checkpoint, config.as_deref(), &ks, &out),
        Cmd::Eval { checkpoint, config } => cmd_eval(&checkpoint, config.as_deref()),
        Cmd::GradCheck => cmd_grad_check(),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(AppError::Property(m)) => {
            eprintln!("property failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: Option<&Path>) -> AppResult<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    Ok(parse_config(&text)?)
}

fn apply_preset(mut cfg: ExperimentConfig, preset: Preset) -> ExperimentConfig {
    match preset {
        Preset::Baseline => {
            cfg.k_steps = 0;
            cfg.k_stride = 1;
        }
        Preset::Direct | Preset::Full => {}
        Preset::AblationNoMls => cfg.mls_on = false,
        Preset::AblationNoIt => cfg.initial_training_on = false,
        Preset::AblationNoLpd => cfg.lpd_on = false,
        Preset::AblationC2dOnly => cfg.c_to_d_only = true,
        Preset::AblationD2cOnly => cfg.d_to_c_only = true,
    }
    cfg
}

/// Removes everything this run managed to write before failing.
struct OutputSet {
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn new() -> OutputSet {
        OutputSet {
            written: Vec::new(),
        }
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn cmd_run(preset: Preset, config: Option<&Path>, out: &Path) -> AppResult<()> {
    let cfg = apply_preset(load_config(config)?, preset);
    cfg.validate()?;
    let data = prepare_datasets(&cfg)?;
    let arts: RunArtifacts = match preset {
        Preset::Baseline => run_baseline_artifacts(&cfg, &data)?,
        Preset::Direct => run_direct_artifacts(&cfg, &data)?,
        _ => run_mls_artifacts(&cfg, &data)?,
    };
    std::fs::create_dir_all(out)?;
    let mut outputs = OutputSet::new();
    let result = write_run_outputs(&cfg, &data, &arts, out, &mut outputs);
    if result.is_err() {
        outputs.cleanup();
    }
    result?;
    println!(
        "preset={preset:?} baseline_target={:.4} final_target={:.4} wall_clock={:.1}s",
        arts.report.baseline_target_accuracy,
        arts.report.final_target_accuracy,
        arts.report.wall_clock_secs
    );
    Ok(())
}

fn write_run_outputs(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    arts: &RunArtifacts,
    out: &Path,
    outputs: &mut OutputSet,
) -> AppResult<()> {
    let report_path = out.join("report.txt");
    outputs.written.push(report_path.clone());
    arts.report.write(&report_path)?;

    let ckpt_path = out.join("model.ckpt");
    outputs.written.push(ckpt_path.clone());
    let mut ck = Checkpoint::default();
    ck.insert_all("fe", &arts.fe.mlp.params());
    ck.insert_all("cl", &arts.classifier.mlp.params());
    if let Some(dad) = &arts.dad {
        ck.insert_all("np", &dad.predictor.mlp.params());
    }
    ck.write(&ckpt_path)?;

    let feats_path = out.join("features.csv");
    outputs.written.push(feats_path.clone());
    let ks: Vec<usize> = if arts.dad.is_some() {
        vec![cfg.k_steps]
    } else {
        vec![]
    };
    let text = render_features(cfg, data, &arts.fe, arts.dad.as_ref(), &ks)?;
    std::fs::write(&feats_path, text)?;
    Ok(())
}

/// Delimited feature rows: source (k = 0), every requested transitional
/// level, then target. Noise streams are seeded per level from the config
/// seed, so re-export is byte-identical.
fn render_features(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    fe: &FeatureExtractor,
    dad: Option<&DadModule>,
    ks: &[usize],
) -> AppResult<String> {
    let src = fe.extract(
        &data.source.points,
        DomainTag::Source,
        Some(data.source.labels.clone()),
    )?;
    let dim = src.features.cols();
    let mut s = String::new();
    let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    let _ = writeln!(s, "k,{},label,domain", header.join(","));
    let push_rows = |k: usize, feats: &Tensor, labels: Option<&[usize]>, domain: &str, s: &mut String| {
        for i in 0..feats.rows() {
            let row: Vec<String> = feats.row(i).iter().map(|v| format!("{v:?}")).collect();
            let label = labels.map_or(-1i64, |l| l[i] as i64);
            let _ = writeln!(s, "{k},{},{label},{domain}", row.join(","));
        }
    };
    push_rows(0, &src.features, src.labels.as_deref(), "source", &mut s);
    for &k in ks {
        let dad = dad.ok_or_else(|| {
            AppError::Runtime("checkpoint has no diffusion module section".into())
        })?;
        let mut rng = Rng::new(cfg.seed).substream(30 + k as u64);
        let sim = dad
            .simulate_transitional(&src, k, &mut rng)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        push_rows(
            k,
            &sim.features,
            sim.labels.as_deref(),
            &sim.domain.name(),
            &mut s,
        );
    }
    let mut tgt_points = data.target_train.points.data().to_vec();
    tgt_points.extend_from_slice(data.target_test.points.data());
    let tgt = Tensor::new(
        vec![
            data.target_train.len() + data.target_test.len(),
            data.target_train.dim(),
        ],
        tgt_points,
    )?;
    let tgt_feats = fe.extract(&tgt, DomainTag::Target, None)?;
    push_rows(0, &tgt_feats.features, None, "target", &mut s);
    Ok(s)
}

/// Rebuilds the models a run checkpoints, with shapes taken from the
/// config, and loads the stored parameters.
fn load_models(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    ckpt: &Checkpoint,
    need_dad: bool,
) -> AppResult<(FeatureExtractor, Classifier, Option<DadModule>)> {
    let mut rng = Rng::new(0);
    let mut fe = FeatureExtractor::new(
        data.source.dim(),
        cfg.extractor_hidden,
        cfg.feature_dim,
        &mut rng,
    )?;
    ckpt.load_into("fe", &mut fe.mlp)?;
    fe.freeze();
    let mut cl = Classifier::new(
        cfg.feature_dim,
        cfg.classifier_hidden,
        data.source.classes().max(2),
        &mut rng,
    )?;
    ckpt.load_into("cl", &mut cl.mlp)?;
    let dad = if need_dad {
        let mut np = NoisePredictor::new(
            cfg.feature_dim,
            cfg.noise_hidden,
            cfg.noise_hidden_layers,
            cfg.emb_width,
            &mut rng,
        )?;
        ckpt.load_into("np", &mut np.mlp)?;
        let sched = VarianceSchedule::linear(cfg.k_steps.max(1), cfg.beta_1, cfg.beta_k)?;
        let mut dad = DadModule::new(np, sched);
        dad.frozen = true;
        Some(dad)
    } else {
        None
    };
    Ok((fe, cl, dad))
}

fn cmd_export_features(
    checkpoint: &Path,
    config: Option<&Path>,
    ks: &[usize],
    out: &Path,
) -> AppResult<()> {
    let cfg = load_config(config)?;
    let data = prepare_datasets(&cfg)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let (fe, _cl, dad) = load_models(&cfg, &data, &ckpt, !ks.is_empty())?;
    let text = render_features(&cfg, &data, &fe, dad.as_ref(), ks)?;
    std::fs::write(out, text)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, config: Option<&Path>) -> AppResult<()> {
    let cfg = load_config(config)?;
    let data = prepare_datasets(&cfg)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let (fe, cl, _) = load_models(&cfg, &data, &ckpt, false)?;
    let src = accuracy(&cl, &fe, &data.source)?;
    let tgt = accuracy(&cl, &fe, &data.target_test)?;
    println!("source_accuracy={src:?}");
    println!("target_test_accuracy={tgt:?}");
    Ok(())
}

fn cmd_grad_check() -> AppResult<()> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let fe = FeatureExtractor::new(2, 8, 4, &mut rng)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        let cl = Classifier::new(4, 8, 3, &mut rng).map_err(|e| AppError::Runtime(e.to_string()))?;
        let np = NoisePredictor::new(4, 12, 2, 8, &mut rng)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        let x = Rng::new(100 + seed).gaussian(vec![6, 2]).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let mut params: Vec<Tensor> = Vec::new();
        for (_, t) in fe.mlp.params() {
            params.push(t.clone());
        }
        let n_fe = params.len();
        for (_, t) in cl.mlp.params() {
            params.push(t.clone());
        }
        let fe_mlp = fe.mlp.clone();
        let cl_mlp = cl.mlp.clone();
        let err = grad_check(
            |g, vars| {
                let xv = g.constant(&x)?;
                let feats = fe_mlp.forward_with_vars(g, &vars[..n_fe], xv)?;
                let logits = cl_mlp.forward_with_vars(g, &vars[n_fe..], feats)?;
                g.softmax_cross_entropy(logits, &labels)
            },
            &params,
            // small step: keeps finite-difference probes away from the
            // leaky-rectifier kinks without hitting roundoff
            1e-6,
        )?;
        worst = worst.max(err);
        let f = Rng::new(200 + seed).gaussian(vec![5, 4]).unwrap();
        let ks = [1usize, 3, 2, 5, 4];
        let np_params: Vec<Tensor> = np.mlp.params().iter().map(|(_, t)| (*t).clone()).collect();
        let np2 = np.clone();
        let err = grad_check(
            |g, vars| {
                let bound = np2.with_vars(vars.to_vec());
                let fv = g.constant(&f)?;
                let out = bound.predict_on_graph(g, fv, &ks)?;
                let sq = g.square(out)?;
                g.mean_all(sq)
            },
            &np_params,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    println!("grad-check max relative error: {worst:e}");
    if worst < 1e-4 {
        println!("grad-check: PASS");
        Ok(())
    } else {
        Err(AppError::Property(format!(
            "gradient mismatch: max relative error {worst:e} >= 1e-4"
        )))
    }
}

struct ZeroPredictor;

impl NoiseModel for ZeroPredictor {
    fn predict(&self, f_k: &Tensor, _ks: &[usize]) -> dad_core::Result<Tensor> {
        Ok(Tensor::zeros(f_k.shape().to_vec()))
    }
}

fn cmd_selftest() -> AppResult<()> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{}: {}", name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures.push(format!("{name}: {detail}"));
        }
    };

    // schedule identities on the reference schedule
    let sched = VarianceSchedule::linear(600, 1e-4, 0.02).map_err(AppError::from)?;
    let mut id_ok = true;
    for k in 1..=600 {
        let prod: f64 = (1..=k).map(|i| sched.alpha(i)).product();
        if (sched.alpha_bar(k) - prod).abs() > 1e-12 * prod.abs().max(1.0)
            || (sched.alpha(k) - (1.0 - sched.beta(k))).abs() > 1e-15
        {
            id_ok = false;
        }
    }
    check(
        "schedule identities",
        id_ok && sched.alpha_bar(600) < 0.05,
        format!("alpha_bar(600) = {}", sched.alpha_bar(600)),
    );

    // closed-form marginal vs iterated one-step diffusion, Monte Carlo
    let k_steps = 50;
    let sched = VarianceSchedule::linear(k_steps, 1e-4, 0.02).map_err(AppError::from)?;
    let f0 = Tensor::new(vec![1, 2], vec![1.5, -0.75]).map_err(AppError::from)?;
    for k in [1usize, 10, k_steps] {
        let trials = 10_000;
        let mut rng = Rng::new(7 + k as u64);
        let (mut mean_c, mut mean_i, mut sq_c, mut sq_i) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..trials {
            let noise = rng.gaussian(vec![1, 2]).map_err(AppError::from)?;
            let c = diffuse_k_steps(&f0, k, &sched, &noise).map_err(AppError::from)?;
            let mut it = f0.clone();
            for step in 1..=k {
                let n = rng.gaussian(vec![1, 2]).map_err(AppError::from)?;
                it = diffuse_one_step(&it, step, &sched, &n).map_err(AppError::from)?;
            }
            mean_c += c.data()[0];
            mean_i += it.data()[0];
            sq_c += c.data()[0] * c.data()[0];
            sq_i += it.data()[0] * it.data()[0];
        }
        let n = trials as f64;
        let (mc, mi) = (mean_c / n, mean_i / n);
        let (vc, vi) = (sq_c / n - mc * mc, sq_i / n - mi * mi);
        let ab = sched.alpha_bar(k);
        let exp_mean = ab.sqrt() * f0.data()[0];
        let exp_var = 1.0 - ab;
        let sigma_mean = (exp_var / n).sqrt();
        let sigma_var = exp_var * (2.0 / n).sqrt();
        let ok = (mc - exp_mean).abs() < 3.0 * sigma_mean.max(1e-9)
            && (mi - exp_mean).abs() < 3.0 * sigma_mean.max(1e-9)
            && (vc - exp_var).abs() < 3.0 * sigma_var
            && (vi - exp_var).abs() < 3.0 * sigma_var;
        check(
            &format!("closed-form vs iterated diffusion (k={k})"),
            ok,
            format!("means {mc:.4}/{mi:.4} (expect {exp_mean:.4}), vars {vc:.4}/{vi:.4} (expect {exp_var:.4})"),
        );
    }

    // zero predictor: loss is E[eps^2] = 1
    let mut rng = Rng::new(11);
    let feats = rng.gaussian(vec![2000, 3]).map_err(AppError::from)?;
    let loss = reverse_loss_value(&ZeroPredictor, &feats, &sched, &mut rng).map_err(AppError::from)?;
    let n_entries = 2000.0 * 3.0;
    let sigma = (2.0 / n_entries as f64).sqrt();
    check(
        "zero-predictor loss near 1",
        (loss - 1.0).abs() < 3.0 * sigma + 0.01,
        format!("loss = {loss}"),
    );

    if failures.is_empty() {
        println!("selftest: all properties hold");
        Ok(())
    } else {
        Err(AppError::Property(failures.join("; ")))
    }
}
