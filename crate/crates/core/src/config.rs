//! Flat key=value experiment configuration with documented defaults,
//! strict unknown-key rejection, and a round-trippable serialization.

use crate::dad::GradWindow;
use crate::error::{Error, Result};
use crate::numerics::optim::TrainOpts;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Which synthetic domain pair to generate.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    TwoMoons {
        n_per_domain: usize,
        noise_std: f64,
        rotation_deg: f64,
    },
    GaussianMixture {
        classes: usize,
        n_per_domain: usize,
        mean_shift: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub k_steps: usize, // K
    pub r: usize,
    pub beta_1: f64,
    pub beta_k: f64,
    pub k_stride: usize,
    pub m_replay: usize,
    pub truncate_reverse_grad: GradWindow,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub epochs_source: usize,
    pub steps_dad_pretrain: usize,
    pub feature_dim: usize,
    pub extractor_hidden: usize,
    pub classifier_hidden: usize,
    pub noise_hidden: usize,
    pub noise_hidden_layers: usize,
    pub emb_width: usize,
    pub replay_capacity: usize,
    pub ce_weight: f64,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub mls_on: bool,
    pub initial_training_on: bool,
    pub lpd_on: bool,
    pub c_to_d_only: bool,
    pub d_to_c_only: bool,
}

/// Stride default: 1 through K = 100, then coarsened so roughly 100
/// distributions are visited.
fn default_stride(k_steps: usize) -> usize {
    if k_steps <= 100 {
        1
    } else {
        k_steps / 100
    }
}

/// Backprop-window default: full chain through K = 100, last 25 steps
/// beyond that.
fn default_window(k_steps: usize) -> GradWindow {
    if k_steps <= 100 {
        GradWindow::Full
    } else {
        GradWindow::Truncate(25)
    }
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            k_steps: 600,
            r: 20,
            beta_1: 1e-4,
            beta_k: 0.02,
            k_stride: default_stride(600),
            m_replay: 2,
            truncate_reverse_grad: default_window(600),
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            batch_size: 24,
            epochs_source: 5,
            steps_dad_pretrain: 10000,
            feature_dim: 8,
            extractor_hidden: 64,
            classifier_hidden: 64,
            noise_hidden: 128,
            noise_hidden_layers: 3,
            emb_width: 32,
            replay_capacity: 4,
            ce_weight: 1.0,
            dataset: DatasetSpec::TwoMoons {
                n_per_domain: 2000,
                noise_std: 0.08,
                rotation_deg: 50.0,
            },
            seed: 0,
            mls_on: true,
            initial_training_on: true,
            lpd_on: true,
            c_to_d_only: false,
            d_to_c_only: false,
        }
    }
}

impl ExperimentConfig {
    pub fn train_opts(&self) -> TrainOpts {
        TrainOpts {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            batch_size: self.batch_size,
        }
    }

    /// Distribution indices visited by the MLS loop: stride steps up from
    /// zero, always ending exactly at K.
    pub fn visited_ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = (self.k_stride..=self.k_steps)
            .step_by(self.k_stride.max(1))
            .collect();
        if ks.last() != Some(&self.k_steps) && self.k_steps > 0 {
            ks.push(self.k_steps);
        }
        ks
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| -> Result<()> {
            Err(Error::Config {
                line: 0,
                msg: format!("{key}: {msg}"),
            })
        };
        if self.r < 1 {
            return fail("r", "invariant violated: r >= 1".into());
        }
        if !(self.beta_1 > 0.0 && self.beta_1 <= self.beta_k && self.beta_k < 1.0) {
            return fail(
                "beta_1",
                format!(
                    "invariant violated: 0 < beta_1 <= beta_K < 1 (got beta_1={}, beta_K={})",
                    self.beta_1, self.beta_k
                ),
            );
        }
        if self.k_stride < 1 || self.k_stride > self.k_steps.max(1) {
            return fail(
                "k_stride",
                format!(
                    "invariant violated: 1 <= k_stride <= max(K,1) (got {})",
                    self.k_stride
                ),
            );
        }
        if self.m_replay < 1 {
            return fail("m_replay", "invariant violated: m_replay >= 1".into());
        }
        for (key, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
            ("ce_weight", self.ce_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(key, format!("must be finite and >= 0 (got {v})"));
            }
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("feature_dim", self.feature_dim),
            ("extractor_hidden", self.extractor_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("noise_hidden", self.noise_hidden),
            ("noise_hidden_layers", self.noise_hidden_layers),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return fail(key, "must be >= 1".into());
            }
        }
        if self.emb_width < 2 || self.emb_width % 2 != 0 {
            return fail("emb_width", "must be even and >= 2".into());
        }
        if self.c_to_d_only && self.d_to_c_only {
            return fail(
                "c_to_d_only",
                "c_to_d_only and d_to_c_only are mutually exclusive".into(),
            );
        }
        match &self.dataset {
            DatasetSpec::TwoMoons {
                n_per_domain,
                noise_std,
                ..
            } => {
                if *n_per_domain < 10 {
                    return fail("n_per_domain", "need >= 10 points per domain".into());
                }
                if *noise_std < 0.0 {
                    return fail("noise_std", "must be >= 0".into());
                }
            }
            DatasetSpec::GaussianMixture {
                classes,
                n_per_domain,
                ..
            } => {
                if *classes < 2 {
                    return fail("classes", "need >= 2 classes".into());
                }
                if *n_per_domain < *classes {
                    return fail("n_per_domain", "need >= one point per class".into());
                }
            }
        }
        Ok(())
    }

    /// Serializes every key explicitly; `parse(serialize(c)) == c` for all
    /// valid configs.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "K={}", self.k_steps);
        let _ = writeln!(w, "r={}", self.r);
        let _ = writeln!(w, "beta_1={:?}", self.beta_1);
        let _ = writeln!(w, "beta_K={:?}", self.beta_k);
        let _ = writeln!(w, "k_stride={}", self.k_stride);
        let _ = writeln!(w, "m_replay={}", self.m_replay);
        match self.truncate_reverse_grad {
            GradWindow::Full => {
                let _ = writeln!(w, "truncate_reverse_grad=full");
            }
            GradWindow::Truncate(n) => {
                let _ = writeln!(w, "truncate_reverse_grad={n}");
            }
        }
        let _ = writeln!(w, "lr={:?}", self.lr);
        let _ = writeln!(w, "momentum={:?}", self.momentum);
        let _ = writeln!(w, "weight_decay={:?}", self.weight_decay);
        let _ = writeln!(w, "poly_power={:?}", self.poly_power);
        let _ = writeln!(w, "batch_size={}", self.batch_size);
        let _ = writeln!(w, "epochs_source={}", self.epochs_source);
        let _ = writeln!(w, "steps_dad_pretrain={}", self.steps_dad_pretrain);
        let _ = writeln!(w, "feature_dim={}", self.feature_dim);
        let _ = writeln!(w, "extractor_hidden={}", self.extractor_hidden);
        let _ = writeln!(w, "classifier_hidden={}", self.classifier_hidden);
        let _ = writeln!(w, "noise_hidden={}", self.noise_hidden);
        let _ = writeln!(w, "noise_hidden_layers={}", self.noise_hidden_layers);
        let _ = writeln!(w, "emb_width={}", self.emb_width);
        let _ = writeln!(w, "replay_capacity={}", self.replay_capacity);
        let _ = writeln!(w, "ce_weight={:?}", self.ce_weight);
        match &self.dataset {
            DatasetSpec::TwoMoons {
                n_per_domain,
                noise_std,
                rotation_deg,
            } => {
                let _ = writeln!(w, "dataset=two_moons");
                let _ = writeln!(w, "n_per_domain={n_per_domain}");
                let _ = writeln!(w, "noise_std={noise_std:?}");
                let _ = writeln!(w, "rotation_deg={rotation_deg:?}");
            }
            DatasetSpec::GaussianMixture {
                classes,
                n_per_domain,
                mean_shift,
            } => {
                let _ = writeln!(w, "dataset=gaussian_mixture");
                let _ = writeln!(w, "classes={classes}");
                let _ = writeln!(w, "n_per_domain={n_per_domain}");
                let _ = writeln!(w, "mean_shift={mean_shift:?}");
            }
        }
        let _ = writeln!(w, "seed={}", self.seed);
        let _ = writeln!(w, "mls_on={}", self.mls_on);
        let _ = writeln!(w, "initial_training_on={}", self.initial_training_on);
        let _ = writeln!(w, "lpd_on={}", self.lpd_on);
        let _ = writeln!(w, "c_to_d_only={}", self.c_to_d_only);
        let _ = writeln!(w, "d_to_c_only={}", self.d_to_c_only);
        s
    }
}

const KNOWN_KEYS: &[&str] = &[
    "K",
    "r",
    "beta_1",
    "beta_K",
    "k_stride",
    "m_replay",
    "truncate_reverse_grad",
    "lr",
    "momentum",
    "weight_decay",
    "poly_power",
    "batch_size",
    "epochs_source",
    "steps_dad_pretrain",
    "feature_dim",
    "extractor_hidden",
    "classifier_hidden",
    "noise_hidden",
    "noise_hidden_layers",
    "emb_width",
    "replay_capacity",
    "ce_weight",
    "dataset",
    "n_per_domain",
    "noise_std",
    "rotation_deg",
    "classes",
    "mean_shift",
    "seed",
    "mls_on",
    "initial_training_on",
    "lpd_on",
    "c_to_d_only",
    "d_to_c_only",
];

struct Raw {
    entries: BTreeMap<String, (String, usize)>, // key -> (value, line number)
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn parse_with<T>(
        &mut self,
        key: &str,
        default: T,
        f: impl Fn(&str) -> Option<T>,
    ) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => f(&v).ok_or(Error::Config {
                line,
                msg: format!("{key}: cannot parse value {v:?}"),
            }),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, |v| v.parse().ok())
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, |v| v.parse().ok())
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, |v| v.parse().ok())
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }
}

/// Parses a flat key=value document (UTF-8, `#` comments, blank lines
/// allowed). Unknown keys, duplicate keys, malformed values, and invariant
/// violations are errors carrying the offending line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Config {
            line: line_no,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config {
                line: line_no,
                msg: format!("unknown key {key:?}"),
            });
        }
        if entries.insert(key.to_string(), (value.to_string(), line_no)).is_some() {
            return Err(Error::Config {
                line: line_no,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    let mut raw = Raw { entries };
    let d = ExperimentConfig::default();

    let k_steps = raw.usize_or("K", d.k_steps)?;
    let dataset = match raw.parse_with("dataset", "two_moons".to_string(), |v| {
        Some(v.to_string())
    })? {
        name if name == "two_moons" => DatasetSpec::TwoMoons {
            n_per_domain: raw.usize_or("n_per_domain", 2000)?,
            noise_std: raw.f64_or("noise_std", 0.08)?,
            rotation_deg: raw.f64_or("rotation_deg", 50.0)?,
        },
        name if name == "gaussian_mixture" => DatasetSpec::GaussianMixture {
            classes: raw.usize_or("classes", 3)?,
            n_per_domain: raw.usize_or("n_per_domain", 2000)?,
            mean_shift: raw.f64_or("mean_shift", 1.5)?,
        },
        name => {
            return Err(Error::Config {
                line: 0,
                msg: format!("dataset: unknown generator {name:?}"),
            })
        }
    };
    let cfg = ExperimentConfig {
        k_steps,
        r: raw.usize_or("r", d.r)?,
        beta_1: raw.f64_or("beta_1", d.beta_1)?,
        beta_k: raw.f64_or("beta_K", d.beta_k)?,
        k_stride: raw.usize_or("k_stride", default_stride(k_steps))?,
        m_replay: raw.usize_or("m_replay", d.m_replay)?,
        truncate_reverse_grad: raw.parse_with(
            "truncate_reverse_grad",
            default_window(k_steps),
            |v| {
                if v == "full" {
                    Some(GradWindow::Full)
                } else {
                    v.parse().ok().map(GradWindow::Truncate)
                }
            },
        )?,
        lr: raw.f64_or("lr", d.lr)?,
        momentum: raw.f64_or("momentum", d.momentum)?,
        weight_decay: raw.f64_or("weight_decay", d.weight_decay)?,
        poly_power: raw.f64_or("poly_power", d.poly_power)?,
        batch_size: raw.usize_or("batch_size", d.batch_size)?,
        epochs_source: raw.usize_or("epochs_source", d.epochs_source)?,
        steps_dad_pretrain: raw.usize_or("steps_dad_pretrain", d.steps_dad_pretrain)?,
        feature_dim: raw.usize_or("feature_dim", d.feature_dim)?,
        extractor_hidden: raw.usize_or("extractor_hidden", d.extractor_hidden)?,
        classifier_hidden: raw.usize_or("classifier_hidden", d.classifier_hidden)?,
        noise_hidden: raw.usize_or("noise_hidden", d.noise_hidden)?,
        noise_hidden_layers: raw.usize_or("noise_hidden_layers", d.noise_hidden_layers)?,
        emb_width: raw.usize_or("emb_width", d.emb_width)?,
        replay_capacity: raw.usize_or("replay_capacity", d.replay_capacity)?,
        ce_weight: raw.f64_or("ce_weight", d.ce_weight)?,
        dataset,
        seed: raw.u64_or("seed", d.seed)?,
        mls_on: raw.bool_or("mls_on", d.mls_on)?,
        initial_training_on: raw.bool_or("initial_training_on", d.initial_training_on)?,
        lpd_on: raw.bool_or("lpd_on", d.lpd_on)?,
        c_to_d_only: raw.bool_or("c_to_d_only", d.c_to_d_only)?,
        d_to_c_only: raw.bool_or("d_to_c_only", d.d_to_c_only)?,
    };
    if let Some((key, (_, line))) = raw.entries.iter().next() {
        // keys valid globally but not for the chosen dataset generator
        return Err(Error::Config {
            line: *line,
            msg: format!("key {key:?} does not apply to this dataset"),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}
