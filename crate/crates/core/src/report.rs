//! The adaptation report: per-k training records, final accuracies, and
//! the MMD distance profile, with a deterministic text serialization.
//!
//! Wall-clock time is kept in memory for display but deliberately left
//! out of the serialized bytes so identical (config, seed) runs produce
//! byte-identical report files.

use crate::config::ExperimentConfig;
use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

/// One visited distribution index in the MLS loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PerKRecord {
    pub k: usize,
    /// Mean loss over the C→D iterations at this k (NaN-free; 0 when the
    /// phase was skipped by an ablation switch).
    pub c_to_d_loss: f64,
    /// Mean loss over the D→C iterations at this k.
    pub d_to_c_loss: f64,
    /// Frozen-snapshot cross-entropy on the fixed probe batch before the
    /// C→D phase.
    pub probe_ce_before: f64,
    /// Same probe, same noise stream, after the phase.
    pub probe_ce_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationReport {
    pub config_echo: String,
    pub seed: u64,
    pub baseline_target_accuracy: f64,
    pub final_source_accuracy: f64,
    pub final_target_accuracy: f64,
    pub per_k: Vec<PerKRecord>,
    pub mmd_profile: Vec<(usize, f64)>,
    /// Display-only; excluded from `serialize`.
    pub wall_clock_secs: f64,
}

impl AdaptationReport {
    pub fn new(config: &ExperimentConfig) -> AdaptationReport {
        AdaptationReport {
            config_echo: config.serialize(),
            seed: config.seed,
            baseline_target_accuracy: 0.0,
            final_source_accuracy: 0.0,
            final_target_accuracy: 0.0,
            per_k: Vec::new(),
            mmd_profile: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Deterministic text form: a summary section, the config echo, and
    /// two delimited tables.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[report]");
        let _ = writeln!(w, "seed={}", self.seed);
        let _ = writeln!(
            w,
            "baseline_target_accuracy={:?}",
            self.baseline_target_accuracy
        );
        let _ = writeln!(w, "final_source_accuracy={:?}", self.final_source_accuracy);
        let _ = writeln!(w, "final_target_accuracy={:?}", self.final_target_accuracy);
        let _ = writeln!(w, "[config]");
        w.push_str(&self.config_echo);
        let _ = writeln!(w, "[per_k]");
        let _ = writeln!(w, "k,c_to_d_loss,d_to_c_loss,probe_ce_before,probe_ce_after");
        for r in &self.per_k {
            let _ = writeln!(
                w,
                "{},{:?},{:?},{:?},{:?}",
                r.k, r.c_to_d_loss, r.d_to_c_loss, r.probe_ce_before, r.probe_ce_after
            );
        }
        let _ = writeln!(w, "[mmd_profile]");
        let _ = writeln!(w, "k,mmd2");
        for (k, v) in &self.mmd_profile {
            let _ = writeln!(w, "{k},{v:?}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Accuracy sanity for the report invariant: all accuracies in [0,1].
    pub fn check(&self) -> bool {
        [
            self.baseline_target_accuracy,
            self.final_source_accuracy,
            self.final_target_accuracy,
        ]
        .iter()
        .all(|a| (0.0..=1.0).contains(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AdaptationReport {
        let cfg = ExperimentConfig::default();
        let mut r = AdaptationReport::new(&cfg);
        r.baseline_target_accuracy = 0.625;
        r.final_source_accuracy = 0.99;
        r.final_target_accuracy = 0.875;
        r.per_k.push(PerKRecord {
            k: 1,
            c_to_d_loss: 0.5,
            d_to_c_loss: 0.25,
            probe_ce_before: 0.7,
            probe_ce_after: 0.6,
        });
        r.mmd_profile = vec![(0, 0.5), (600, 0.125)];
        r
    }

    #[test]
    fn serialization_is_deterministic_and_ignores_wall_clock() {
        let a = sample();
        let mut b = sample();
        b.wall_clock_secs = 123.456;
        assert_eq!(a.serialize(), b.serialize());
    }

    #[test]
    fn serialization_contains_config_echo_and_tables() {
        let s = sample().serialize();
        assert!(s.contains("[config]"));
        assert!(s.contains("K=600"));
        assert!(s.contains("1,0.5,0.25,0.7,0.6"));
        assert!(s.contains("600,0.125"));
    }

    #[test]
    fn accuracy_bounds_check() {
        let mut r = sample();
        assert!(r.check());
        r.final_target_accuracy = 1.5;
        assert!(!r.check());
    }

    #[test]
    fn write_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.txt");
        let r = sample();
        r.write(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), r.serialize());
    }
}
