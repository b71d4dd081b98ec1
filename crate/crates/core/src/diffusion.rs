//! The variance schedule and the two diffusion-model operators: the fixed
//! forward corruption q and the learned reverse step p_theta, plus the
//! noise-prediction training loss.
//!
//! All operators are pure functions of their inputs; noise samples are
//! passed in explicitly so every step is deterministic and testable. The
//! loss draws internally from an explicit `Rng`.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{axpby, Tensor};

/// Per-step variances beta_k with their derived alpha_k = 1 - beta_k and
/// cumulative products alpha_bar_k, for k = 1..K.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// Linear schedule: beta_k = beta_1 + (k-1) * (beta_K - beta_1) / (K-1).
    pub fn linear(k_steps: usize, beta_1: f64, beta_k: f64) -> Result<VarianceSchedule> {
        if k_steps == 0 {
            return Err(Error::invalid("make_linear_schedule", "K must be >= 1"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_k && beta_k < 1.0) {
            return Err(Error::invalid(
                "make_linear_schedule",
                format!("need 0 < beta_1 <= beta_K < 1, got {} and {}", beta_1, beta_k),
            ));
        }
        let betas = if k_steps == 1 {
            vec![beta_1]
        } else {
            let step = (beta_k - beta_1) / (k_steps - 1) as f64;
            (0..k_steps).map(|i| beta_1 + i as f64 * step).collect()
        };
        VarianceSchedule::from_betas(betas)
    }

    /// Arbitrary beta sequence. Zero entries are allowed here so tests can
    /// build degenerate zero-variance schedules.
    pub fn from_betas(betas: Vec<f64>) -> Result<VarianceSchedule> {
        if betas.is_empty() {
            return Err(Error::invalid("from_betas", "empty beta sequence"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::invalid("from_betas", "betas must lie in [0, 1)"));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(VarianceSchedule {
            beta: betas,
            alpha,
            alpha_bar,
        })
    }

    pub fn k_max(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= 1 && k <= self.k_max() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                k,
                max: self.k_max(),
            })
        }
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }
}

/// A noise predictor evaluated outside any autodiff graph.
pub trait NoiseModel {
    /// Predicts the injected noise for each row of `f_k`; row `i` is
    /// conditioned on timestep `ks[i]`.
    fn predict(&self, f_k: &Tensor, ks: &[usize]) -> Result<Tensor>;
}

/// A noise predictor whose parameters are bound into an autodiff graph, so
/// losses built on top of it are differentiable w.r.t. those parameters.
pub trait GraphNoiseModel {
    fn predict_on_graph(&self, g: &mut Graph, f_k: Var, ks: &[usize]) -> Result<Var>;
}

/// One forward diffusion step: sqrt(1 - beta_k) * f_prev + sqrt(beta_k) * noise.
pub fn diffuse_one_step(
    f_prev: &Tensor,
    k: usize,
    sched: &VarianceSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_step(k)?;
    let b = sched.beta(k);
    axpby((1.0 - b).sqrt(), f_prev, b.sqrt(), noise)
}

/// The k-step forward marginal in closed form:
/// sqrt(alpha_bar_k) * f0 + sqrt(1 - alpha_bar_k) * noise.
pub fn diffuse_k_steps(
    f0: &Tensor,
    k: usize,
    sched: &VarianceSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_step(k)?;
    let ab = sched.alpha_bar(k);
    axpby(ab.sqrt(), f0, (1.0 - ab).sqrt(), noise)
}

/// Predicted mean of the reverse step:
/// (1/sqrt(alpha_k)) * (f_k - beta_k / sqrt(1 - alpha_bar_k) * f_theta(f_k, k)).
pub fn reverse_mean(
    f_k: &Tensor,
    k: usize,
    sched: &VarianceSchedule,
    f_theta: &impl NoiseModel,
) -> Result<Tensor> {
    sched.check_step(k)?;
    let eps = f_theta.predict(f_k, &vec![k; f_k.shape()[0]])?;
    let (a, b, ab) = (sched.alpha(k), sched.beta(k), sched.alpha_bar(k));
    let coef = if b == 0.0 { 0.0 } else { b / (1.0 - ab).sqrt() };
    let out = axpby(1.0 / a.sqrt(), f_k, -coef / a.sqrt(), &eps)?;
    out.check_finite("reverse_mean")?;
    Ok(out)
}

/// One reverse step. Noise is suppressed at the final step k = 1.
pub fn reverse_one_step(
    f_k: &Tensor,
    k: usize,
    sched: &VarianceSchedule,
    f_theta: &impl NoiseModel,
    noise: &Tensor,
) -> Result<Tensor> {
    let mu = reverse_mean(f_k, k, sched, f_theta)?;
    if k == 1 {
        return Ok(mu);
    }
    if !mu.same_shape(noise) {
        return Err(Error::ShapeMismatch {
            op: "reverse_one_step",
            lhs: mu.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    axpby(1.0, &mu, sched.beta(k).sqrt(), noise)
}

/// Inputs for one draw of the noise-prediction loss: per-row timesteps,
/// the injected noise, and the resulting diffused batch.
pub struct ReverseLossDraw {
    pub ks: Vec<usize>,
    pub noise: Tensor,
    pub f_k: Tensor,
}

/// Samples k ~ U[1, K] and eps ~ N(0, I) per row and forms f_k via the
/// closed-form marginal.
pub fn sample_reverse_loss_draw(
    feats: &Tensor,
    sched: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<ReverseLossDraw> {
    let (batch, dim) = (feats.shape()[0], feats.shape()[1]);
    if batch == 0 {
        return Err(Error::invalid("reverse_loss", "empty batch"));
    }
    let ks: Vec<usize> = (0..batch)
        .map(|_| rng.range_inclusive(1, sched.k_max()))
        .collect();
    let noise = rng.gaussian(vec![batch, dim])?;
    let mut data = Vec::with_capacity(batch * dim);
    for i in 0..batch {
        let ab = sched.alpha_bar(ks[i]);
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..dim {
            data.push(c0 * feats.row(i)[j] + c1 * noise.row(i)[j]);
        }
    }
    Ok(ReverseLossDraw {
        ks,
        noise,
        f_k: Tensor::new(vec![batch, dim], data)?,
    })
}

/// Noise-prediction training loss on an autodiff graph:
/// mean over all entries of (eps - f_theta(f_k, k))^2, which equals the
/// per-sample squared error normalized by feature width, averaged over the
/// batch. Differentiable w.r.t. whatever parameters `f_theta` has bound.
pub fn reverse_loss_on_graph(
    g: &mut Graph,
    f_theta: &impl GraphNoiseModel,
    feats: &Tensor,
    sched: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let draw = sample_reverse_loss_draw(feats, sched, rng)?;
    let f_k = g.constant(&draw.f_k)?;
    let eps = g.constant(&draw.noise)?;
    let pred = f_theta.predict_on_graph(g, f_k, &draw.ks)?;
    let diff = g.sub(eps, pred)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

/// Eval-mode value of the same loss, for traces and tests.
pub fn reverse_loss_value(
    f_theta: &impl NoiseModel,
    feats: &Tensor,
    sched: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = sample_reverse_loss_draw(feats, sched, rng)?;
    let pred = f_theta.predict(&draw.f_k, &draw.ks)?;
    let diff = axpby(1.0, &draw.noise, -1.0, &pred)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Predictor returning all zeros.
    pub struct ZeroPredictor;

    impl NoiseModel for ZeroPredictor {
        fn predict(&self, f_k: &Tensor, _ks: &[usize]) -> Result<Tensor> {
            Ok(Tensor::zeros(f_k.shape().to_vec()))
        }
    }

    /// Predictor returning a fixed tensor regardless of input.
    pub struct FixedPredictor(pub Tensor);

    impl NoiseModel for FixedPredictor {
        fn predict(&self, _f_k: &Tensor, _ks: &[usize]) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn vec_tensor(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, v.len()], v).unwrap()
    }

    #[test]
    fn linear_schedule_reference_endpoints() {
        let s = VarianceSchedule::linear(600, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(600) - 0.02).abs() < 1e-15);
        // schedule identities hold exactly
        for k in 1..=600 {
            assert_eq!(s.alpha(k) + s.beta(k), 1.0);
            let prev = if k == 1 { 1.0 } else { s.alpha_bar(k - 1) };
            assert_eq!(s.alpha_bar(k), prev * s.alpha(k));
        }
        // betas non-decreasing, alpha_bar strictly decreasing in (0, 1]
        for k in 2..=600 {
            assert!(s.beta(k) >= s.beta(k - 1));
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        assert!(s.alpha_bar(600) > 0.0 && s.alpha_bar(1) <= 1.0);
        // with these endpoints, F_K is near-Gaussian
        assert!(s.alpha_bar(600) < 0.05);
    }

    #[test]
    fn single_step_schedule() {
        let s = VarianceSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.beta(1), 0.3);
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_beta_alpha_bar_product() {
        let s = VarianceSchedule::from_betas(vec![0.1, 0.1, 0.1]).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_endpoints() {
        assert!(VarianceSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_one_step_degenerate_cases() {
        let s = VarianceSchedule::from_betas(vec![0.0]).unwrap();
        let f = vec_tensor(vec![1.0, -2.0, 3.0]);
        let noise = vec_tensor(vec![5.0, 5.0, 5.0]);
        let out = diffuse_one_step(&f, 1, &s, &noise).unwrap();
        assert_eq!(out.data(), f.data());

        let s = VarianceSchedule::from_betas(vec![0.19]).unwrap();
        let zero = Tensor::zeros(vec![1, 3]);
        let out = diffuse_one_step(&f, 1, &s, &zero).unwrap();
        let c = (1.0f64 - 0.19).sqrt();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert!((o - c * x).abs() < 1e-15);
        }
    }

    #[test]
    fn diffuse_one_step_moments() {
        // Monte-Carlo moment oracle over 1e5 draws.
        let beta = 0.2;
        let s = VarianceSchedule::from_betas(vec![beta]).unwrap();
        let f = vec_tensor(vec![2.0]);
        let mut rng = Rng::new(31);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let noise = rng.gaussian(vec![1, 1]).unwrap();
            let out = diffuse_one_step(&f, 1, &s, &noise).unwrap();
            sum += out.data()[0];
            sumsq += out.data()[0] * out.data()[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want_mean = (1.0 - beta).sqrt() * 2.0;
        // 3-sigma bands for the MC estimates
        let mean_tol = 3.0 * (beta / n as f64).sqrt();
        let var_tol = 3.0 * beta * (2.0 / n as f64).sqrt();
        assert!((mean - want_mean).abs() < mean_tol, "mean {mean}");
        assert!((var - beta).abs() < var_tol, "var {var}");
    }

    #[test]
    fn diffuse_k_steps_mean_component() {
        let s = VarianceSchedule::from_betas(vec![0.1, 0.1, 0.1]).unwrap();
        let f = vec_tensor(vec![1.0, 2.0]);
        let zero = Tensor::zeros(vec![1, 2]);
        let out = diffuse_k_steps(&f, 3, &s, &zero).unwrap();
        let c = 0.729f64.sqrt();
        assert!((out.data()[0] - c).abs() < 1e-15);
        assert!((out.data()[1] - 2.0 * c).abs() < 1e-15);

        let eps = vec_tensor(vec![1.0, -1.0]);
        let out = diffuse_k_steps(&f, 3, &s, &eps).unwrap();
        let c1 = 0.271f64.sqrt();
        assert!((out.data()[0] - (c + c1)).abs() < 1e-12);
        assert!((out.data()[1] - (2.0 * c - c1)).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_iterated_steps_in_distribution() {
        // Monte-Carlo equivalence oracle: both routes must have
        // mean sqrt(abar_k) * f0 and variance 1 - abar_k.
        let s = VarianceSchedule::linear(10, 0.01, 0.2).unwrap();
        let f0 = vec_tensor(vec![1.5]);
        let mut rng = Rng::new(77);
        let trials = 10_000;
        let k = 7;
        let mut stats = [[0.0f64; 2]; 2];
        for _ in 0..trials {
            // closed form
            let noise = rng.gaussian(vec![1, 1]).unwrap();
            let a = diffuse_k_steps(&f0, k, &s, &noise).unwrap().data()[0];
            // iterated
            let mut cur = f0.clone();
            for step in 1..=k {
                let noise = rng.gaussian(vec![1, 1]).unwrap();
                cur = diffuse_one_step(&cur, step, &s, &noise).unwrap();
            }
            let b = cur.data()[0];
            stats[0][0] += a;
            stats[0][1] += a * a;
            stats[1][0] += b;
            stats[1][1] += b * b;
        }
        let ab = s.alpha_bar(k);
        let want_mean = ab.sqrt() * 1.5;
        let want_var = 1.0 - ab;
        let mean_tol = 3.0 * (want_var / trials as f64).sqrt();
        let var_tol = 3.0 * want_var * (2.0 / trials as f64).sqrt();
        for row in &stats {
            let mean = row[0] / trials as f64;
            let var = row[1] / trials as f64 - mean * mean;
            assert!((mean - want_mean).abs() < mean_tol, "mean {mean}");
            assert!((var - want_var).abs() < var_tol, "var {var}");
        }
    }

    #[test]
    fn reverse_mean_zero_predictor() {
        let s = VarianceSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let f = vec_tensor(vec![3.0, -1.0]);
        let mu = reverse_mean(&f, 2, &s, &ZeroPredictor).unwrap();
        let c = 1.0 / 0.8f64.sqrt();
        assert!((mu.data()[0] - 3.0 * c).abs() < 1e-15);
        assert!((mu.data()[1] + c).abs() < 1e-15);
    }

    #[test]
    fn reverse_mean_identity_at_zero_beta() {
        let s = VarianceSchedule::from_betas(vec![0.0]).unwrap();
        let f = vec_tensor(vec![3.0, -1.0]);
        let mu = reverse_mean(&f, 1, &s, &ZeroPredictor).unwrap();
        assert_eq!(mu.data(), f.data());
    }

    #[test]
    fn reverse_mean_matches_independent_formula() {
        // Independent re-implementation oracle on a constructed f_k with a
        // stub predictor returning exactly the construction noise.
        let s = VarianceSchedule::linear(5, 0.05, 0.3).unwrap();
        let k = 4;
        let f0 = vec_tensor(vec![0.7, -0.2, 1.1]);
        let mut rng = Rng::new(5);
        let eps = rng.gaussian(vec![1, 3]).unwrap();
        let f_k = diffuse_k_steps(&f0, k, &s, &eps).unwrap();
        let mu = reverse_mean(&f_k, k, &s, &FixedPredictor(eps.clone())).unwrap();
        // independent route, scalar by scalar
        let (a, b, ab) = (s.alpha(k), s.beta(k), s.alpha_bar(k));
        for j in 0..3 {
            let want = (f_k.data()[j] - b / (1.0 - ab).sqrt() * eps.data()[j]) / a.sqrt();
            assert!((mu.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_one_step_conventions() {
        let s = VarianceSchedule::linear(3, 0.1, 0.3).unwrap();
        let f = vec_tensor(vec![1.0, 2.0]);
        let zero = Tensor::zeros(vec![1, 2]);
        let mu = reverse_mean(&f, 2, &s, &ZeroPredictor).unwrap();
        let out = reverse_one_step(&f, 2, &s, &ZeroPredictor, &zero).unwrap();
        assert_eq!(out.data(), mu.data());
        // at k = 1 the noise argument is ignored
        let big = vec_tensor(vec![100.0, 100.0]);
        let out = reverse_one_step(&f, 1, &s, &ZeroPredictor, &big).unwrap();
        let mu1 = reverse_mean(&f, 1, &s, &ZeroPredictor).unwrap();
        assert_eq!(out.data(), mu1.data());
    }

    #[test]
    fn reverse_one_step_variance() {
        let s = VarianceSchedule::linear(3, 0.1, 0.3).unwrap();
        let f = vec_tensor(vec![1.0]);
        let mut rng = Rng::new(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let noise = rng.gaussian(vec![1, 1]).unwrap();
            let out = reverse_one_step(&f, 2, &s, &ZeroPredictor, &noise).unwrap();
            sum += out.data()[0];
            sumsq += out.data()[0] * out.data()[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let beta = s.beta(2);
        let var_tol = 3.0 * beta * (2.0 / n as f64).sqrt();
        assert!((var - beta).abs() < var_tol, "var {var}");
    }

    #[test]
    fn reverse_loss_perfect_predictor_is_zero() {
        // A cheating predictor that replays the construction noise: loss
        // must vanish. We reproduce the draw with the same rng stream.
        struct Replay {
            sched: VarianceSchedule,
            feats: Tensor,
            seed: u64,
        }
        impl NoiseModel for Replay {
            fn predict(&self, _f_k: &Tensor, _ks: &[usize]) -> Result<Tensor> {
                let mut rng = Rng::new(self.seed);
                let draw = sample_reverse_loss_draw(&self.feats, &self.sched, &mut rng)?;
                Ok(draw.noise)
            }
        }
        let sched = VarianceSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = Rng::new(123);
        let feats = rng.gaussian(vec![6, 4]).unwrap();
        let replay = Replay {
            sched: sched.clone(),
            feats: feats.clone(),
            seed: 55,
        };
        let mut loss_rng = Rng::new(55);
        let loss = reverse_loss_value(&replay, &feats, &sched, &mut loss_rng).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn reverse_loss_zero_predictor_near_one() {
        // E ||eps||^2 / d = 1; chi-square expectation oracle over 1e4 rows.
        let sched = VarianceSchedule::linear(10, 0.01, 0.2).unwrap();
        let mut rng = Rng::new(321);
        let feats = rng.gaussian(vec![10_000, 4]).unwrap();
        let mut loss_rng = Rng::new(9);
        let loss = reverse_loss_value(&ZeroPredictor, &feats, &sched, &mut loss_rng).unwrap();
        // Var of a single squared normal is 2; mean over 4e4 entries.
        let tol = 3.0 * (2.0 / 40_000.0f64).sqrt();
        assert!((loss - 1.0).abs() < tol, "loss {loss}");
    }

    #[test]
    fn reverse_loss_rejects_empty_batch() {
        let sched = VarianceSchedule::linear(5, 0.01, 0.2).unwrap();
        let feats = Tensor::zeros(vec![0, 4]);
        let mut rng = Rng::new(1);
        assert!(sample_reverse_loss_draw(&feats, &sched, &mut rng).is_err());
    }

    #[test]
    fn step_bounds_enforced() {
        let s = VarianceSchedule::linear(5, 0.01, 0.2).unwrap();
        let f = vec_tensor(vec![1.0]);
        let z = Tensor::zeros(vec![1, 1]);
        assert!(diffuse_one_step(&f, 0, &s, &z).is_err());
        assert!(diffuse_one_step(&f, 6, &s, &z).is_err());
        assert!(reverse_mean(&f, 6, &s, &ZeroPredictor).is_err());
    }
}
