//! The three learnable networks: the frozen feature extractor, the
//! classification model, and the noise predictor inside the reverse
//! operator, plus feature batches with domain provenance and the
//! checkpoint container.

use crate::diffusion::{GraphNoiseModel, NoiseModel};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{matmul, Tensor};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Tensor, // in x out
    b: Tensor, // out
}

/// Fully connected stack with leaky-rectifier activations between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    slope: f64,
}

impl Mlp {
    /// Uniform fan-in initialization: weights U(-1/sqrt(fan_in), +),
    /// biases zero.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Mlp> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("Mlp::new", format!("bad dims {:?}", dims)));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| (rng.uniform() * 2.0 - 1.0) * limit)
                .collect();
            layers.push(Linear {
                w: Tensor::new(vec![fan_in, fan_out], data)?.tracked(),
                b: Tensor::zeros(vec![fan_out]).tracked(),
            });
        }
        Ok(Mlp {
            layers,
            slope: LEAKY_SLOPE,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }

    /// Parameters in a fixed order: w then b per layer.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{}.w", i), &l.w));
            out.push((format!("{}.b", i), &l.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Binds parameters into a graph as leaves, in `params()` order.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> Result<Vec<Var>> {
        let mut vars = Vec::new();
        for l in &self.layers {
            vars.push(g.leaf(&l.w, tracked)?);
            vars.push(g.leaf(&l.b, tracked)?);
        }
        Ok(vars)
    }

    pub fn forward_with_vars(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let mm = g.matmul(cur, vars[2 * i])?;
            cur = g.add_row(mm, vars[2 * i + 1])?;
            if i != last {
                cur = g.leaky_relu(cur, self.slope)?;
            }
        }
        Ok(cur)
    }

    /// Eval-mode forward, no graph. Must agree with the graph path; a unit
    /// test pins the two routes together.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = matmul(&cur, &l.w)?;
            let b = l.b.data();
            let cols = out.cols();
            for row in out.data_mut().chunks_mut(cols) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            if i != last {
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
            }
            cur = out;
        }
        cur.check_finite("Mlp::forward")?;
        Ok(cur)
    }
}

/// Domain provenance of a feature batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
    Transitional(usize),
}

impl DomainTag {
    pub fn carries_labels(&self) -> bool {
        !matches!(self, DomainTag::Target)
    }

    pub fn name(&self) -> String {
        match self {
            DomainTag::Source => "source".into(),
            DomainTag::Target => "target".into(),
            DomainTag::Transitional(k) => format!("transitional({k})"),
        }
    }
}

/// A batch of feature vectors tagged with provenance. Labels are present
/// exactly when the provenance admits them: source and transitional
/// batches inherit the source labels, target batches carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domain: DomainTag,
}

impl FeatureBatch {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, domain: DomainTag) -> Result<FeatureBatch> {
        if !features.is_matrix() {
            return Err(Error::invalid("FeatureBatch", "features must be 2-D"));
        }
        match (&labels, domain.carries_labels()) {
            (Some(l), true) => {
                if l.len() != features.rows() {
                    return Err(Error::invalid(
                        "FeatureBatch",
                        format!("{} labels for {} rows", l.len(), features.rows()),
                    ));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::invalid("FeatureBatch", "target batches carry no labels"))
            }
            (None, true) => {
                return Err(Error::invalid(
                    "FeatureBatch",
                    "source/transitional batches require labels",
                ))
            }
        }
        Ok(FeatureBatch {
            features,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The shallow frozen front of the network (a stand-in for the conv block
/// a full-scale setup would freeze; an MLP here) mapping inputs to
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub mlp: Mlp,
    pub frozen: bool,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, hidden: usize, feature_dim: usize, rng: &mut Rng) -> Result<FeatureExtractor> {
        Ok(FeatureExtractor {
            mlp: Mlp::new(&[input_dim, hidden, hidden, feature_dim], rng)?,
            frozen: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn extract(
        &self,
        x: &Tensor,
        domain: DomainTag,
        labels: Option<Vec<usize>>,
    ) -> Result<FeatureBatch> {
        if x.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "feature_extract",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mlp.input_dim()],
            });
        }
        FeatureBatch::new(self.mlp.forward(x)?, labels, domain)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// The deep part of the network mapping features to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub mlp: Mlp,
    pub frozen: bool,
}

impl Classifier {
    pub fn new(feature_dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<Classifier> {
        if classes < 2 {
            return Err(Error::invalid("Classifier::new", "need >= 2 classes"));
        }
        Ok(Classifier {
            mlp: Mlp::new(&[feature_dim, hidden, hidden, classes], rng)?,
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Raw logits; softmax is applied only inside the loss.
    pub fn classify(&self, f: &FeatureBatch) -> Result<Tensor> {
        if f.features.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: f.features.shape().to_vec(),
                rhs: vec![self.mlp.input_dim()],
            });
        }
        self.mlp.forward(&f.features)
    }

    /// Deep, independent frozen copy. Training the original never touches
    /// the snapshot; a snapshot of a snapshot is the same snapshot.
    pub fn snapshot(&self) -> Classifier {
        let mut c = self.clone();
        c.frozen = true;
        c
    }
}

/// Sinusoidal timestep embedding of width `width` (even). Deterministic
/// and injective over k in [1, K] for width >= 2 * ceil(log2 K).
pub fn timestep_embedding(k: usize, width: usize) -> Vec<f64> {
    debug_assert!(width >= 2 && width % 2 == 0);
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = k as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// The learnable network inside the reverse operator: predicts the
/// injected noise from the diffused features and a timestep embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    pub mlp: Mlp,
    emb_width: usize,
    feature_dim: usize,
}

impl NoisePredictor {
    pub fn new(
        feature_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        emb_width: usize,
        rng: &mut Rng,
    ) -> Result<NoisePredictor> {
        if emb_width < 2 || emb_width % 2 != 0 {
            return Err(Error::invalid(
                "NoisePredictor::new",
                "embedding width must be even and >= 2",
            ));
        }
        let mut dims = vec![feature_dim + emb_width];
        dims.extend(std::iter::repeat(hidden).take(hidden_layers));
        dims.push(feature_dim);
        Ok(NoisePredictor {
            mlp: Mlp::new(&dims, rng)?,
            emb_width,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn emb_width(&self) -> usize {
        self.emb_width
    }

    fn embedding_matrix(&self, ks: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ks.len() * self.emb_width);
        for &k in ks {
            data.extend(timestep_embedding(k, self.emb_width));
        }
        Tensor::new(vec![ks.len(), self.emb_width], data)
    }

    fn check_input(&self, f_k: &Tensor, ks: &[usize]) -> Result<()> {
        if !f_k.is_matrix() || f_k.cols() != self.feature_dim || f_k.rows() != ks.len() {
            return Err(Error::ShapeMismatch {
                op: "noise_predict",
                lhs: f_k.shape().to_vec(),
                rhs: vec![ks.len(), self.feature_dim],
            });
        }
        Ok(())
    }

    /// Binds this predictor's parameters into a graph once; the bound
    /// handle can then be called any number of times within that graph.
    pub fn bind<'a>(&'a self, g: &mut Graph, tracked: bool) -> Result<BoundPredictor<'a>> {
        Ok(BoundPredictor {
            np: self,
            vars: self.mlp.bind(g, tracked)?,
        })
    }

    /// Wraps already-bound leaves (in `params()` order) as a predictor
    /// handle; used when the caller manages the graph leaves itself.
    pub fn with_vars(&self, vars: Vec<Var>) -> BoundPredictor<'_> {
        BoundPredictor { np: self, vars }
    }
}

impl NoiseModel for NoisePredictor {
    fn predict(&self, f_k: &Tensor, ks: &[usize]) -> Result<Tensor> {
        self.check_input(f_k, ks)?;
        let emb = self.embedding_matrix(ks)?;
        let mut data = Vec::with_capacity(f_k.rows() * (self.feature_dim + self.emb_width));
        for i in 0..f_k.rows() {
            data.extend_from_slice(f_k.row(i));
            data.extend_from_slice(emb.row(i));
        }
        let joined = Tensor::new(vec![f_k.rows(), self.feature_dim + self.emb_width], data)?;
        self.mlp.forward(&joined)
    }
}

/// A noise predictor bound into a specific graph.
pub struct BoundPredictor<'a> {
    np: &'a NoisePredictor,
    pub vars: Vec<Var>,
}

impl GraphNoiseModel for BoundPredictor<'_> {
    fn predict_on_graph(&self, g: &mut Graph, f_k: Var, ks: &[usize]) -> Result<Var> {
        let emb = self.np.embedding_matrix(ks)?;
        let embv = g.constant(&emb)?;
        let joined = g.concat_cols(f_k, embv)?;
        self.np.mlp.forward_with_vars(g, &self.vars, joined)
    }
}

/// SHA-256 over a named parameter list; the freeze contracts are asserted
/// by comparing these digests before and after training calls.
pub fn param_checksum(params: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const CKPT_MAGIC: &[u8; 8] = b"DADCKPT\x01";
const CKPT_VERSION: u32 = 1;

/// Flat, versioned binary container of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn insert_all(&mut self, prefix: &str, params: &[(String, &Tensor)]) {
        for (name, t) in params {
            // store plain values: tracking state is not part of a checkpoint
            let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("parameters are finite");
            self.entries.push((format!("{prefix}.{name}"), plain));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copies stored tensors into the model's parameters, by prefix and
    /// `params()` order names.
    pub fn load_into(&self, prefix: &str, mlp: &mut Mlp) -> Result<()> {
        let names: Vec<String> = mlp
            .params()
            .iter()
            .map(|(n, _)| format!("{prefix}.{n}"))
            .collect();
        for (name, param) in names.iter().zip(mlp.params_mut()) {
            let stored = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if stored.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    stored.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {ver}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("invalid name".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;

    #[test]
    fn extractor_is_deterministic_and_shaped() {
        let mut rng = Rng::new(0);
        let fe = FeatureExtractor::new(2, 16, 4, &mut rng).unwrap();
        let x = Rng::new(1).gaussian(vec![5, 2]).unwrap();
        let a = fe.extract(&x, DomainTag::Target, None).unwrap();
        let b = fe.extract(&x, DomainTag::Target, None).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.features.shape(), &[5, 4]);
        let one = Rng::new(2).gaussian(vec![1, 2]).unwrap();
        let c = fe.extract(&one, DomainTag::Target, None).unwrap();
        assert_eq!(c.features.shape(), &[1, 4]);
    }

    #[test]
    fn extractor_rejects_width_mismatch() {
        let mut rng = Rng::new(0);
        let fe = FeatureExtractor::new(2, 8, 4, &mut rng).unwrap();
        let x = Rng::new(1).gaussian(vec![3, 5]).unwrap();
        assert!(fe.extract(&x, DomainTag::Target, None).is_err());
    }

    #[test]
    fn classifier_zero_weights_give_zero_logits() {
        let mut rng = Rng::new(0);
        let mut c = Classifier::new(4, 8, 3, &mut rng).unwrap();
        for p in c.mlp.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let f = FeatureBatch::new(
            Rng::new(2).gaussian(vec![3, 4]).unwrap(),
            None,
            DomainTag::Target,
        )
        .unwrap();
        let logits = c.classify(&f).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_batch_equivariance() {
        let mut rng = Rng::new(3);
        let c = Classifier::new(4, 8, 3, &mut rng).unwrap();
        let x = Rng::new(4).gaussian(vec![4, 4]).unwrap();
        let f = FeatureBatch::new(x.clone(), None, DomainTag::Target).unwrap();
        let logits = c.classify(&f).unwrap();
        let perm = [2usize, 0, 3, 1];
        let fp = FeatureBatch::new(x.gather_rows(&perm), None, DomainTag::Target).unwrap();
        let lp = c.classify(&fp).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(lp.row(i), logits.row(src));
        }
    }

    #[test]
    fn mlp_graph_and_eval_paths_agree() {
        let mut rng = Rng::new(5);
        let mlp = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let x = Rng::new(6).gaussian(vec![4, 3]).unwrap();
        let eval = mlp.forward(&x).unwrap();
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, false).unwrap();
        let xv = g.constant(&x).unwrap();
        let out = mlp.forward_with_vars(&mut g, &vars, xv).unwrap();
        let gv = g.value(out);
        for (a, b) in eval.data().iter().zip(gv.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn extractor_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let fe = FeatureExtractor::new(2, 6, 3, &mut rng).unwrap();
        let x = Rng::new(8).gaussian(vec![4, 2]).unwrap();
        let params: Vec<Tensor> = fe.mlp.params().iter().map(|(_, t)| (*t).clone()).collect();
        let mlp = fe.mlp.clone();
        let err = grad_check(
            |g, vars| {
                let xv = g.constant(&x)?;
                let out = mlp.forward_with_vars(g, vars, xv)?;
                g.sum_all(out)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let c = Classifier::new(3, 6, 3, &mut rng).unwrap();
        let x = Rng::new(10).gaussian(vec![5, 3]).unwrap();
        let labels = vec![0usize, 1, 2, 0, 1];
        let params: Vec<Tensor> = c.mlp.params().iter().map(|(_, t)| (*t).clone()).collect();
        let mlp = c.mlp.clone();
        let err = grad_check(
            |g, vars| {
                let xv = g.constant(&x)?;
                let logits = mlp.forward_with_vars(g, vars, xv)?;
                g.softmax_cross_entropy(logits, &labels)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn timestep_embedding_injective_and_deterministic() {
        let width = 32;
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for k in 1..=600 {
            let e = timestep_embedding(k, width);
            assert_eq!(e, timestep_embedding(k, width));
            let bits: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            assert!(!seen.contains(&bits), "collision at k={k}");
            seen.push(bits);
        }
    }

    #[test]
    fn noise_predictor_shape_and_timestep_sensitivity() {
        let mut rng = Rng::new(0);
        let np = NoisePredictor::new(4, 16, 2, 8, &mut rng).unwrap();
        let f = Rng::new(1).gaussian(vec![3, 4]).unwrap();
        let out1 = np.predict(&f, &[1, 1, 1]).unwrap();
        assert_eq!(out1.shape(), f.shape());
        let out_k = np.predict(&f, &[600, 600, 600]).unwrap();
        assert_ne!(out1.data(), out_k.data());
    }

    #[test]
    fn noise_predictor_gradient_through_embedding_path() {
        let mut rng = Rng::new(13);
        let np = NoisePredictor::new(3, 8, 2, 4, &mut rng).unwrap();
        let f = Rng::new(14).gaussian(vec![4, 3]).unwrap();
        let ks = [1usize, 3, 5, 2];
        let params: Vec<Tensor> = np.mlp.params().iter().map(|(_, t)| (*t).clone()).collect();
        let err = grad_check(
            |g, vars| {
                let bound = BoundPredictor {
                    np: &np,
                    vars: vars.to_vec(),
                };
                let fv = g.constant(&f)?;
                let out = bound.predict_on_graph(g, fv, &ks)?;
                let sq = g.square(out)?;
                g.mean_all(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn snapshot_isolation_and_idempotence() {
        let mut rng = Rng::new(20);
        let mut c = Classifier::new(4, 8, 2, &mut rng).unwrap();
        let snap = c.snapshot();
        let before = param_checksum(&snap.mlp.params());
        // classify-through equality at snapshot time
        let f = FeatureBatch::new(
            Rng::new(21).gaussian(vec![3, 4]).unwrap(),
            None,
            DomainTag::Target,
        )
        .unwrap();
        assert_eq!(
            snap.classify(&f).unwrap().data(),
            c.classify(&f).unwrap().data()
        );
        // mutate the original heavily
        for p in c.mlp.params_mut() {
            for v in p.data_mut() {
                *v += 1.0;
            }
        }
        assert_eq!(param_checksum(&snap.mlp.params()), before);
        assert!(snap.frozen);
        let snap2 = snap.snapshot();
        assert_eq!(param_checksum(&snap2.mlp.params()), before);
        assert!(snap2.frozen);
    }

    #[test]
    fn feature_batch_label_rules() {
        let x = Tensor::zeros(vec![2, 3]);
        assert!(FeatureBatch::new(x.clone(), Some(vec![0, 1]), DomainTag::Source).is_ok());
        assert!(FeatureBatch::new(x.clone(), None, DomainTag::Source).is_err());
        assert!(FeatureBatch::new(x.clone(), Some(vec![0, 1]), DomainTag::Target).is_err());
        assert!(FeatureBatch::new(x.clone(), None, DomainTag::Target).is_ok());
        assert!(FeatureBatch::new(x.clone(), Some(vec![0]), DomainTag::Transitional(3)).is_err());
        assert!(FeatureBatch::new(x, Some(vec![0, 1]), DomainTag::Transitional(3)).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(30);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        let mut ck = Checkpoint::default();
        ck.insert_all("m", &mlp.params());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = Mlp::new(&[3, 5, 2], &mut Rng::new(31)).unwrap();
        back.load_into("m", &mut fresh).unwrap();
        assert_eq!(
            param_checksum(&fresh.params()),
            param_checksum(&mlp.params())
        );
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
