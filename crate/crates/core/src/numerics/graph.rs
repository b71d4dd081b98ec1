//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is a single-use tape: leaves are inserted per training step,
//! the forward pass records one node per op, and `backward` walks the tape
//! in reverse. Gradients of tracked leaves are then written back into the
//! owning parameter tensors.
//!
//! Every op validates shapes and checks its output for non-finite values;
//! a NaN/Inf aborts with an error instead of propagating.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_data, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    ConcatCols(usize, usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    MeanAll(usize),
    SumAll(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: &'static str, node: Node) -> Result<Var> {
        if !node.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph holds finite data")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Inserts a tensor as a leaf. Tracked leaves receive gradients.
    pub fn leaf(&mut self, t: &Tensor, tracked: bool) -> Result<Var> {
        self.push(
            "leaf",
            Node {
                op: Op::Leaf,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
                requires_grad: tracked,
            },
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(
            opname,
            Node {
                op,
                shape: self.shape(a).to_vec(),
                data,
                requires_grad: rg,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_data(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(
            "matmul",
            Node {
                op: Op::MatMul(a.0, b.0),
                shape: vec![m, n],
                data,
                requires_grad: rg,
            },
        )
    }

    /// Matrix plus broadcast row vector (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || sr != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sx,
                rhs: sr,
            });
        }
        let rv = self.nodes[row.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .chunks(n)
            .flat_map(|r| r.iter().zip(&rv).map(|(a, b)| a + b))
            .collect();
        let rg = self.nodes[x.0].requires_grad || self.nodes[row.0].requires_grad;
        self.push(
            "add_row",
            Node {
                op: Op::AddRow(x.0, row.0),
                shape: sx,
                data,
                requires_grad: rg,
            },
        )
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(
            "concat_cols",
            Node {
                op: Op::ConcatCols(a.0, b.0),
                shape: vec![rows, ca + cb],
                data,
                requires_grad: rg,
            },
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "scale",
            Node {
                op: Op::Scale(x.0, c),
                shape: self.shape(x).to_vec(),
                data,
                requires_grad: rg,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "leaky_relu",
            Node {
                op: Op::LeakyRelu(x.0, slope),
                shape: self.shape(x).to_vec(),
                data,
                requires_grad: rg,
            },
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let d = &self.nodes[x.0].data;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "mean_all",
            Node {
                op: Op::MeanAll(x.0),
                shape: vec![1],
                data: vec![mean],
                requires_grad: rg,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].data.iter().sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            "sum_all",
            Node {
                op: Op::SumAll(x.0),
                shape: vec![1],
                data: vec![s],
                requires_grad: rg,
            },
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits must be 2-D, got {:?}", s),
            ));
        }
        let (batch, c) = (s[0], s[1]);
        if c < 2 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("need at least 2 classes, got {}", c),
            ));
        }
        if labels.len() != batch {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("{} labels for batch of {}", labels.len(), batch),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {} out of range [0, {})", bad, c),
            ));
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; batch * c];
        let mut loss = 0.0;
        for i in 0..batch {
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += -(probs[i * c + labels[i]].max(f64::MIN_POSITIVE)).ln();
        }
        loss /= batch as f64;
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            "softmax_cross_entropy",
            Node {
                op: Op::SoftmaxCrossEntropy {
                    logits: logits.0,
                    labels: labels.to_vec(),
                    probs,
                },
                shape: vec![1],
                data: vec![loss],
                requires_grad: rg,
            },
        )
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients
    /// internally; read them out with `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid("backward", "loss must be scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        contrib: impl Iterator<Item = f64>,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
        for (a, c) in slot.iter_mut().zip(contrib) {
            *a += c;
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().cloned());
                self.accumulate(grads, *b, g.iter().cloned());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().cloned());
                self.accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accumulate(grads, *a, g.iter().zip(db).map(|(gv, y)| gv * y));
                self.accumulate(grads, *b, g.iter().zip(da).map(|(gv, x)| gv * x));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                if self.nodes[*a].requires_grad {
                    // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &db[kk * n..(kk + 1) * n];
                            ga[i * k + kk] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *a, ga.into_iter());
                }
                if self.nodes[*b].requires_grad {
                    // dB[kk,j] = sum_i A[i,kk] * g[i,j]
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = da[i * k + kk];
                            let brow = &mut gb[kk * n..(kk + 1) * n];
                            for (o, gv) in brow.iter_mut().zip(grow) {
                                *o += aik * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb.into_iter());
                }
            }
            Op::AddRow(x, row) => {
                let n = self.nodes[*row].data.len();
                self.accumulate(grads, *x, g.iter().cloned());
                if self.nodes[*row].requires_grad {
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr.into_iter());
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[*a].shape[1], self.nodes[*b].shape[1]);
                let rows = self.nodes[*a].shape[0];
                if self.nodes[*a].requires_grad {
                    let mut ga = Vec::with_capacity(rows * ca);
                    for i in 0..rows {
                        ga.extend_from_slice(&g[i * (ca + cb)..i * (ca + cb) + ca]);
                    }
                    self.accumulate(grads, *a, ga.into_iter());
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = Vec::with_capacity(rows * cb);
                    for i in 0..rows {
                        gb.extend_from_slice(&g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                    }
                    self.accumulate(grads, *b, gb.into_iter());
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c));
            }
            Op::LeakyRelu(x, slope) => {
                let dx = &self.nodes[*x].data;
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(dx)
                        .map(|(gv, &v)| if v >= 0.0 { *gv } else { gv * slope }),
                );
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].data.len() as f64;
                let gv = g[0] / n;
                self.accumulate(
                    grads,
                    *x,
                    std::iter::repeat(gv).take(self.nodes[*x].data.len()),
                );
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.accumulate(
                    grads,
                    *x,
                    std::iter::repeat(gv).take(self.nodes[*x].data.len()),
                );
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[*logits].shape[1];
                let batch = labels.len();
                let gv = g[0] / batch as f64;
                let contrib = (0..batch * c).map(|idx| {
                    let (i, j) = (idx / c, idx % c);
                    let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                    gv * (probs[idx] - onehot)
                });
                self.accumulate(grads, *logits, contrib);
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by a backward pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Writes the gradient of each bound leaf into its parameter tensor's
    /// accumulator. Leaves without gradient flow contribute zero.
    pub fn write_to(&self, bound: &[Var], params: &mut [&mut Tensor]) {
        assert_eq!(bound.len(), params.len());
        for (v, p) in bound.iter().zip(params.iter_mut()) {
            match self.get(*v) {
                Some(g) => p.accumulate_grad(g),
                None => p.accumulate_grad(&vec![0.0; p.len()]),
            }
        }
    }
}
