//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. Nodes are only ever appended, so tape order is a topological
//! order and [`Tape::backward`] is a single reverse sweep that visits each node
//! once.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tensor};

/// Epsilon inside the square root of [`Tape::rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> NodeId {
        NodeId(self.0)
    }
}

/// Operation names, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Matmul,
    MatmulNt,
    Add,
    Mul,
    AddRow,
    Scale,
    MulScalar,
    Tanh,
    Silu,
    Concat,
    Slice,
    Softmax,
    RmsNorm,
    Dropout,
    Embedding,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Matmul,
        OpKind::MatmulNt,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Tanh,
        OpKind::Silu,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Softmax,
        OpKind::RmsNorm,
        OpKind::Dropout,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::MatmulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Softmax => "softmax",
            OpKind::RmsNorm => "rms_norm",
            OpKind::Dropout => "dropout",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Tanh(Var),
    Silu(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::MatmulNt(..) => OpKind::MatmulNt,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Silu(..) => OpKind::Silu,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Softmax(..) => OpKind::Softmax,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

// ── dense kernels ────────────────────────────────────────────────────

/// `a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Shape(format!("{op} expects a matrix, got {other:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong. Used to
    /// prove that gradient checks catch broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        value.set_requires_grad(requires_grad);
        value.set_node(Some(NodeId(id)));
        self.nodes.push(Node { value, op });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Records `t` as an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = gemm(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(c, &[m, n])?, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let c = gemm_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(c, &[m, n])?, Op::MatmulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(data, t.shape()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(data, self.shape(a))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let out = Tensor::new(data, self.shape(a))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Broadcast-adds vector `v: [d]` to every last-axis row of `x: [..×d]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(v) != [d] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vd = self.data(v);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(vd).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(data, self.shape(x))?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the single entry of `s: [1]`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| v * sv).collect();
        let out = Tensor::new(data, self.shape(x))?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(data, &shape)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).cols();
        if len == 0 || start + len > d {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of range for last extent {d}",
                start + len
            )));
        }
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Slice { x, start }, rg))
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    /// With `causal`, entry `(i, j)` of each `[L×L]` matrix is masked for `j > i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let d = t.cols();
        if causal && t.rows() % d != 0 {
            return Err(Error::Shape(format!(
                "causal softmax needs square score blocks, got {:?}",
                t.shape()
            )));
        }
        let mut out = vec![0.0; t.len()];
        for (r, (row, o)) in t.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let limit = if causal { r % d + 1 } else { d };
            let live = &row[..limit];
            let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ov, &v) in o[..limit].iter_mut().zip(live) {
                *ov = (v - max).exp();
                z += *ov;
            }
            o[..limit].iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(out, t.shape())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Scales each last-axis vector to unit root-mean-square, then by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.data(gain);
        let mut inv_rms = Vec::with_capacity(self.value(x).rows());
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(g).map(|(v, gv)| v * inv * gv));
        }
        let out = Tensor::new(data, self.shape(x))?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Keeps each entry with probability `keep`, zeroing the rest. The output
    /// is not rescaled, so `E[dropout(x)] = keep · x`.
    pub fn dropout(&mut self, x: Var, keep: f64, seed: u64) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Validation(format!(
                "dropout keep-probability {keep} outside (0, 1]"
            )));
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = if keep >= 1.0 {
            vec![1.0; n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                .collect()
        };
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(data, self.shape(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Gathers rows of `table: [V×d]` at `ids`, giving `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding of an empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("embedding id {bad} out of range 0..{v}")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(data, &[ids.len(), d])?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean row-wise cross-entropy of `logits: [n×V]` against integer targets.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = matrix_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy over zero counted positions".into()));
        }
        let z = self.data(logits);
        if z.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("cross-entropy logits contain NaN".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(Error::Shape(format!("target {t} out of range 0..{v}")));
            }
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Propagates d loss / d node to every node that requires a gradient.
    /// Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(mut dy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if self.fault == Some(self.nodes[idx].op.kind()) {
                dy.iter_mut().for_each(|g| *g *= 1.5);
            }
            self.backprop_node(idx, &dy, &mut grads);
            self.nodes[idx].value.accumulate_grad(&dy);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if self.rg(v) {
                add_into(&mut grads[v.0], &g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    send(*a, gemm_nt(dy, self.data(*b), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, gemm_tn(self.data(*a), dy, m, k, n));
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    send(*a, gemm(dy, self.data(*b), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, gemm_tn(dy, self.data(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    send(*a, dy.iter().zip(bd).map(|(g, v)| g * v).collect());
                }
                if self.rg(*b) {
                    send(*b, dy.iter().zip(ad).map(|(g, v)| g * v).collect());
                }
            }
            Op::AddRow(x, v) => {
                send(*x, dy.to_vec());
                if self.rg(*v) {
                    let d = self.value(*v).len();
                    let mut gv = vec![0.0; d];
                    for row in dy.chunks(d) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(*v, gv);
                }
            }
            Op::Scale(x, c) => send(*x, dy.iter().map(|g| g * c).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                if self.rg(*x) {
                    send(*x, dy.iter().map(|g| g * sv).collect());
                }
                if self.rg(*s) {
                    let gs = dy.iter().zip(self.data(*x)).map(|(g, v)| g * v).sum();
                    send(*s, vec![gs]);
                }
            }
            Op::Tanh(x) => send(*x, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Silu(x) => {
                let g = dy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                send(*x, g);
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let g = dy
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        send(p, g);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let d = self.value(*x).cols();
                let w = node.value.cols();
                let mut g = vec![0.0; self.value(*x).len()];
                for (grow, drow) in g.chunks_mut(d).zip(dy.chunks(w)) {
                    grow[*start..start + w].copy_from_slice(drow);
                }
                send(*x, g);
            }
            Op::Softmax(x) => {
                let d = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for ((grow, yrow), drow) in g.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                    let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                    for ((gv, yv), dv) in grow.iter_mut().zip(yrow).zip(drow) {
                        *gv = yv * (dv - dot);
                    }
                }
                send(*x, g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = node.value.cols();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let dr = &dy[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let u = xr[j] * inv;
                        gg[j] += dr[j] * u;
                        dot += dr[j] * gd[j] * u;
                    }
                    dot /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv * (dr[j] * gd[j] - xr[j] * inv * dot);
                    }
                }
                if self.rg(*x) {
                    send(*x, gx);
                }
                if self.rg(*gain) {
                    send(*gain, gg);
                }
            }
            Op::Dropout { x, mask } => send(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Embedding { table, ids } => {
                let (v, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut g = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&dy[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                send(*table, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = dy[0] / *count as f64;
                let mut g = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..v {
                        g[r * v + j] = probs[r * v + j] * scale;
                    }
                    g[r * v + t] -= scale;
                }
                send(*logits, g);
            }
            Op::Sum(x) => send(*x, vec![dy[0]; self.value(*x).len()]),
        }
    }
}
