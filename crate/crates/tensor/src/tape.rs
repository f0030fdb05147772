use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::scalar::{gemm, MatRef};
use crate::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchedMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    AddScalar {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
        slope: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    Dropout {
        x: usize,
        keep_scale: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    SwapAxes12 {
        x: usize,
        dims: [usize; 4],
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        live: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    RowDot {
        a: usize,
        b: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchedMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::ConcatRows { a, b }
            | Op::RowDot { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Gelu { x, .. }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape { x }
            | Op::SwapAxes12 { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::L2Normalize { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications in execution order and replays them in
/// reverse to compute gradients.
///
/// A tape is single-writer: one training step owns it exclusively.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

fn ensure<'a, T: Scalar>(slot: &'a mut Option<Vec<T>>, len: usize) -> &'a mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { tape: self.id, index })
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Records a leaf. Gradients are accumulated into leaves whose tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Records a trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        copy.set_requires_grad(true);
        self.leaf(copy)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// `x @ w (+ bias)` with `x: [.., d_in]`, `w: [d_in, d_out]`, `bias: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.val(xi).shape().to_vec();
        let ws = self.val(wi).shape().to_vec();
        let d_in = self.val(xi).last_dim();
        if ws.len() != 2 || xs.is_empty() || ws[0] != d_in {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let d_out = ws[1];
        if let Some(bi) = bi {
            if self.val(bi).shape() != [d_out] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    lhs: ws,
                    rhs: self.val(bi).shape().to_vec(),
                });
            }
        }
        let rows = self.val(xi).numel() / d_in.max(1);
        let mut out = vec![T::zero(); rows * d_out];
        gemm(
            MatRef::new(self.val(xi).data(), rows, d_in),
            MatRef::new(self.val(wi).data(), d_in, d_out),
            &mut out,
            false,
        );
        if let Some(bi) = bi {
            let b = self.val(bi).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        self.push(Tensor::new(shape, out)?, Op::Linear { x: xi, w: wi, b: bi }, "linear")
    }

    /// Batched matrix product over matching leading axes:
    /// `a: [.., n, k]`, `b: [.., k, m]` (or `[.., m, k]` when `trans_b`).
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let as_ = self.val(ai).shape().to_vec();
        let bs = self.val(bi).shape().to_vec();
        let bad = || TensorError::Shape {
            op: "batched_matmul",
            lhs: as_.clone(),
            rhs: bs.clone(),
        };
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(bad());
        }
        let r = as_.len();
        let (n, k) = (as_[r - 2], as_[r - 1]);
        let (bk, m) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if bk != k {
            return Err(bad());
        }
        let groups: usize = as_[..r - 2].iter().product();
        let mut out = vec![T::zero(); groups * n * m];
        let (ad, bd) = (self.val(ai).data(), self.val(bi).data());
        for g in 0..groups {
            let am = MatRef::new(&ad[g * n * k..(g + 1) * n * k], n, k);
            let bm = if trans_b {
                MatRef::new(&bd[g * m * k..(g + 1) * m * k], m, k).t()
            } else {
                MatRef::new(&bd[g * k * m..(g + 1) * k * m], k, m)
            };
            gemm(am, bm, &mut out[g * n * m..(g + 1) * n * m], false);
        }
        let mut shape = as_.clone();
        shape[r - 1] = m;
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchedMatMul { a: ai, b: bi, trans_b },
            "batched_matmul",
        )
    }

    /// Elementwise sum; `b`'s shape may be a suffix of `a`'s (tiled over the
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.val(bi).data();
        let period = bd.len().max(1);
        let out: Vec<T> = self
            .val(ai)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % period])
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a: ai, b: bi }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: self.val(ai).shape().to_vec(),
                rhs: self.val(bi).shape().to_vec(),
            });
        }
        let out = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.val(ai).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a: ai, b: bi }, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let f = T::of(factor);
        let out = self.val(xi).data().iter().map(|&v| v * f).collect();
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale { x: xi, factor: f }, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let c = T::of(c);
        let out = self.val(xi).data().iter().map(|&v| v + c).collect();
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddScalar { x: xi }, "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu { x: xi }, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, slope) = self.val(xi).data().iter().map(|&v| gelu_parts(v)).unzip();
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu { x: xi, slope }, "gelu")
    }

    /// Normalizes each last-axis row to zero mean and unit population
    /// variance, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let d = self.val(xi).last_dim();
        if self.val(gi).shape() != [d] || self.val(bi).shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.val(xi).shape().to_vec(),
                rhs: self.val(gi).shape().to_vec(),
            });
        }
        let rows = self.val(xi).numel() / d;
        let (g, b) = (self.val(gi).data(), self.val(bi).data());
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in self.val(xi).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.val(xi).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: means,
                rstd: rstds,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis where `mask[j] == false` positions receive
    /// probability exactly zero. `mask` covers a whole number of rows and is
    /// tiled over the remaining leading rows.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.val(xi).last_dim();
        let total = self.val(xi).numel();
        if mask.is_empty() || mask.len() % n != 0 || total % mask.len() != 0 {
            return Err(TensorError::Shape {
                op: "softmax_masked",
                lhs: self.val(xi).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vec![T::zero(); total];
        for (r, (row, orow)) in self.val(xi).data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let off = (r * n) % mask.len();
            let m = &mask[off..off + n];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TensorError::InvalidMask { row: r })?;
            let mut z = T::zero();
            for ((o, &v), &keep) in orow.iter_mut().zip(row).zip(m) {
                if keep {
                    *o = (v - max).exp();
                    z += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax { x: xi }, "softmax_masked")
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        let xi = self.idx(x)?;
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let keep_scale: Vec<T> = (0..self.val(xi).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .val(xi)
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(&v, &s)| v * s)
            .collect();
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { x: xi, keep_scale }, "dropout")
    }

    /// Row lookup into `table: [V, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], lead: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let ts = self.val(ti).shape().to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: ts,
                rhs: lead.to_vec(),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(&self.val(ti).data()[id * d..(id + 1) * d]);
            idx.push(id);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.push(Tensor::new(shape, out)?, Op::Embedding { table: ti, ids: idx }, "embedding")
    }

    /// Selects rows of `x` viewed as `[R, d]`; output shape is `lead ++ [d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize], lead: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let d = self.val(xi).last_dim();
        let r = self.val(xi).numel() / d.max(1);
        if lead.iter().product::<usize>() != rows.len() {
            return Err(TensorError::Shape {
                op: "gather_rows",
                lhs: self.val(xi).shape().to_vec(),
                rhs: lead.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, len: r });
            }
            out.extend_from_slice(&self.val(xi).data()[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows {
                x: xi,
                rows: rows.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Stacks the rows of `a` and `b` (both viewed as `[_, d]`) into `[Ra + Rb, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let d = self.val(ai).last_dim();
        if self.val(bi).last_dim() != d {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: self.val(ai).shape().to_vec(),
                rhs: self.val(bi).shape().to_vec(),
            });
        }
        let mut out = self.val(ai).data().to_vec();
        out.extend_from_slice(self.val(bi).data());
        let rows = out.len() / d.max(1);
        self.push(Tensor::new([rows, d], out)?, Op::ConcatRows { a: ai, b: bi }, "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = Tensor::new(self.val(xi).shape().to_vec(), self.val(xi).data().to_vec())?;
        let t = t.reshape(shape.to_vec())?;
        self.push(t, Op::Reshape { x: xi }, "reshape")
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape {
                op: "swap_axes12",
                lhs: s,
                rhs: vec![4],
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.val(xi).data(), dims);
        self.push(
            Tensor::new([s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12 { x: xi, dims },
            "swap_axes12",
        )
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let li = self.idx(logits)?;
        let v = self.val(li).last_dim();
        let rows = self.val(li).numel() / v.max(1);
        if rows != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.val(li).shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut tg = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                tg.push(None);
            } else if t < 0 || t as usize >= v {
                return Err(TensorError::TargetOutOfRange { target: t, classes: v });
            } else {
                tg.push(Some(t as usize));
            }
        }
        let live = tg.iter().filter(|t| t.is_some()).count();
        if live == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut total = T::zero();
        for (row, t) in self.val(li).data().chunks(v).zip(&tg) {
            if let Some(t) = t {
                total += log_sum_exp(row) - row[*t];
            }
        }
        let loss = total / T::of(live as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: tg,
                live,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: xi }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = T::of(self.val(xi).numel() as f64);
        let s = self.val(xi).data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean { x: xi }, "mean")
    }

    /// Dot product of matching last-axis rows: `[.., d] x [.., d] -> [..]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).shape() != self.val(bi).shape() || self.val(ai).shape().is_empty() {
            return Err(TensorError::Shape {
                op: "row_dot",
                lhs: self.val(ai).shape().to_vec(),
                rhs: self.val(bi).shape().to_vec(),
            });
        }
        let d = self.val(ai).last_dim();
        let out = self
            .val(ai)
            .data()
            .chunks(d)
            .zip(self.val(bi).data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let s = self.val(ai).shape();
        let shape = s[..s.len() - 1].to_vec();
        self.push(Tensor::new(shape, out)?, Op::RowDot { a: ai, b: bi }, "row_dot")
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let d = self.val(xi).last_dim();
        let tiny = T::of(1e-12);
        let mut out = Vec::with_capacity(self.val(xi).numel());
        let mut norms = Vec::new();
        for row in self.val(xi).data().chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::L2Normalize { x: xi, norms }, "l2_normalize")
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaves with `requires_grad`
    /// accumulate (`+=`) into their tensor's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if !self.val(li).is_scalar() {
            return Err(TensorError::NotScalar(self.val(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backprop_node(i, g, lower);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite("backward"));
                }
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient accumulated on a leaf tensor across backward passes.
    pub fn leaf_grad(&self, v: Var) -> Option<&[T]> {
        self.value(v).grad()
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].needs_grad;
        let numel = |j: usize| nodes[j].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let d_in = nodes[x].value.last_dim();
                let d_out = nodes[w].value.shape()[1];
                let rows = numel(x) / d_in.max(1);
                let gm = MatRef::new(g, rows, d_out);
                if needs(x) {
                    let gx = ensure(&mut grads[x], numel(x));
                    gemm(gm, MatRef::new(nodes[w].value.data(), d_in, d_out).t(), gx, true);
                }
                if needs(w) {
                    let gw = ensure(&mut grads[w], numel(w));
                    gemm(MatRef::new(nodes[x].value.data(), rows, d_in).t(), gm, gw, true);
                }
                if let Some(b) = *b {
                    if needs(b) {
                        let gb = ensure(&mut grads[b], d_out);
                        for row in g.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let s = nodes[a].value.shape();
                let r = s.len();
                let (n, k) = (s[r - 2], s[r - 1]);
                let m = nodes[i].value.last_dim();
                let groups = numel(a) / (n * k).max(1);
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if needs(a) {
                    let ga = ensure(&mut grads[a], numel(a));
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * n * m..(gi + 1) * n * m], n, m);
                        let bs = &bd[gi * k * m..(gi + 1) * k * m];
                        let bm = if trans_b { MatRef::new(bs, m, k) } else { MatRef::new(bs, k, m).t() };
                        gemm(gm, bm, &mut ga[gi * n * k..(gi + 1) * n * k], true);
                    }
                }
                if needs(b) {
                    let gb = ensure(&mut grads[b], numel(b));
                    for gi in 0..groups {
                        let gm = MatRef::new(&g[gi * n * m..(gi + 1) * n * m], n, m);
                        let am = MatRef::new(&ad[gi * n * k..(gi + 1) * n * k], n, k);
                        let out = &mut gb[gi * k * m..(gi + 1) * k * m];
                        if trans_b {
                            gemm(gm.t(), am, out, true);
                        } else {
                            gemm(am.t(), gm, out, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let ga = ensure(&mut grads[a], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x += v);
                }
                if needs(b) {
                    let nb = numel(b);
                    let gb = ensure(&mut grads[b], nb);
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &v)| *x += v);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let other = nodes[b].value.data();
                    let ga = ensure(&mut grads[a], g.len());
                    for ((x, &gv), &o) in ga.iter_mut().zip(g).zip(other) {
                        *x += gv * o;
                    }
                }
                if needs(b) {
                    let other = nodes[a].value.data();
                    let gb = ensure(&mut grads[b], g.len());
                    for ((x, &gv), &o) in gb.iter_mut().zip(g).zip(other) {
                        *x += gv * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = ensure(&mut grads[*x], g.len());
                gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v * *factor);
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = ensure(&mut grads[*x], g.len());
                gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
            Op::Relu { x } => {
                let xv = nodes[*x].value.data();
                let gx = ensure(&mut grads[*x], g.len());
                for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *a += gv;
                    }
                }
            }
            Op::Gelu { x, slope } => {
                let gx = ensure(&mut grads[*x], g.len());
                for ((a, &gv), &s) in gx.iter_mut().zip(g).zip(slope) {
                    *a += gv * s;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = nodes[x].value.last_dim();
                let gam = nodes[gamma].value.data();
                let xv = nodes[x].value.data();
                let dt = T::of(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = if needs(x) { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * rs;
                        dxhat[j] = grow[j] * gam[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    if needs(x) {
                        let m1 = dxhat.iter().copied().sum::<T>() / dt;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if needs(x) {
                    let gx = ensure(&mut grads[x], dx.len());
                    gx.iter_mut().zip(&dx).for_each(|(a, &v)| *a += v);
                }
                if needs(gamma) {
                    let gg = ensure(&mut grads[gamma], d);
                    gg.iter_mut().zip(&dgamma).for_each(|(a, &v)| *a += v);
                }
                if needs(beta) {
                    let gb = ensure(&mut grads[beta], d);
                    gb.iter_mut().zip(&dbeta).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Softmax { x } => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.last_dim();
                let gx = ensure(&mut grads[*x], g.len());
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                let gx = ensure(&mut grads[*x], g.len());
                for ((a, &gv), &s) in gx.iter_mut().zip(g).zip(keep_scale) {
                    *a += gv * s;
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.last_dim();
                let gt = ensure(&mut grads[*table], numel(*table));
                for (k, &id) in ids.iter().enumerate() {
                    let src = &g[k * d..(k + 1) * d];
                    gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                }
            }
            Op::GatherRows { x, rows } => {
                let d = nodes[*x].value.last_dim();
                let gx = ensure(&mut grads[*x], numel(*x));
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * d..(k + 1) * d];
                    gx[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                }
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let na = numel(a);
                if needs(a) {
                    let ga = ensure(&mut grads[a], na);
                    ga.iter_mut().zip(&g[..na]).for_each(|(x, &v)| *x += v);
                }
                if needs(b) {
                    let gb = ensure(&mut grads[b], numel(b));
                    gb.iter_mut().zip(&g[na..]).for_each(|(x, &v)| *x += v);
                }
            }
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                let gx = ensure(&mut grads[*x], g.len());
                gx.iter_mut().zip(&back).for_each(|(a, &v)| *a += v);
            }
            Op::CrossEntropy { logits, targets, live } => {
                let v = nodes[*logits].value.last_dim();
                let scale = g[0] / T::of(*live as f64);
                let lv = nodes[*logits].value.data();
                let gl = ensure(&mut grads[*logits], lv.len());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &lv[r * v..(r + 1) * v];
                    let lse = log_sum_exp(row);
                    let out = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        out[j] += (row[j] - lse).exp() * scale;
                    }
                    out[*t] -= scale;
                }
            }
            Op::Sum { x } => {
                let gx = ensure(&mut grads[*x], numel(*x));
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean { x } => {
                let n = numel(*x);
                let share = g[0] / T::of(n as f64);
                let gx = ensure(&mut grads[*x], n);
                gx.iter_mut().for_each(|a| *a += share);
            }
            Op::RowDot { a, b } => {
                let (a, b) = (*a, *b);
                let d = nodes[a].value.last_dim();
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                if needs(a) {
                    let ga = ensure(&mut grads[a], ad.len());
                    for (r, &gv) in g.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += gv * bd[r * d + j];
                        }
                    }
                }
                if needs(b) {
                    let gb = ensure(&mut grads[b], bd.len());
                    for (r, &gv) in g.iter().enumerate() {
                        for j in 0..d {
                            gb[r * d + j] += gv * ad[r * d + j];
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.last_dim();
                let gx = ensure(&mut grads[*x], g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn swap12<T: Scalar>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
