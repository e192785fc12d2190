//! Define-by-run reverse-mode autodiff over dense f64 tensors.
//!
//! One tape per forward pass. Operations record a node with the inputs
//! needed for its backward rule; `backward` replays the nodes in exact
//! reverse order. Every op output is checked for finiteness; a NaN/Inf
//! anywhere is a hard error.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Exp(VarId),
    Log(VarId),
    Tanh(VarId),
    Silu(VarId),
    Sum(VarId),
    SumLast(VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    Gather(VarId, Vec<usize>),
    GatherCols(VarId, Vec<usize>),
    SoftmaxRows(VarId),
    BlockAttention {
        q: VarId,
        k: VarId,
        v: VarId,
        blocks: usize,
        /// Saved softmax weights, [q_rows, k_rows/blocks] row-major.
        attn: Vec<f64>,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    out: VarId,
    op: Op,
}

enum Broadcast {
    Same,
    ScalarRhs,
    RowRhs, // lhs [r,c], rhs [c]
}

pub struct Tape {
    vals: Vec<Tensor>,
    requires: Vec<bool>,
    nodes: Vec<Node>,
    param_binds: Vec<(ParamId, VarId)>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            requires: Vec::new(),
            nodes: Vec::new(),
            param_binds: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Forward-only tape: values are computed but nothing is recorded.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, t: Tensor, requires: bool, op: Op) -> VarId {
        let id = VarId(self.vals.len());
        self.vals.push(t);
        if self.recording {
            self.requires.push(requires);
            self.nodes.push(Node { out: id, op });
        } else {
            self.requires.push(false);
        }
        id
    }

    fn push_checked(&mut self, t: Tensor, requires: bool, op: Op, name: &'static str) -> Result<VarId> {
        t.check_finite(name)?;
        Ok(self.push(t, requires, op))
    }

    /// Constant or data leaf; no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, false, Op::Leaf)
    }

    /// Data leaf that accumulates a gradient (for gradient checks on inputs).
    pub fn leaf_grad(&mut self, t: Tensor) -> VarId {
        self.push(t, true, Op::Leaf)
    }

    /// Bind a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        let v = self.push(store.get(id).clone(), true, Op::Leaf);
        if self.recording {
            self.param_binds.push((id, v));
        }
        v
    }

    fn req(&self, v: VarId) -> bool {
        self.requires[v.0]
    }

    fn bcast(&self, op: &'static str, a: VarId, b: VarId) -> Result<Broadcast> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.vals[b.0].numel() == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Ok(Broadcast::RowRhs)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binop(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        let bc = self.bcast(name, a, b)?;
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let data = match bc {
            Broadcast::Same => ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => ta.data.iter().map(|&x| f(x, tb.data[0])).collect(),
            Broadcast::RowRhs => {
                let c = ta.shape[1];
                ta.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data[i % c]))
                    .collect()
            }
        };
        let out = Tensor::new(ta.shape.clone(), data);
        let requires = self.req(a) || self.req(b);
        self.push_checked(out, requires, op, name)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binop("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binop("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binop("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unop(
        &mut self,
        name: &'static str,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        let ta = &self.vals[a.0];
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| f(x)).collect());
        let requires = self.req(a);
        self.push_checked(out, requires, op, name)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unop("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unop("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unop("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        self.unop("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.unop("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        self.unop("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.vals[a.0].data.iter().sum();
        let requires = self.req(a);
        self.push_checked(Tensor::scalar(s), requires, Op::Sum(a), "sum")
    }

    /// Row sums of a 2-D tensor: [r,c] -> [r].
    pub fn sum_last(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.vals[a.0];
        if ta.shape.len() != 2 {
            return Err(Error::Shape {
                op: "sum_last",
                lhs: ta.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let data = (0..r)
            .map(|i| ta.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        let requires = self.req(a);
        self.push_checked(Tensor::vector(data), requires, Op::SumLast(a), "sum_last")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * c..(p + 1) * c];
                let orow = &mut data[i * c..(i + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let requires = self.req(a) || self.req(b);
        self.push_checked(Tensor::matrix(r, c, data), requires, Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.vals[a.0];
        if ta.shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: ta.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        let requires = self.req(a);
        self.push_checked(Tensor::matrix(c, r, data), requires, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let ta = &self.vals[a.0];
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: ta.shape.clone(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, ta.data.clone());
        let requires = self.req(a);
        self.push_checked(out, requires, Op::Reshape(a), "reshape")
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let cols = self.vals[parts[0].0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            if tp.shape.len() != 2 || tp.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.vals[parts[0].0].shape.clone(),
                    rhs: tp.shape.clone(),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(&tp.data);
        }
        let requires = parts.iter().any(|&p| self.req(p));
        self.push_checked(
            Tensor::matrix(rows, cols, data),
            requires,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Column-wise concat of 2-D tensors, or element concat of 1-D tensors.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let rank = self.vals[parts[0].0].shape.len();
        if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                let tp = &self.vals[p.0];
                if tp.shape.len() != 1 {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: self.vals[parts[0].0].shape.clone(),
                        rhs: tp.shape.clone(),
                    });
                }
                data.extend_from_slice(&tp.data);
            }
            let requires = parts.iter().any(|&p| self.req(p));
            return self.push_checked(
                Tensor::vector(data),
                requires,
                Op::ConcatCols(parts.to_vec()),
                "concat_cols",
            );
        }
        let rows = self.vals[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.vals[p.0].cols()).collect();
        for &p in parts {
            let tp = &self.vals[p.0];
            if tp.shape.len() != 2 || tp.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.vals[parts[0].0].shape.clone(),
                    rhs: tp.shape.clone(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let tp = &self.vals[p.0];
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&tp.data[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let requires = parts.iter().any(|&p| self.req(p));
        self.push_checked(
            Tensor::matrix(rows, total, data),
            requires,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Element gather on 1-D tensors, row gather on 2-D tensors.
    pub fn gather(&mut self, a: VarId, idx: &[usize]) -> Result<VarId> {
        let ta = &self.vals[a.0];
        let out = match ta.shape.len() {
            1 => Tensor::vector(idx.iter().map(|&i| ta.data[i]).collect()),
            2 => {
                let c = ta.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
                }
                Tensor::matrix(idx.len(), c, data)
            }
            _ => {
                return Err(Error::Shape {
                    op: "gather",
                    lhs: ta.shape.clone(),
                    rhs: vec![idx.len()],
                })
            }
        };
        let requires = self.req(a);
        self.push_checked(out, requires, Op::Gather(a, idx.to_vec()), "gather")
    }

    /// Column gather on a 2-D tensor.
    pub fn gather_cols(&mut self, a: VarId, idx: &[usize]) -> Result<VarId> {
        let ta = &self.vals[a.0];
        if ta.shape.len() != 2 {
            return Err(Error::Shape {
                op: "gather_cols",
                lhs: ta.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(ta.data[i * c + j]);
            }
        }
        let requires = self.req(a);
        self.push_checked(
            Tensor::matrix(r, idx.len(), data),
            requires,
            Op::GatherCols(a, idx.to_vec()),
            "gather_cols",
        )
    }

    /// Row-wise softmax (1-D input treated as a single row).
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = &self.vals[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let out = Tensor::new(ta.shape.clone(), data);
        let requires = self.req(a);
        self.push_checked(out, requires, Op::SoftmaxRows(a), "softmax")
    }

    /// Scaled-dot-product attention over `blocks` independent row blocks:
    /// out = softmax(q_b k_b^T) v_b within each block b. `q`: [B*Tq, d],
    /// `k`/`v`: [B*Tk, d]. Row block b of the output attends only to row
    /// block b of k/v, so B stacked samples stay independent at cost linear
    /// in B (a dense mask would be quadratic). Callers pre-scale `q` by
    /// 1/sqrt(d).
    pub fn block_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        blocks: usize,
    ) -> Result<VarId> {
        let (sq, sk, sv) = (
            self.vals[q.0].shape.clone(),
            self.vals[k.0].shape.clone(),
            self.vals[v.0].shape.clone(),
        );
        let ok = sq.len() == 2
            && sk.len() == 2
            && sk == sv
            && sq[1] == sk[1]
            && blocks > 0
            && sq[0] % blocks == 0
            && sk[0] % blocks == 0;
        if !ok {
            return Err(Error::Shape {
                op: "block_attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let d = sq[1];
        let (rq, rk) = (sq[0], sk[0]);
        let (bq, bk) = (rq / blocks, rk / blocks);
        let mut attn = vec![0.0; rq * bk];
        let mut data = vec![0.0; rq * d];
        {
            let (tq, tk, tv) = (
                &self.vals[q.0].data,
                &self.vals[k.0].data,
                &self.vals[v.0].data,
            );
            for b in 0..blocks {
                for i in 0..bq {
                    let row = b * bq + i;
                    let qi = &tq[row * d..(row + 1) * d];
                    let arow = &mut attn[row * bk..(row + 1) * bk];
                    let mut m = f64::NEG_INFINITY;
                    for (j, a) in arow.iter_mut().enumerate() {
                        let kj = &tk[(b * bk + j) * d..(b * bk + j + 1) * d];
                        let s: f64 = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                        *a = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for a in arow.iter_mut() {
                        *a = (*a - m).exp();
                        z += *a;
                    }
                    for a in arow.iter_mut() {
                        *a /= z;
                    }
                    let orow = &mut data[row * d..(row + 1) * d];
                    for (j, &a) in arow.iter().enumerate() {
                        let vj = &tv[(b * bk + j) * d..(b * bk + j + 1) * d];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let requires = self.req(q) || self.req(k) || self.req(v);
        self.push_checked(
            Tensor::matrix(rq, d, data),
            requires,
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                attn,
            },
            "block_attention",
        )
    }

    /// Row-wise layer normalization with affine gain/bias of length cols.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        const EPS: f64 = 1e-6;
        let tx = &self.vals[x.0];
        let (r, c) = (tx.rows(), tx.cols());
        let (tg, tb) = (&self.vals[gain.0], &self.vals[bias.0]);
        if tg.numel() != c || tb.numel() != c || tx.shape.len() != 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * tg.data[j] + tb.data[j];
            }
        }
        let requires = self.req(x) || self.req(gain) || self.req(bias);
        self.push_checked(
            Tensor::matrix(r, c, data),
            requires,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: VarId, len: usize, f: impl Fn(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        f(slot.as_mut().unwrap());
    }

    /// Reverse pass. Fills gradients for every leaf with `requires_grad`.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.recording || self.nodes.is_empty() {
            return Err(Error::DetachedLoss);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.vals[loss.0].shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);

        for ni in (0..self.nodes.len()).rev() {
            let out = self.nodes[ni].out;
            if !self.requires[out.0] {
                continue;
            }
            let g = match &grads[out.0] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = &self.nodes[ni].op;
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_grad(&mut grads, a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(&g) {
                            *x += gv;
                        }
                    });
                    self.acc_bcast(&mut grads, a, b, &g, 1.0, None);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_grad(&mut grads, a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(&g) {
                            *x += gv;
                        }
                    });
                    self.acc_bcast(&mut grads, a, b, &g, -1.0, None);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    // da = g * b (broadcast), db = reduce(g * a)
                    let bc = self.bcast("mul", a, b).unwrap();
                    let tb = self.vals[b.0].data.clone();
                    let c = self.vals[a.0].cols();
                    self.acc_grad(&mut grads, a, |ga| match bc {
                        Broadcast::Same => {
                            for ((x, &gv), &bv) in ga.iter_mut().zip(&g).zip(&tb) {
                                *x += gv * bv;
                            }
                        }
                        Broadcast::ScalarRhs => {
                            for (x, &gv) in ga.iter_mut().zip(&g) {
                                *x += gv * tb[0];
                            }
                        }
                        Broadcast::RowRhs => {
                            for (i, (x, &gv)) in ga.iter_mut().zip(&g).enumerate() {
                                *x += gv * tb[i % c];
                            }
                        }
                    });
                    let ta = self.vals[a.0].data.clone();
                    self.acc_bcast(&mut grads, a, b, &g, 1.0, Some(&ta));
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.acc_grad(&mut grads, a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(&g) {
                            *x += gv * c;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.acc_grad(&mut grads, a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(&g) {
                            *x += gv;
                        }
                    });
                }
                Op::Exp(a) => {
                    let a = *a;
                    let y = self.vals[out.0].data.clone();
                    self.acc_grad(&mut grads, a, |ga| {
                        for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(&y) {
                            *x += gv * yv;
                        }
                    });
                }
                Op::Log(a) => {
                    let a = *a;
                    let xin = self.vals[a.0].data.clone();
                    self.acc_grad(&mut grads, a, |ga| {
                        for ((x, &gv), &xv) in ga.iter_mut().zip(&g).zip(&xin) {
                            *x += gv / xv;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = self.vals[out.0].data.clone();
                    self.acc_grad(&mut grads, a, |ga| {
                        for ((x, &gv), &yv) in ga.iter_mut().zip(&g).zip(&y) {
                            *x += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Silu(a) => {
                    let a = *a;
                    let xin = self.vals[a.0].data.clone();
                    self.acc_grad(&mut grads, a, |ga| {
                        for ((x, &gv), &xv) in ga.iter_mut().zip(&g).zip(&xin) {
                            let s = sigmoid(xv);
                            *x += gv * s * (1.0 + xv * (1.0 - s));
                        }
                    });
                }
                Op::Sum(a) => {
                    let a = *a;
                    let gv = g[0];
                    self.acc_grad(&mut grads, a, |ga| {
                        for x in ga.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::SumLast(a) => {
                    let a = *a;
                    let c = self.vals[a.0].shape[1];
                    self.acc_grad(&mut grads, a, |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i / c];
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (r, k) = (self.vals[a.0].shape[0], self.vals[a.0].shape[1]);
                    let c = self.vals[b.0].shape[1];
                    let tb = self.vals[b.0].data.clone();
                    // dA = G * B^T
                    self.acc_grad(&mut grads, a, |ga| {
                        for i in 0..r {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..c {
                                    s += g[i * c + j] * tb[p * c + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    let ta = self.vals[a.0].data.clone();
                    // dB = A^T * G
                    self.acc_grad(&mut grads, b, |gb| {
                        for p in 0..k {
                            for i in 0..r {
                                let av = ta[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..c {
                                    gb[p * c + j] += av * g[i * c + j];
                                }
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (self.vals[a.0].shape[0], self.vals[a.0].shape[1]);
                    self.acc_grad(&mut grads, a, |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    let a = *a;
                    self.acc_grad(&mut grads, a, |ga| {
                        for (x, &gv) in ga.iter_mut().zip(&g) {
                            *x += gv;
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let n = self.vals[p.0].numel();
                        let seg = g[off..off + n].to_vec();
                        self.acc_grad(&mut grads, p, |gp| {
                            for (x, &gv) in gp.iter_mut().zip(&seg) {
                                *x += gv;
                            }
                        });
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    if self.vals[parts[0].0].shape.len() == 1 {
                        let mut off = 0;
                        for p in parts {
                            let n = self.vals[p.0].numel();
                            let seg = g[off..off + n].to_vec();
                            self.acc_grad(&mut grads, p, |gp| {
                                for (x, &gv) in gp.iter_mut().zip(&seg) {
                                    *x += gv;
                                }
                            });
                            off += n;
                        }
                    } else {
                        let rows = self.vals[parts[0].0].rows();
                        let total: usize = parts.iter().map(|&p| self.vals[p.0].cols()).sum();
                        let mut off = 0;
                        for p in parts {
                            let w = self.vals[p.0].cols();
                            let start = off;
                            self.acc_grad(&mut grads, p, |gp| {
                                for i in 0..rows {
                                    for j in 0..w {
                                        gp[i * w + j] += g[i * total + start + j];
                                    }
                                }
                            });
                            off += w;
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    let rank1 = self.vals[a.0].shape.len() == 1;
                    let c = self.vals[a.0].cols();
                    self.acc_grad(&mut grads, a, |ga| {
                        if rank1 {
                            for (k, &i) in idx.iter().enumerate() {
                                ga[i] += g[k];
                            }
                        } else {
                            for (k, &i) in idx.iter().enumerate() {
                                for j in 0..c {
                                    ga[i * c + j] += g[k * c + j];
                                }
                            }
                        }
                    });
                }
                Op::GatherCols(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    let (r, c) = (self.vals[a.0].shape[0], self.vals[a.0].shape[1]);
                    let w = idx.len();
                    self.acc_grad(&mut grads, a, |ga| {
                        for i in 0..r {
                            for (k, &j) in idx.iter().enumerate() {
                                ga[i * c + j] += g[i * w + k];
                            }
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = self.vals[out.0].data.clone();
                    let (r, c) = {
                        let t = &self.vals[out.0];
                        (t.rows(), t.cols())
                    };
                    self.acc_grad(&mut grads, a, |ga| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..c {
                                ga[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    blocks,
                    attn,
                } => {
                    let (q, k, v, blocks) = (*q, *k, *v, *blocks);
                    let attn = attn.clone();
                    let d = self.vals[q.0].shape[1];
                    let (rq, rk) = (self.vals[q.0].shape[0], self.vals[k.0].shape[0]);
                    let (bq, bk) = (rq / blocks, rk / blocks);
                    let tq = self.vals[q.0].data.clone();
                    let tk = self.vals[k.0].data.clone();
                    let tv = self.vals[v.0].data.clone();
                    // dAttn[i,j] = g_i . v_j, then softmax backward gives dS
                    let mut ds = vec![0.0; rq * bk];
                    for b in 0..blocks {
                        for i in 0..bq {
                            let row = b * bq + i;
                            let gi = &g[row * d..(row + 1) * d];
                            let arow = &attn[row * bk..(row + 1) * bk];
                            let drow = &mut ds[row * bk..(row + 1) * bk];
                            for (j, dj) in drow.iter_mut().enumerate() {
                                let vj = &tv[(b * bk + j) * d..(b * bk + j + 1) * d];
                                *dj = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                            }
                            let dot: f64 =
                                arow.iter().zip(drow.iter()).map(|(&a, &dv)| a * dv).sum();
                            for (dj, &a) in drow.iter_mut().zip(arow) {
                                *dj = a * (*dj - dot);
                            }
                        }
                    }
                    self.acc_grad(&mut grads, q, |gq| {
                        for b in 0..blocks {
                            for i in 0..bq {
                                let row = b * bq + i;
                                let drow = &ds[row * bk..(row + 1) * bk];
                                let grow = &mut gq[row * d..(row + 1) * d];
                                for (j, &dv) in drow.iter().enumerate() {
                                    let kj = &tk[(b * bk + j) * d..(b * bk + j + 1) * d];
                                    for (x, &y) in grow.iter_mut().zip(kj) {
                                        *x += dv * y;
                                    }
                                }
                            }
                        }
                    });
                    self.acc_grad(&mut grads, k, |gk| {
                        for b in 0..blocks {
                            for i in 0..bq {
                                let row = b * bq + i;
                                let drow = &ds[row * bk..(row + 1) * bk];
                                let qi = &tq[row * d..(row + 1) * d];
                                for (j, &dv) in drow.iter().enumerate() {
                                    let grow =
                                        &mut gk[(b * bk + j) * d..(b * bk + j + 1) * d];
                                    for (x, &y) in grow.iter_mut().zip(qi) {
                                        *x += dv * y;
                                    }
                                }
                            }
                        }
                    });
                    self.acc_grad(&mut grads, v, |gv| {
                        for b in 0..blocks {
                            for i in 0..bq {
                                let row = b * bq + i;
                                let arow = &attn[row * bk..(row + 1) * bk];
                                let gi = &g[row * d..(row + 1) * d];
                                for (j, &a) in arow.iter().enumerate() {
                                    let grow =
                                        &mut gv[(b * bk + j) * d..(b * bk + j + 1) * d];
                                    for (x, &y) in grow.iter_mut().zip(gi) {
                                        *x += a * y;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let (r, c) = (self.vals[x.0].shape[0], self.vals[x.0].shape[1]);
                    let gvals = self.vals[gain.0].data.clone();
                    self.acc_grad(&mut grads, x, |gx| {
                        for i in 0..r {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..c {
                                let d = g[i * c + j] * gvals[j];
                                sum_d += d;
                                sum_dx += d * xhat[i * c + j];
                            }
                            let nf = c as f64;
                            for j in 0..c {
                                let d = g[i * c + j] * gvals[j];
                                gx[i * c + j] +=
                                    inv_std[i] * (d - sum_d / nf - xhat[i * c + j] * sum_dx / nf);
                            }
                        }
                    });
                    self.acc_grad(&mut grads, gain, |gg| {
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                    self.acc_grad(&mut grads, bias, |gb| {
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc_grad(&self, grads: &mut [Option<Vec<f64>>], v: VarId, f: impl Fn(&mut [f64])) {
        if !self.requires[v.0] {
            return;
        }
        Self::acc(grads, v, self.vals[v.0].numel(), f);
    }

    /// Gradient reduction into the rhs of a broadcasting add/sub/mul.
    fn acc_bcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: VarId,
        b: VarId,
        g: &[f64],
        sign: f64,
        mul_by: Option<&[f64]>,
    ) {
        if !self.requires[b.0] {
            return;
        }
        let bc = self.bcast("bcast", a, b).unwrap();
        let c = self.vals[a.0].cols();
        let term = |i: usize| -> f64 {
            let base = g[i] * sign;
            match mul_by {
                Some(m) => base * m[i],
                None => base,
            }
        };
        Self::acc(grads, b, self.vals[b.0].numel(), |gb| match bc {
            Broadcast::Same => {
                for (i, x) in gb.iter_mut().enumerate() {
                    *x += term(i);
                }
            }
            Broadcast::ScalarRhs => {
                let mut s = 0.0;
                for i in 0..g.len() {
                    s += term(i);
                }
                gb[0] += s;
            }
            Broadcast::RowRhs => {
                for i in 0..g.len() {
                    gb[i % c] += term(i);
                }
            }
        });
    }

    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every bound parameter (zeros if untouched by the loss).
    /// A parameter bound several times on one tape gets one summed entry.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut slot: Vec<Option<usize>> = Vec::new();
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(pid, v) in &self.param_binds {
            if pid.0 >= slot.len() {
                slot.resize(pid.0 + 1, None);
            }
            let idx = *slot[pid.0].get_or_insert_with(|| {
                out.push((pid, Tensor::zeros(self.vals[v.0].shape.clone())));
                out.len() - 1
            });
            if let Some(g) = self.grad(v) {
                for (acc, &gv) in out[idx].1.data.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
