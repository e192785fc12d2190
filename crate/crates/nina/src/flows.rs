//! Invertible building blocks: affine coupling layers with frozen random
//! splits, PLU linear layers, and their composition into a FlowStack with
//! exact log-determinant accounting.
//!
//! Direction convention: `forward_*` is the density-evaluation direction
//! (actions -> base latent) and accumulates +logdet, so
//! log p(a) = log N(z0; 0, I) + total_logdet. `inverse_*` is the sampling
//! direction (base latent -> actions).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioners::{AttnConditioner, MlpConditioner};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const S_LOG_CLAMP: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mlp,
    Transformer,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Mlp => write!(f, "mlp"),
            Variant::Transformer => write!(f, "transformer"),
        }
    }
}

/// A fixed random bipartition of positions, frozen at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMask {
    pub perm: Vec<usize>,
    pub x1_size: usize,
    inv_perm: Vec<usize>,
}

impl SplitMask {
    pub fn new(n: usize, x1_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self::from_perm(perm, x1_size)
    }

    pub fn from_perm(perm: Vec<usize>, x1_size: usize) -> Self {
        let n = perm.len();
        let mut inv_perm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inv_perm[p] = k;
        }
        SplitMask {
            perm,
            x1_size,
            inv_perm,
        }
    }

    pub fn idx1(&self) -> &[usize] {
        &self.perm[..self.x1_size]
    }

    pub fn idx2(&self) -> &[usize] {
        &self.perm[self.x1_size..]
    }

    /// Index list mapping concat(x1_part, x2_part) back to original order.
    pub fn merge_idx(&self) -> &[usize] {
        &self.inv_perm
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Coupling {
    /// Element-wise split of the flattened chunk (MLP variant).
    Element {
        mask: SplitMask,
        cond: MlpConditioner,
    },
    /// Timestep-wise split (Transformer variant): each action lands fully
    /// in x1 or x2.
    Sequence {
        mask: SplitMask,
        cond: AttnConditioner,
    },
}

/// Invertible linear layer W = P L (U + diag(sign * exp(s_log))).
/// log|det W| = sum(s_log) by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PluLayer {
    pub n: usize,
    pub perm: Vec<usize>,
    pub s_sign: Vec<f64>,
    pub l_raw: ParamId,
    pub u_raw: ParamId,
    pub s_log: ParamId,
}

impl PluLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        random_perm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        if random_perm {
            perm.shuffle(rng);
        }
        let l_raw = store.alloc_zeros(format!("{name}.l"), vec![n, n]);
        let u_raw = store.alloc_zeros(format!("{name}.u"), vec![n, n]);
        let s_log = store.alloc_clamped(
            format!("{name}.s_log"),
            Tensor::zeros(vec![n]),
            -S_LOG_CLAMP,
            S_LOG_CLAMP,
        );
        PluLayer {
            n,
            perm,
            s_sign: vec![1.0; n],
            l_raw,
            u_raw,
            s_log,
        }
    }

    /// Assemble W on the tape. Returns (W, logdet scalar).
    fn build_w(&self, tape: &mut Tape, store: &ParamStore) -> Result<(VarId, VarId)> {
        let n = self.n;
        let l_raw = tape.param(store, self.l_raw);
        let u_raw = tape.param(store, self.u_raw);
        let s_log = tape.param(store, self.s_log);

        let mut low = vec![0.0; n * n];
        let mut up = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                low[i * n + j] = 1.0;
            }
            for j in i + 1..n {
                up[i * n + j] = 1.0;
            }
        }
        let mask_low = tape.leaf(Tensor::matrix(n, n, low));
        let mask_up = tape.leaf(Tensor::matrix(n, n, up));
        let eye = tape.leaf(Tensor::eye(n));
        let sign = tape.leaf(Tensor::vector(self.s_sign.clone()));

        let l_strict = tape.mul(l_raw, mask_low)?;
        let l = tape.add(l_strict, eye)?;
        let es = tape.exp(s_log)?;
        let d = tape.mul(es, sign)?;
        let diag = tape.mul(eye, d)?;
        let u_strict = tape.mul(u_raw, mask_up)?;
        let v = tape.add(u_strict, diag)?;
        let lv = tape.matmul(l, v)?;
        let p = tape.leaf(Tensor::permutation_matrix(&self.perm));
        let w = tape.matmul(p, lv)?;
        let logdet = tape.sum(s_log)?;
        Ok((w, logdet))
    }

    /// y = x W^T for batched rows x: [B, n]. Returns (y, logdet scalar).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
    ) -> Result<(VarId, VarId)> {
        if tape.value(x).cols() != self.n {
            return Err(Error::Shape {
                op: "plu_forward",
                lhs: tape.value(x).shape.clone(),
                rhs: vec![self.n],
            });
        }
        let (w, logdet) = self.build_w(tape, store)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        Ok((y, logdet))
    }

    /// Solve W x = y by permutation undo and two triangular solves.
    pub fn inverse(&self, store: &ParamStore, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let l = &store.get(self.l_raw).data;
        let u = &store.get(self.u_raw).data;
        let s_log = &store.get(self.s_log).data;
        let mut z = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            z[p] = y[i];
        }
        // unit-lower solve
        let mut t = vec![0.0; n];
        for i in 0..n {
            let mut s = z[i];
            for j in 0..i {
                s -= l[i * n + j] * t[j];
            }
            t[i] = s;
        }
        // upper solve with signed-exp diagonal
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = t[i];
            for j in i + 1..n {
                s -= u[i * n + j] * x[j];
            }
            x[i] = s / (self.s_sign[i] * s_log[i].exp());
            if !x[i].is_finite() {
                return Err(Error::NonFinite { op: "plu_inverse" });
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowLayer {
    pub coupling: Coupling,
    pub plu: Option<PluLayer>,
}

#[derive(Debug, Default)]
pub struct EvalCounters {
    pub coupling: AtomicU64,
    pub plu: AtomicU64,
}

impl EvalCounters {
    pub fn snapshot(&self) -> (u64, u64) {
        (
            self.coupling.load(Ordering::Relaxed),
            self.plu.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    pub variant: Variant,
    pub horizon: usize,
    pub action_dim: usize,
    pub ctx_dim: usize,
    /// Flattened chunk dimension H*D.
    pub n: usize,
    #[serde(skip)]
    pub counters: EvalCounters,
}

pub struct FlowStackConfig {
    pub variant: Variant,
    pub horizon: usize,
    pub action_dim: usize,
    pub ctx_dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub layers_per_flow: usize,
    pub use_plu: bool,
    /// Identity P matrices (tests); training stacks use seeded random P.
    pub identity_plu_perm: bool,
}

impl FlowStack {
    pub fn build(cfg: &FlowStackConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.horizon * cfg.action_dim;
        assert!(n >= 2, "flow dimension must be at least 2");
        let mut layers = Vec::with_capacity(cfg.depth);
        for k in 0..cfg.depth {
            let coupling = match cfg.variant {
                Variant::Mlp => {
                    let mask = SplitMask::new(n, n / 2, rng);
                    let cond = MlpConditioner::new(
                        store,
                        &format!("flow{k}.cond"),
                        mask.x1_size,
                        n - mask.x1_size,
                        cfg.ctx_dim,
                        cfg.hidden,
                        cfg.layers_per_flow,
                        rng,
                    );
                    Coupling::Element { mask, cond }
                }
                Variant::Transformer => {
                    let h = cfg.horizon;
                    assert!(h >= 2, "sequence split needs at least 2 timesteps");
                    let mask = SplitMask::new(h, h.div_ceil(2), rng);
                    let cond = AttnConditioner::new(
                        store,
                        &format!("flow{k}.cond"),
                        cfg.action_dim,
                        cfg.ctx_dim,
                        cfg.hidden,
                        cfg.layers_per_flow,
                        rng,
                    );
                    Coupling::Sequence { mask, cond }
                }
            };
            let plu = cfg.use_plu.then(|| {
                PluLayer::new(
                    store,
                    &format!("flow{k}.plu"),
                    n,
                    !cfg.identity_plu_perm,
                    rng,
                )
            });
            layers.push(FlowLayer { coupling, plu });
        }
        FlowStack {
            layers,
            variant: cfg.variant,
            horizon: cfg.horizon,
            action_dim: cfg.action_dim,
            ctx_dim: cfg.ctx_dim,
            n,
            counters: EvalCounters::default(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Density-evaluation pass for the element variant.
    /// `a`: [B, n] flattened chunks, `h`: [B, ctx_dim].
    /// Returns (z0 [B, n], logdet [B]).
    pub fn forward_element(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: VarId,
        h: VarId,
    ) -> Result<(VarId, VarId)> {
        let batch = tape.value(a).rows();
        if tape.value(a).cols() != self.n {
            return Err(Error::Shape {
                op: "stack_forward",
                lhs: tape.value(a).shape.clone(),
                rhs: vec![batch, self.n],
            });
        }
        let mut x = a;
        let mut logdet = tape.leaf(Tensor::vector(vec![0.0; batch]));
        for layer in &self.layers {
            let Coupling::Element { mask, cond } = &layer.coupling else {
                return Err(Error::Invalid(
                    "element forward on a sequence-split stack".into(),
                ));
            };
            let x1 = tape.gather_cols(x, mask.idx1())?;
            let x2 = tape.gather_cols(x, mask.idx2())?;
            let (s, b) = cond.condition(tape, store, x1, h)?;
            self.counters.coupling.fetch_add(1, Ordering::Relaxed);
            let es = tape.exp(s)?;
            let y2 = tape.mul(es, x2)?;
            let y2 = tape.add(y2, b)?;
            let merged = tape.concat_cols(&[x1, y2])?;
            x = tape.gather_cols(merged, mask.merge_idx())?;
            let ld = tape.sum_last(s)?;
            logdet = tape.add(logdet, ld)?;
            if let Some(plu) = &layer.plu {
                let (y, pld) = plu.forward(tape, store, x)?;
                self.counters.plu.fetch_add(1, Ordering::Relaxed);
                x = y;
                logdet = tape.add(logdet, pld)?;
            }
        }
        Ok((x, logdet))
    }

    /// Density-evaluation pass for the sequence variant, one sample.
    /// `a`: [H, D] chunk, `ctx`: [M, ctx_dim] tokens.
    /// Returns (z0 [1, n], logdet [1]).
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: VarId,
        ctx: VarId,
    ) -> Result<(VarId, VarId)> {
        let shape = tape.value(a).shape.clone();
        if shape != vec![self.horizon, self.action_dim] {
            return Err(Error::Shape {
                op: "stack_forward",
                lhs: shape,
                rhs: vec![self.horizon, self.action_dim],
            });
        }
        let mut x = a;
        let mut logdet = tape.leaf(Tensor::scalar(0.0));
        for layer in &self.layers {
            let Coupling::Sequence { mask, cond } = &layer.coupling else {
                return Err(Error::Invalid(
                    "sequence forward on an element-split stack".into(),
                ));
            };
            let x1 = tape.gather(x, mask.idx1())?;
            let x2 = tape.gather(x, mask.idx2())?;
            let t2 = mask.perm.len() - mask.x1_size;
            let (s, b) = cond.condition(tape, store, x1, mask.idx1(), ctx, t2)?;
            self.counters.coupling.fetch_add(1, Ordering::Relaxed);
            let es = tape.exp(s)?;
            let y2 = tape.mul(es, x2)?;
            let y2 = tape.add(y2, b)?;
            let merged = tape.concat_rows(&[x1, y2])?;
            x = tape.gather(merged, mask.merge_idx())?;
            let ld = tape.sum(s)?;
            logdet = tape.add(logdet, ld)?;
            if let Some(plu) = &layer.plu {
                let flat = tape.reshape(x, vec![1, self.n])?;
                let (y, pld) = plu.forward(tape, store, flat)?;
                self.counters.plu.fetch_add(1, Ordering::Relaxed);
                x = tape.reshape(y, vec![self.horizon, self.action_dim])?;
                logdet = tape.add(logdet, pld)?;
            }
        }
        let z0 = tape.reshape(x, vec![1, self.n])?;
        Ok((z0, logdet))
    }

    /// Batched density-evaluation pass for the sequence variant. `a` stacks
    /// `b_samples` chunks row-wise as [B*H, D]; `ctx` stacks the per-sample
    /// context tokens as [B*M, C] (all samples must share M). Samples stay
    /// independent via block-diagonal attention masks while the whole batch
    /// shares one set of tape ops. Returns (z0 [B, n], logdet [B]).
    pub fn forward_sequence_batched(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: VarId,
        ctx: VarId,
        b_samples: usize,
    ) -> Result<(VarId, VarId)> {
        let h = self.horizon;
        let d = self.action_dim;
        let shape = tape.value(a).shape.clone();
        if shape != vec![b_samples * h, d] {
            return Err(Error::Shape {
                op: "stack_forward_batched",
                lhs: shape,
                rhs: vec![b_samples * h, d],
            });
        }
        let mut x = a;
        let mut logdet = tape.leaf(Tensor::vector(vec![0.0; b_samples]));
        for layer in &self.layers {
            let Coupling::Sequence { mask, cond } = &layer.coupling else {
                return Err(Error::Invalid(
                    "sequence forward on an element-split stack".into(),
                ));
            };
            let t1 = mask.x1_size;
            let t2 = h - t1;
            let rows1: Vec<usize> = (0..b_samples)
                .flat_map(|s| mask.idx1().iter().map(move |&t| s * h + t))
                .collect();
            let rows2: Vec<usize> = (0..b_samples)
                .flat_map(|s| mask.idx2().iter().map(move |&t| s * h + t))
                .collect();
            let x1 = tape.gather(x, &rows1)?;
            let x2 = tape.gather(x, &rows2)?;
            let (s, b) =
                cond.condition_batched(tape, store, x1, mask.idx1(), ctx, t2, b_samples)?;
            self.counters.coupling.fetch_add(1, Ordering::Relaxed);
            let es = tape.exp(s)?;
            let y2 = tape.mul(es, x2)?;
            let y2 = tape.add(y2, b)?;
            // concat puts all x1 blocks first, then all y2 blocks; restore
            // the per-sample timestep order
            let merged = tape.concat_rows(&[x1, y2])?;
            let mut merge = Vec::with_capacity(b_samples * h);
            for smp in 0..b_samples {
                for &k in mask.merge_idx() {
                    merge.push(if k < t1 {
                        smp * t1 + k
                    } else {
                        b_samples * t1 + smp * t2 + (k - t1)
                    });
                }
            }
            x = tape.gather(merged, &merge)?;
            let ld_rows = tape.sum_last(s)?;
            let ld_mat = tape.reshape(ld_rows, vec![b_samples, t2])?;
            let ld = tape.sum_last(ld_mat)?;
            logdet = tape.add(logdet, ld)?;
            if let Some(plu) = &layer.plu {
                let flat = tape.reshape(x, vec![b_samples, self.n])?;
                let (y, pld) = plu.forward(tape, store, flat)?;
                self.counters.plu.fetch_add(1, Ordering::Relaxed);
                x = tape.reshape(y, vec![b_samples * h, d])?;
                logdet = tape.add(logdet, pld)?;
            }
        }
        let z0 = tape.reshape(x, vec![b_samples, self.n])?;
        Ok((z0, logdet))
    }

    /// Unified per-sample forward: `a` flat length n, `ctx` [M, C]
    /// (mean-pooled for the element variant). Returns values.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: &[f64],
        ctx: &Tensor,
    ) -> Result<(VarId, VarId)> {
        match self.variant {
            Variant::Mlp => {
                let av = tape.leaf(Tensor::matrix(1, self.n, a.to_vec()));
                let hv = tape.leaf(pool_context(ctx));
                self.forward_element(tape, store, av, hv)
            }
            Variant::Transformer => {
                let av = tape.leaf(Tensor::matrix(self.horizon, self.action_dim, a.to_vec()));
                let cv = tape.leaf(ctx.clone());
                self.forward_sequence(tape, store, av, cv)
            }
        }
    }

    /// Sampling direction: base latent -> action chunk, exactly one pass.
    /// `z0` flat length n; `ctx` [M, C] raw context tokens.
    pub fn inverse(&self, store: &ParamStore, z0: &[f64], ctx: &Tensor) -> Result<Vec<f64>> {
        let mut x = z0.to_vec();
        let mut scratch = Tape::no_grad();
        for layer in self.layers.iter().rev() {
            if let Some(plu) = &layer.plu {
                x = plu.inverse(store, &x)?;
                self.counters.plu.fetch_add(1, Ordering::Relaxed);
            }
            match &layer.coupling {
                Coupling::Element { mask, cond } => {
                    let n1 = mask.x1_size;
                    let y1: Vec<f64> = mask.idx1().iter().map(|&i| x[i]).collect();
                    let y2: Vec<f64> = mask.idx2().iter().map(|&i| x[i]).collect();
                    let x1v = scratch.leaf(Tensor::matrix(1, n1, y1.clone()));
                    let hv = scratch.leaf(pool_context(ctx));
                    let (s, b) = cond.condition(&mut scratch, store, x1v, hv)?;
                    self.counters.coupling.fetch_add(1, Ordering::Relaxed);
                    let s = &scratch.value(s).data;
                    let b = &scratch.value(b).data;
                    for (k, &i) in mask.idx2().iter().enumerate() {
                        x[i] = (y2[k] - b[k]) * (-s[k]).exp();
                    }
                }
                Coupling::Sequence { mask, cond } => {
                    let d = self.action_dim;
                    let t1 = mask.x1_size;
                    let t2 = mask.perm.len() - t1;
                    let mut y1 = Vec::with_capacity(t1 * d);
                    for &r in mask.idx1() {
                        y1.extend_from_slice(&x[r * d..(r + 1) * d]);
                    }
                    let x1v = scratch.leaf(Tensor::matrix(t1, d, y1));
                    let cv = scratch.leaf(ctx.clone());
                    let (s, b) = cond.condition(&mut scratch, store, x1v, mask.idx1(), cv, t2)?;
                    self.counters.coupling.fetch_add(1, Ordering::Relaxed);
                    let s = &scratch.value(s).data;
                    let b = &scratch.value(b).data;
                    for (k, &r) in mask.idx2().iter().enumerate() {
                        for j in 0..d {
                            let y = x[r * d + j];
                            x[r * d + j] = (y - b[k * d + j]) * (-s[k * d + j]).exp();
                        }
                    }
                }
            }
        }
        for v in &x {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "stack_inverse" });
            }
        }
        Ok(x)
    }
}

/// Mean-pool context tokens [M, C] to a single row [1, C].
pub fn pool_context(ctx: &Tensor) -> Tensor {
    let (m, c) = (ctx.rows(), ctx.cols());
    if m == 1 {
        return Tensor::matrix(1, c, ctx.data.clone());
    }
    let mut out = vec![0.0; c];
    for i in 0..m {
        for j in 0..c {
            out[j] += ctx.data[i * c + j];
        }
    }
    for v in &mut out {
        *v /= m as f64;
    }
    Tensor::matrix(1, c, out)
}

/// Batched context pooling: rows of per-sample pooled contexts.
pub fn pool_context_batch(ctxs: &[&Tensor]) -> Tensor {
    let c = ctxs[0].cols();
    let mut data = Vec::with_capacity(ctxs.len() * c);
    for ctx in ctxs {
        data.extend_from_slice(&pool_context(ctx).data);
    }
    Tensor::matrix(ctxs.len(), c, data)
}
