//! Small neural-net building blocks on top of the tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Affine map y = x W + b with W: [in, out].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.alloc_gaussian(format!("{name}.w"), vec![in_dim, out_dim], in_dim, rng);
        let b = store.alloc_zeros(format!("{name}.b"), vec![out_dim]);
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero-initialized map (the flow's identity-at-init heads).
    pub fn new_zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.alloc_zeros(format!("{name}.w"), vec![in_dim, out_dim]);
        let b = store.alloc_zeros(format!("{name}.b"), vec![out_dim]);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Plain MLP trunk: N affine layers with SiLU between them.
/// The final layer is zero-initialized when `zero_head` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        zero_head: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        let mut d = in_dim;
        for i in 0..depth {
            let last = i + 1 == depth;
            let od = if last { out_dim } else { hidden };
            let lname = format!("{name}.l{i}");
            let layer = if last && zero_head {
                Linear::new_zeros(store, &lname, d, od)
            } else {
                Linear::new(store, &lname, d, od, rng)
            };
            layers.push(layer);
            d = od;
        }
        Mlp { layers }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, store, h)?;
            if i + 1 != self.layers.len() {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head attention, queries from `q_in` and keys/values from `kv_in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: VarId,
        kv_in: VarId,
    ) -> Result<VarId> {
        self.apply_blocked(tape, store, q_in, kv_in, 1)
    }

    /// Attention over `blocks` independent row blocks (stacked samples on
    /// one tape): queries in block b attend only to keys/values in block b.
    pub fn apply_blocked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: VarId,
        kv_in: VarId,
        blocks: usize,
    ) -> Result<VarId> {
        let q = self.wq.apply(tape, store, q_in)?;
        let k = self.wk.apply(tape, store, kv_in)?;
        let v = self.wv.apply(tape, store, kv_in)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let idx: Vec<usize> = (h * hd..(h + 1) * hd).collect();
            let qh = tape.gather_cols(q, &idx)?;
            let qh = tape.scale(qh, scale)?;
            let kh = tape.gather_cols(k, &idx)?;
            let vh = tape.gather_cols(v, &idx)?;
            outs.push(tape.block_attention(qh, kh, vh, blocks)?);
        }
        let cat = tape.concat_cols(&outs)?;
        self.wo.apply(tape, store, cat)
    }
}

/// Pre-LN block: self-attention, cross-attention to context, feedforward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnBlock {
    pub ln1: LayerNormParams,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.alloc(format!("{name}.g"), Tensor::vector(vec![1.0; dim]));
        let bias = store.alloc_zeros(format!("{name}.b"), vec![dim]);
        LayerNormParams { gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

impl AttnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AttnBlock {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            ln3: LayerNormParams::new(store, &format!("{name}.ln3"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * dim, dim, rng),
        }
    }

    /// `x`: [T, dim] tokens; `ctx`: [M, dim] projected context tokens.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        ctx: VarId,
    ) -> Result<VarId> {
        self.apply_blocked(tape, store, x, ctx, 1)
    }

    /// Block variant for row-stacked independent samples: both attentions
    /// are confined to each sample's own row block.
    pub fn apply_blocked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        ctx: VarId,
        blocks: usize,
    ) -> Result<VarId> {
        let n1 = self.ln1.apply(tape, store, x)?;
        let sa = self.self_attn.apply_blocked(tape, store, n1, n1, blocks)?;
        let x = tape.add(x, sa)?;
        let n2 = self.ln2.apply(tape, store, x)?;
        let ca = self.cross_attn.apply_blocked(tape, store, n2, ctx, blocks)?;
        let x = tape.add(x, ca)?;
        let n3 = self.ln3.apply(tape, store, x)?;
        let f = self.ff1.apply(tape, store, n3)?;
        let f = tape.silu(f)?;
        let f = self.ff2.apply(tape, store, f)?;
        tape.add(x, f)
    }
}

/// Fixed sinusoidal encodings, one row per position.
pub fn sinusoidal_encoding(positions: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = p as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(positions.len(), dim, data)
}
