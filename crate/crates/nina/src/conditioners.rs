//! Conditioning networks that map (x1, context) to the coupling scale and
//! bias. Two families: a concatenation MLP and a self/cross-attention stack.
//! Both have zero-initialized output heads so a fresh flow is the identity,
//! and both squash the raw scale with tanh.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{sinusoidal_encoding, AttnBlock, Linear, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, VarId};

pub const ATTN_HEADS: usize = 4;

/// MLP conditioner: input is concat(x1, pooled context).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConditioner {
    pub trunk: Mlp,
    pub x1_dim: usize,
    pub x2_dim: usize,
    pub ctx_dim: usize,
}

impl MlpConditioner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        x1_dim: usize,
        x2_dim: usize,
        ctx_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let trunk = Mlp::new(
            store,
            name,
            x1_dim + ctx_dim,
            hidden,
            2 * x2_dim,
            depth,
            true,
            rng,
        );
        MlpConditioner {
            trunk,
            x1_dim,
            x2_dim,
            ctx_dim,
        }
    }

    /// `x1`: [B, x1_dim], `h`: [B, ctx_dim]. Returns (s, b), each [B, x2_dim],
    /// with s = tanh(raw) so every entry is in (-1, 1).
    pub fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: VarId,
        h: VarId,
    ) -> Result<(VarId, VarId)> {
        let input = tape.concat_cols(&[x1, h])?;
        let out = self.trunk.apply(tape, store, input)?;
        let raw_s = tape.gather_cols(out, &idx_range(0, self.x2_dim))?;
        let b = tape.gather_cols(out, &idx_range(self.x2_dim, self.x2_dim))?;
        let s = tape.tanh(raw_s)?;
        Ok((s, b))
    }
}

/// Attention conditioner: x1 timesteps become tokens; context enters through
/// cross-attention. One output head per token yields that timestep's (s, b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnConditioner {
    pub in_proj: Linear,
    pub ctx_proj: Linear,
    pub blocks: Vec<AttnBlock>,
    pub head: Linear,
    pub action_dim: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
}

impl AttnConditioner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        action_dim: usize,
        ctx_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_proj = Linear::new(store, &format!("{name}.in"), action_dim, hidden, rng);
        let ctx_proj = Linear::new(store, &format!("{name}.ctx"), ctx_dim, hidden, rng);
        let blocks = (0..depth)
            .map(|i| AttnBlock::new(store, &format!("{name}.blk{i}"), hidden, ATTN_HEADS, rng))
            .collect();
        let head = Linear::new_zeros(store, &format!("{name}.head"), hidden, 2 * action_dim);
        AttnConditioner {
            in_proj,
            ctx_proj,
            blocks,
            head,
            action_dim,
            ctx_dim,
            hidden,
        }
    }

    /// `x1_tokens`: [T1, D] with original timestep indices `positions`;
    /// `ctx`: [M, ctx_dim]. Returns (s, b), each [out_tokens, D]. With an
    /// even split out_tokens == T1; for odd horizons the first out_tokens
    /// token outputs parameterize the (smaller) transformed half.
    pub fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1_tokens: VarId,
        positions: &[usize],
        ctx: VarId,
        out_tokens: usize,
    ) -> Result<(VarId, VarId)> {
        self.condition_batched(tape, store, x1_tokens, positions, ctx, out_tokens, 1)
    }

    /// Batched form of `condition`: `b_samples` independent (x1, ctx) pairs
    /// stacked row-wise (`x1_tokens`: [B*T1, D], `ctx`: [B*M, ctx_dim], all
    /// samples sharing `positions` and M). Block-diagonal attention keeps
    /// the samples independent while the whole batch runs through one set of
    /// tape ops. Returns (s, b), each [B*out_tokens, D].
    pub fn condition_batched(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x1_tokens: VarId,
        positions: &[usize],
        ctx: VarId,
        out_tokens: usize,
        b_samples: usize,
    ) -> Result<(VarId, VarId)> {
        let t1 = positions.len();
        let mut x = self.in_proj.apply(tape, store, x1_tokens)?;
        let tiled: Vec<usize> = (0..b_samples).flat_map(|_| positions.iter().copied()).collect();
        let pos = tape.leaf(sinusoidal_encoding(&tiled, self.hidden));
        x = tape.add(x, pos)?;
        let ctx_h = self.ctx_proj.apply(tape, store, ctx)?;
        for blk in &self.blocks {
            x = blk.apply_blocked(tape, store, x, ctx_h, b_samples)?;
        }
        let out = self.head.apply(tape, store, x)?;
        let rows: Vec<usize> = (0..b_samples)
            .flat_map(|s| s * t1..s * t1 + out_tokens)
            .collect();
        let out = tape.gather(out, &rows)?;
        let d = self.action_dim;
        let raw_s = tape.gather_cols(out, &idx_range(0, d))?;
        let b = tape.gather_cols(out, &idx_range(d, d))?;
        let s = tape.tanh(raw_s)?;
        Ok((s, b))
    }
}

pub fn idx_range(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::testutil::{fd_param_check, perturb_store};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn mlp_conditioner_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cond = MlpConditioner::new(&mut store, "c", 3, 5, 4, 16, 3, &mut rng);
        let mut tape = Tape::new();
        let x1 = tape.leaf(rand_mat(2, 3, &mut rng));
        let h = tape.leaf(rand_mat(2, 4, &mut rng));
        let (s, b) = cond.condition(&mut tape, &store, x1, h).unwrap();
        assert!(tape.value(s).data.iter().all(|&v| v == 0.0));
        assert!(tape.value(b).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attn_conditioner_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cond = AttnConditioner::new(&mut store, "c", 3, 4, 8, 2, &mut rng);
        let mut tape = Tape::new();
        let x1 = tape.leaf(rand_mat(4, 3, &mut rng));
        let ctx = tape.leaf(rand_mat(2, 4, &mut rng));
        let (s, b) = cond.condition(&mut tape, &store, x1, &[0, 2, 4, 6], ctx, 4).unwrap();
        assert_eq!(tape.value(s).shape, vec![4, 3]);
        assert!(tape.value(s).data.iter().all(|&v| v == 0.0));
        assert!(tape.value(b).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_is_tanh_bounded_for_any_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cond = MlpConditioner::new(&mut store, "c", 4, 4, 2, 8, 2, &mut rng);
        perturb_store(&mut store, 3.0, &mut rng);
        let mut tape = Tape::new();
        let x1 = tape.leaf(rand_mat(5, 4, &mut rng));
        let h = tape.leaf(rand_mat(5, 2, &mut rng));
        let (s, _) = cond.condition(&mut tape, &store, x1, h).unwrap();
        // tanh rounds to exactly +/-1.0 in f64 once |raw| exceeds ~19
        assert!(tape.value(s).data.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn fd_grads_through_mlp_conditioner() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cond = MlpConditioner::new(&mut store, "c", 3, 4, 2, 6, 2, &mut rng);
        perturb_store(&mut store, 0.3, &mut rng);
        let x1 = rand_mat(2, 3, &mut rng);
        let h = rand_mat(2, 2, &mut rng);
        fd_param_check(&mut store, 1e-4, |tape, store| {
            let x1 = tape.leaf(x1.clone());
            let h = tape.leaf(h.clone());
            let (s, b) = cond.condition(tape, store, x1, h)?;
            let total = tape.add(s, b)?;
            tape.sum(total)
        });
    }

    #[test]
    fn fd_grads_through_attn_conditioner() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cond = AttnConditioner::new(&mut store, "c", 2, 3, 8, 2, &mut rng);
        perturb_store(&mut store, 0.2, &mut rng);
        let x1 = rand_mat(4, 2, &mut rng);
        let ctx = rand_mat(3, 3, &mut rng);
        fd_param_check(&mut store, 1e-4, |tape, store| {
            let x1 = tape.leaf(x1.clone());
            let ctx = tape.leaf(ctx.clone());
            let (s, b) = cond.condition(tape, store, x1, &[0, 1, 2, 3], ctx, 4)?;
            let total = tape.add(s, b)?;
            tape.sum(total)
        });
    }

    #[test]
    fn singleton_context_softmax_weights_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let scores = tape.leaf(rand_mat(4, 1, &mut rng));
        let attn = tape.softmax_rows(scores).unwrap();
        assert!(tape.value(attn).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn context_changes_output_once_perturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cond = AttnConditioner::new(&mut store, "c", 2, 3, 8, 1, &mut rng);
        perturb_store(&mut store, 0.5, &mut rng);
        let x1 = rand_mat(2, 2, &mut rng);
        let run = |ctx: Tensor| {
            let mut tape = Tape::new();
            let x1 = tape.leaf(x1.clone());
            let ctx = tape.leaf(ctx);
            let (s, b) = cond.condition(&mut tape, &store, x1, &[0, 1], ctx, 2).unwrap();
            (tape.value(s).data.clone(), tape.value(b).data.clone())
        };
        let (s1, b1) = run(rand_mat(2, 3, &mut rng));
        let (s2, b2) = run(rand_mat(2, 3, &mut rng));
        let diff = s1
            .iter()
            .zip(&s2)
            .chain(b1.iter().zip(&b2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "conditioner ignored the context (max diff {diff})");
    }
}
