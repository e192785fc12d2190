//! The flow action decoder: exact log-likelihood, noise-regularized
//! training objective, and one-shot sampling.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{pool_context_batch, FlowStack, FlowStackConfig, Variant};
use crate::params::{gauss, ParamStore};
use crate::tape::{Tape, VarId};
use crate::taskgen::TaskSample;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: Variant,
    pub horizon: usize,
    pub action_dim: usize,
    pub ctx_dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub layers_per_flow: usize,
    pub sigma_noise: f64,
    pub use_plu: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NinaDecoder {
    pub stack: FlowStack,
    pub store: ParamStore,
    pub config: DecoderConfig,
}

impl NinaDecoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Self {
        Self::build(config, seed, false)
    }

    /// Test constructor: PLU permutations pinned to identity.
    pub fn new_identity_plu(config: DecoderConfig, seed: u64) -> Self {
        Self::build(config, seed, true)
    }

    fn build(config: DecoderConfig, seed: u64, identity_plu_perm: bool) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = FlowStack::build(
            &FlowStackConfig {
                variant: config.variant,
                horizon: config.horizon,
                action_dim: config.action_dim,
                ctx_dim: config.ctx_dim,
                depth: config.depth,
                hidden: config.hidden,
                layers_per_flow: config.layers_per_flow,
                use_plu: config.use_plu,
                identity_plu_perm,
            },
            &mut store,
            &mut rng,
        );
        NinaDecoder {
            stack,
            store,
            config,
        }
    }

    pub fn n(&self) -> usize {
        self.stack.n
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Exact log-density of a chunk given context.
    pub fn log_prob(&self, a: &Tensor, h: &Tensor) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (z0, logdet) = self.stack.forward_sample(&mut tape, &self.store, &a.data, h)?;
        let base = std_normal_logpdf(tape.value(z0).data.as_slice());
        Ok(base + tape.value(logdet).item())
    }

    /// Differentiable batch NLL: mean over the batch of
    /// -log_prob(a + noise, h). Noise is injected only when `noise_rng`
    /// is provided (training); evaluation passes None.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        batch: &[&TaskSample],
        mut noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let n = self.n();
        let b = batch.len();
        let perturbed: Vec<Tensor> = batch
            .iter()
            .map(|s| match noise_rng.as_deref_mut() {
                Some(rng) => perturb_actions(&s.a, self.config.sigma_noise, rng),
                None => Ok(s.a.clone()),
            })
            .collect::<Result<_>>()?;

        let lp = match self.config.variant {
            Variant::Mlp => {
                let mut data = Vec::with_capacity(b * n);
                for p in &perturbed {
                    data.extend_from_slice(&p.data);
                }
                let a = tape.leaf(Tensor::matrix(b, n, data));
                let ctxs: Vec<&Tensor> = batch.iter().map(|s| &s.h).collect();
                let h = tape.leaf(pool_context_batch(&ctxs));
                let (z0, logdet) = self.stack.forward_element(tape, &self.store, a, h)?;
                let base = gauss_logpdf_rows(tape, z0)?;
                tape.add(base, logdet)?
            }
            Variant::Transformer => {
                let m = batch[0].h.rows();
                if batch.iter().all(|s| s.h.rows() == m) {
                    let mut adata = Vec::with_capacity(b * n);
                    for p in &perturbed {
                        adata.extend_from_slice(&p.data);
                    }
                    let rows = b * self.config.horizon;
                    let a = tape.leaf(Tensor::matrix(rows, self.config.action_dim, adata));
                    let mut cdata = Vec::with_capacity(b * m * self.config.ctx_dim);
                    for s in batch {
                        cdata.extend_from_slice(&s.h.data);
                    }
                    let ctx = tape.leaf(Tensor::matrix(b * m, self.config.ctx_dim, cdata));
                    let (z0, logdet) =
                        self.stack.forward_sequence_batched(tape, &self.store, a, ctx, b)?;
                    let base = gauss_logpdf_rows(tape, z0)?;
                    tape.add(base, logdet)?
                } else {
                    // ragged context lengths: fall back to one pass per sample
                    let mut parts = Vec::with_capacity(b);
                    for (s, p) in batch.iter().zip(&perturbed) {
                        let a = tape.leaf(Tensor::matrix(
                            self.config.horizon,
                            self.config.action_dim,
                            p.data.clone(),
                        ));
                        let ctx = tape.leaf(s.h.clone());
                        let (z0, logdet) =
                            self.stack.forward_sequence(tape, &self.store, a, ctx)?;
                        let base = gauss_logpdf_rows(tape, z0)?;
                        parts.push(tape.add(base, logdet)?);
                    }
                    tape.concat_cols(&parts)?
                }
            }
        };
        let total = tape.sum(lp)?;
        tape.scale(total, -1.0 / b as f64)
    }

    /// One inverse pass from a fresh base draw; no noise, no iteration.
    pub fn sample(&self, h: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.sample_with_latent(h, rng)?.0)
    }

    /// Like `sample` but also returns the base latent that produced it.
    pub fn sample_with_latent(
        &self,
        h: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<f64>)> {
        let n = self.n();
        let z0: Vec<f64> = (0..n).map(|_| gauss(rng)).collect();
        let a = self.stack.inverse(&self.store, &z0, h)?;
        Ok((
            Tensor::matrix(self.config.horizon, self.config.action_dim, a),
            z0,
        ))
    }
}

/// a + N(0, sigma^2) i.i.d. per entry. Training-time only.
pub fn perturb_actions(a: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Invalid(format!("sigma_noise must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(a.clone());
    }
    let data = a.data.iter().map(|&v| v + sigma * gauss(rng)).collect();
    Ok(Tensor::new(a.shape.clone(), data))
}

/// Standard-normal log-density of each row of z: [B, n] -> [B].
pub fn gauss_logpdf_rows(tape: &mut Tape, z: VarId) -> Result<VarId> {
    let n = tape.value(z).cols();
    let sq = tape.mul(z, z)?;
    let ss = tape.sum_last(sq)?;
    let half = tape.scale(ss, -0.5)?;
    tape.add_scalar(half, -0.5 * n as f64 * LN_2PI)
}

pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let ss: f64 = z.iter().map(|&v| v * v).sum();
    -0.5 * ss - 0.5 * z.len() as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::perturb_store;
    use rand::Rng;

    fn tiny_config(variant: Variant, horizon: usize, action_dim: usize) -> DecoderConfig {
        DecoderConfig {
            variant,
            horizon,
            action_dim,
            ctx_dim: 4,
            depth: 3,
            hidden: 8,
            layers_per_flow: 2,
            sigma_noise: 0.03,
            use_plu: true,
        }
    }

    fn rand_ctx(m: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(m, c, (0..m * c).map(|_| rng.gen::<f64>() - 0.5).collect())
    }

    #[test]
    fn identity_decoder_log_prob_at_origin() {
        let dec = NinaDecoder::new_identity_plu(tiny_config(Variant::Mlp, 1, 2), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_ctx(1, 4, &mut rng);
        let lp = dec.log_prob(&Tensor::matrix(1, 2, vec![0.0, 0.0]), &h).unwrap();
        assert!((lp - (-LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn identity_decoder_sample_moments() {
        let dec = NinaDecoder::new_identity_plu(tiny_config(Variant::Mlp, 1, 2), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_ctx(1, 4, &mut rng);
        let count = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..count {
            let s = dec.sample(&h, &mut rng).unwrap();
            for i in 0..2 {
                sums[i] += s.data[i];
                sq[i] += s.data[i] * s.data[i];
            }
        }
        for i in 0..2 {
            let mean = sums[i] / count as f64;
            let var = sq[i] / count as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "dim {i} mean {mean}");
            assert!((0.97..=1.03).contains(&var), "dim {i} var {var}");
        }
    }

    #[test]
    fn sampling_ignores_sigma_noise() {
        let mut a = tiny_config(Variant::Mlp, 2, 3);
        a.sigma_noise = 0.0;
        let mut b = a.clone();
        b.sigma_noise = 0.5;
        let da = NinaDecoder::new(a, 7);
        let db = NinaDecoder::new(b, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rand_ctx(1, 4, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let s1 = da.sample(&h, &mut r1).unwrap();
        let s2 = db.sample(&h, &mut r2).unwrap();
        assert_eq!(s1.data, s2.data);
    }

    #[test]
    fn one_sample_costs_exactly_k_coupling_and_k_plu_evals() {
        for variant in [Variant::Mlp, Variant::Transformer] {
            let dec = NinaDecoder::new(tiny_config(variant, 4, 2), 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let h = rand_ctx(2, 4, &mut rng);
            let before = dec.stack.counters.snapshot();
            dec.sample(&h, &mut rng).unwrap();
            let after = dec.stack.counters.snapshot();
            assert_eq!(after.0 - before.0, 3, "{variant} coupling evals");
            assert_eq!(after.1 - before.1, 3, "{variant} plu evals");
        }
    }

    #[test]
    fn log_prob_is_consistent_with_sampled_latent() {
        for variant in [Variant::Mlp, Variant::Transformer] {
            let mut dec = NinaDecoder::new(tiny_config(variant, 2, 2), 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            perturb_store(&mut dec.store, 0.2, &mut rng);
            let h = rand_ctx(2, 4, &mut rng);
            let mut worst = 0.0f64;
            let mut weight_sum = 0.0;
            let count = 50;
            for _ in 0..count {
                let (a, z0) = dec.sample_with_latent(&h, &mut rng).unwrap();
                let mut tape = Tape::no_grad();
                let (z0_fwd, logdet) = dec
                    .stack
                    .forward_sample(&mut tape, &dec.store, &a.data, &h)
                    .unwrap();
                // the forward pass must recover the latent that generated a
                let zerr = z0
                    .iter()
                    .zip(&tape.value(z0_fwd).data)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                assert!(zerr < 1e-9, "{variant}: latent mismatch {zerr}");
                let lp = dec.log_prob(&a, &h).unwrap();
                let recon = std_normal_logpdf(&z0) + tape.value(logdet).item();
                worst = worst.max((lp - recon).abs());
                weight_sum += (recon - lp).exp();
            }
            assert!(worst < 1e-8, "{variant}: log_prob mismatch {worst}");
            let mean_weight = weight_sum / count as f64;
            assert!((mean_weight - 1.0).abs() < 1e-6, "{variant}: {mean_weight}");
        }
    }

    #[test]
    fn perturb_zero_sigma_is_exact() {
        let a = Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let out = perturb_actions(&a, 0.0, &mut rng).unwrap();
        assert_eq!(out.data, a.data);
        assert!(perturb_actions(&a, -0.1, &mut rng).is_err());
        assert!(perturb_actions(&a, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn perturb_noise_std_matches_sigma() {
        let n = 1_000_000usize;
        let a = Tensor::matrix(1, n, vec![0.0; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let out = perturb_actions(&a, 0.03, &mut rng).unwrap();
        let var: f64 = out.data.iter().map(|&v| v * v).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((0.0297..=0.0303).contains(&std), "std {std}");
    }

    #[test]
    fn identity_decoder_nll_at_origin() {
        let mut cfg = tiny_config(Variant::Mlp, 1, 2);
        cfg.sigma_noise = 0.0;
        let dec = NinaDecoder::new_identity_plu(cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sample = TaskSample {
            h: rand_ctx(1, 4, &mut rng),
            a: Tensor::matrix(1, 2, vec![0.0, 0.0]),
            mode_id: 0,
            context_id: 0,
        };
        let mut tape = Tape::new();
        let loss = dec.nll_loss(&mut tape, &[&sample], None).unwrap();
        assert!((tape.value(loss).item() - LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn batched_and_per_sample_nll_agree() {
        for variant in [Variant::Mlp, Variant::Transformer] {
            let mut dec = NinaDecoder::new(tiny_config(variant, 2, 2), 21);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            perturb_store(&mut dec.store, 0.2, &mut rng);
            let samples: Vec<TaskSample> = (0..6)
                .map(|i| TaskSample {
                    h: rand_ctx(2, 4, &mut rng),
                    a: Tensor::matrix(2, 2, (0..4).map(|_| rng.gen::<f64>() - 0.5).collect()),
                    mode_id: 0,
                    context_id: i,
                })
                .collect();
            let refs: Vec<&TaskSample> = samples.iter().collect();
            let mut tape = Tape::no_grad();
            let loss = dec.nll_loss(&mut tape, &refs, None).unwrap();
            let batched = tape.value(loss).item();
            let mean: f64 = samples
                .iter()
                .map(|s| -dec.log_prob(&s.a, &s.h).unwrap())
                .sum::<f64>()
                / samples.len() as f64;
            assert!(
                (batched - mean).abs() < 1e-10,
                "{variant}: {batched} vs {mean}"
            );
        }
    }

    #[test]
    fn ragged_context_batch_still_evaluates() {
        let mut dec = NinaDecoder::new(tiny_config(Variant::Transformer, 2, 2), 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        perturb_store(&mut dec.store, 0.2, &mut rng);
        let samples: Vec<TaskSample> = (0..4)
            .map(|i| TaskSample {
                h: rand_ctx(1 + i % 3, 4, &mut rng),
                a: Tensor::matrix(2, 2, (0..4).map(|_| rng.gen::<f64>() - 0.5).collect()),
                mode_id: 0,
                context_id: i,
            })
            .collect();
        let refs: Vec<&TaskSample> = samples.iter().collect();
        let mut tape = Tape::no_grad();
        let loss = dec.nll_loss(&mut tape, &refs, None).unwrap();
        let got = tape.value(loss).item();
        let mean: f64 = samples
            .iter()
            .map(|s| -dec.log_prob(&s.a, &s.h).unwrap())
            .sum::<f64>()
            / samples.len() as f64;
        assert!((got - mean).abs() < 1e-10, "{got} vs {mean}");
    }
}
