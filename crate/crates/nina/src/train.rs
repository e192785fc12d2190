//! Minibatch maximum-likelihood training with decoupled-weight-decay
//! adaptive moments, cosine learning-rate decay, and global gradient
//! clipping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::ddpm::DdpmDecoder;
use crate::decoder::NinaDecoder;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::runrecord::RunRecorder;
use crate::tape::Tape;
use crate::taskgen::TaskSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            epochs: 10,
            batch: 80,
            seed: 0,
            eval_every: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub heldout_metric: Option<f64>,
    pub steps: usize,
}

pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, opts: &TrainOptions) -> Self {
        AdamW {
            m: store.entries.iter().map(|e| Tensor::zeros(e.value.shape.clone())).collect(),
            v: store.entries.iter().map(|e| Tensor::zeros(e.value.shape.clone())).collect(),
            t: 0,
            beta1: opts.beta1,
            beta2: opts.beta2,
            eps: 1e-8,
            weight_decay: opts.weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, g) in grads {
            let m = &mut self.m[pid.0].data;
            let v = &mut self.v[pid.0].data;
            let p = &mut store.get_mut(*pid).data;
            for i in 0..g.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        store.apply_clamps();
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
pub fn clip_grads(grads: &mut [(ParamId, Tensor)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data.iter())
        .map(|&v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
}

pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed-stable 90/10 train/held-out split by sample index hash.
pub fn split_dataset(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for i in 0..count {
        if splitmix64(seed ^ (i as u64).wrapping_mul(0xD1B54A32D192ED03)) % 10 == 0 {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    (train, heldout)
}

/// Mean NLL of the decoder over noiseless samples.
pub fn heldout_nll(dec: &NinaDecoder, samples: &[&TaskSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total -= dec.log_prob(&s.a, &s.h)?;
    }
    Ok(total / samples.len() as f64)
}

fn divergence_check(step: usize, loss: f64, initial: f64) -> Result<()> {
    let limit = 10.0 * initial.abs().max(1.0);
    if !loss.is_finite() || loss > limit {
        return Err(Error::Divergence {
            step,
            loss,
            initial,
        });
    }
    Ok(())
}

/// Locate the first sample whose individual loss is non-finite.
fn find_bad_sample(dec: &NinaDecoder, batch: &[&TaskSample]) -> Error {
    for (i, s) in batch.iter().enumerate() {
        match dec.log_prob(&s.a, &s.h) {
            Ok(v) if v.is_finite() => {}
            _ => return Error::NonFiniteLoss { index: i },
        }
    }
    Error::NonFiniteLoss { index: 0 }
}

pub fn train_nina(
    dec: &mut NinaDecoder,
    dataset: &[TaskSample],
    opts: &TrainOptions,
    rec: &mut RunRecorder,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let (train_idx, heldout_idx) = split_dataset(dataset.len(), opts.seed);
    let heldout: Vec<&TaskSample> = heldout_idx.iter().map(|&i| &dataset[i]).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5175);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9A3E);
    let mut adam = AdamW::new(&dec.store, opts);
    let steps_per_epoch = train_idx.len().div_ceil(opts.batch);
    let total_steps = steps_per_epoch * opts.epochs;
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    let mut step = 0usize;
    let use_noise = dec.config.sigma_noise > 0.0;

    for _ in 0..opts.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<&TaskSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let mut tape = Tape::new();
            let loss_var = match dec.nll_loss(
                &mut tape,
                &batch,
                if use_noise { Some(&mut noise_rng) } else { None },
            ) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(find_bad_sample(dec, &batch)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(loss_var).item();
            let initial = *initial_loss.get_or_insert(loss);
            divergence_check(step, loss, initial)?;
            tape.backward(loss_var)?;
            let mut grads = tape.param_grads();
            clip_grads(&mut grads, opts.grad_clip);
            let lr = cosine_lr(opts.lr, step, total_steps);
            adam.step(&mut dec.store, &grads, lr);
            rec.log(step as u64, "train_loss", loss)?;
            final_loss = loss;
            step += 1;
            if !heldout.is_empty() && opts.eval_every > 0 && step % opts.eval_every == 0 {
                let nll = heldout_nll(dec, &heldout)?;
                rec.log(step as u64, "heldout_nll", nll)?;
            }
        }
    }
    let heldout_metric = if heldout.is_empty() {
        None
    } else {
        let nll = heldout_nll(dec, &heldout)?;
        rec.log(step as u64, "heldout_nll", nll)?;
        Some(nll)
    };
    rec.flush()?;
    Ok(TrainOutcome {
        final_loss,
        heldout_metric,
        steps: step,
    })
}

pub fn train_ddpm(
    dec: &mut DdpmDecoder,
    dataset: &[TaskSample],
    opts: &TrainOptions,
    rec: &mut RunRecorder,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let (train_idx, heldout_idx) = split_dataset(dataset.len(), opts.seed);
    let heldout: Vec<&TaskSample> = heldout_idx.iter().map(|&i| &dataset[i]).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5175);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9A3E);
    let mut adam = AdamW::new(&dec.store, opts);
    let steps_per_epoch = train_idx.len().div_ceil(opts.batch);
    let total_steps = steps_per_epoch * opts.epochs;
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    let mut step = 0usize;

    for _ in 0..opts.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<&TaskSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let mut tape = Tape::new();
            let loss_var = dec.train_loss(&mut tape, &batch, &mut noise_rng)?;
            let loss = tape.value(loss_var).item();
            let initial = *initial_loss.get_or_insert(loss);
            divergence_check(step, loss, initial)?;
            tape.backward(loss_var)?;
            let mut grads = tape.param_grads();
            clip_grads(&mut grads, opts.grad_clip);
            let lr = cosine_lr(opts.lr, step, total_steps);
            adam.step(&mut dec.store, &grads, lr);
            rec.log(step as u64, "train_loss", loss)?;
            final_loss = loss;
            step += 1;
        }
    }
    let heldout_metric = if heldout.is_empty() {
        None
    } else {
        let mut tape = Tape::no_grad();
        let mut eval_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE7A1);
        let v = dec.train_loss(&mut tape, &heldout, &mut eval_rng)?;
        let mse = tape.value(v).item();
        rec.log(step as u64, "heldout_mse", mse)?;
        Some(mse)
    };
    rec.flush()?;
    Ok(TrainOutcome {
        final_loss,
        heldout_metric,
        steps: step,
    })
}
