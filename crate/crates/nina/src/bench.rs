//! Single-threaded latency microbenchmark: monotonic-clock timing of the
//! action-generation call only, warmup-excluded, batch size 1.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{match_ddpm_hidden, DdpmConfig, DdpmDecoder};
use crate::decoder::{DecoderConfig, NinaDecoder};
use crate::error::{Error, Result};
use crate::taskgen::TaskSpec;
use crate::tensor::Tensor;

pub const MIN_TRIALS: usize = 100;
pub const MIN_WARMUP: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub model_id: String,
    pub params: usize,
    pub times_ns: Vec<u64>,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub calls_per_sample: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    /// (ddpm T, median nina / median ddpm) per swept step count.
    pub ratios: Vec<(usize, f64)>,
    /// R^2 of ddpm median time regressed on T.
    pub ddpm_linearity_r2: f64,
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

/// Time `trials` calls of `sample`, after `warmup` untimed calls.
pub fn time_sampler(
    model_id: &str,
    params: usize,
    warmup: usize,
    trials: usize,
    calls_per_sample: u64,
    mut sample: impl FnMut() -> Result<()>,
) -> Result<BenchResult> {
    if trials < MIN_TRIALS || warmup < MIN_WARMUP {
        return Err(Error::Invalid(format!(
            "bench requires >= {MIN_WARMUP} warmup and >= {MIN_TRIALS} timed samples"
        )));
    }
    for _ in 0..warmup {
        sample()?;
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        sample()?;
        times.push(t0.elapsed().as_nanos() as u64);
    }
    let mut sorted = times.clone();
    sorted.sort_unstable();
    Ok(BenchResult {
        model_id: model_id.to_string(),
        params,
        p50_ns: percentile(&sorted, 0.50),
        p99_ns: percentile(&sorted, 0.99),
        times_ns: times,
        calls_per_sample,
    })
}

/// Least-squares R^2 of y on x.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|&y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy * sxy) / (sxx * syy)
}

pub struct BenchSetup {
    pub spec: TaskSpec,
    pub nina_cfg: DecoderConfig,
    pub ddpm_blocks: usize,
    pub t_values: Vec<usize>,
    pub seed: u64,
    pub warmup: usize,
    pub trials: usize,
}

/// Benchmark a flow decoder against size-matched DDPMs over a T sweep.
/// Parameter matching picks the DDPM hidden width closest to the flow's
/// total count; the caller asserts the +/-15% parity bound.
pub fn run_bench(setup: &BenchSetup) -> Result<BenchReport> {
    let nina = NinaDecoder::new(setup.nina_cfg.clone(), setup.seed);
    let h: Tensor = setup.spec.contexts[0].tokens.clone();
    let mut results = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0xBE7C);
    let nina_calls = 2 * nina.stack.depth() as u64;
    let nina_res = {
        let h = h.clone();
        time_sampler(
            &format!("nina-{}", setup.nina_cfg.variant),
            nina.param_count(),
            setup.warmup,
            setup.trials,
            nina_calls,
            move || nina.sample(&h, &mut rng).map(|_| ()),
        )?
    };
    let nina_p50 = nina_res.p50_ns;
    results.push(nina_res);

    let template = DdpmConfig {
        family: setup.nina_cfg.variant,
        horizon: setup.spec.horizon,
        action_dim: setup.spec.action_dim,
        ctx_dim: setup.spec.ctx_dim,
        hidden: 0,
        blocks: setup.ddpm_blocks,
        t_steps: 1,
        beta_start: 1e-4,
        beta_end: 0.02,
    };
    let nina_params = results[0].params;
    let hidden = match_ddpm_hidden(&template, nina_params);

    let mut ratios = Vec::new();
    let mut medians = Vec::new();
    for &t in &setup.t_values {
        let mut cfg = template.clone();
        cfg.hidden = hidden;
        cfg.t_steps = t;
        let ddpm = DdpmDecoder::new(cfg, setup.seed)?;
        let params = ddpm.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0xDD91 ^ t as u64);
        let h = h.clone();
        let res = time_sampler(
            &format!("ddpm-T{t}"),
            params,
            setup.warmup,
            setup.trials,
            t as u64,
            move || ddpm.sample(&h, &mut rng).map(|_| ()),
        )?;
        ratios.push((t, nina_p50 as f64 / res.p50_ns as f64));
        medians.push((t as f64, res.p50_ns as f64));
        results.push(res);
    }
    let xs: Vec<f64> = medians.iter().map(|&(t, _)| t).collect();
    let ys: Vec<f64> = medians.iter().map(|&(_, m)| m).collect();
    let ddpm_linearity_r2 = if xs.len() >= 3 { linear_r2(&xs, &ys) } else { 0.0 };
    Ok(BenchReport {
        results,
        ratios,
        ddpm_linearity_r2,
    })
}
