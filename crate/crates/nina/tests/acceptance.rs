//! End-to-end acceptance checks, one criterion per section, each reported
//! as a single PASS/FAIL line. Everything runs inside one sequential test:
//! the training-based checks saturate the single available core, so
//! parallel test threads would distort each other's wall-clock budgets.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nina::checkpoint::{Checkpoint, Model};
use nina::config::{ModelKind, RunConfig};
use nina::decoder::{std_normal_logpdf, DecoderConfig, NinaDecoder};
use nina::flows::{pool_context, Variant};
use nina::harness::{self, AblateAxis};
use nina::params::{gauss, ParamId};
use nina::tape::Tape;
use nina::taskgen::{TaskSample, TaskSpec};
use nina::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_ctx(m: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(m, c, (0..m * c).map(|_| r.gen::<f64>() - 0.5).collect())
}

/// Add gaussian noise to every parameter so identity-initialized decoders
/// become generic ones (clamps re-applied).
fn perturb(dec: &mut NinaDecoder, scale: f64, r: &mut ChaCha8Rng) {
    for i in 0..dec.store.len() {
        for v in &mut dec.store.get_mut(ParamId(i)).data {
            *v += scale * gauss(r);
        }
    }
    dec.store.apply_clamps();
}

fn flow_config(
    variant: Variant,
    horizon: usize,
    action_dim: usize,
    depth: usize,
    hidden: usize,
) -> DecoderConfig {
    DecoderConfig {
        variant,
        horizon,
        action_dim,
        ctx_dim: 3,
        depth,
        hidden,
        layers_per_flow: 2,
        sigma_noise: 0.0,
        use_plu: true,
    }
}

// ---------------------------------------------------------------------------
// criterion 1: forward/inverse round trips
// ---------------------------------------------------------------------------

fn criterion_invertibility() -> String {
    let mut worst = 0.0f64;
    let mut pairs = 0u64;
    let mut run = |cfg: DecoderConfig, count: usize, seed: u64| {
        let mut dec = NinaDecoder::new(cfg, seed);
        let mut r = rng(seed ^ 0xA11);
        perturb(&mut dec, 0.05, &mut r);
        for _ in 0..count {
            let h = rand_ctx(2, 3, &mut r);
            let (a, z0) = dec.sample_with_latent(&h, &mut r).unwrap();
            let mut tape = Tape::no_grad();
            let (zf, _) = dec
                .stack
                .forward_sample(&mut tape, &dec.store, &a.data, &h)
                .unwrap();
            let err = z0
                .iter()
                .zip(&tape.value(zf).data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            worst = worst.max(err);
            pairs += 1;
        }
    };
    // MLP variant at K=28 across chunk sizes n = 4..32
    for (i, (h, d)) in [(2, 2), (2, 4), (4, 4), (4, 6), (8, 4)].iter().enumerate() {
        run(flow_config(Variant::Mlp, *h, *d, 28, 16), 200, 50 + i as u64);
    }
    // Transformer variant at H=8, D=4, K=18
    run(flow_config(Variant::Transformer, 8, 4, 18, 16), 1000, 60);
    assert!(
        worst < 1e-8,
        "round-trip error {worst:.3e} exceeds 1e-8 over {pairs} pairs"
    );
    format!("{pairs} sample/forward round trips, max latent error {worst:.2e}")
}

// ---------------------------------------------------------------------------
// criterion 2: analytic logdet vs numeric Jacobian
// ---------------------------------------------------------------------------

fn criterion_logdet_oracle() -> String {
    let shapes_mlp = [(1usize, 4usize), (2, 3), (2, 4), (1, 6), (1, 8)];
    let shapes_tf = [(2usize, 2usize), (2, 3), (2, 4), (4, 2)];
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let depth = 1 + (case % 4) as usize;
        let (variant, (h, d)) = if case % 2 == 0 {
            (Variant::Mlp, shapes_mlp[(case / 2) as usize % shapes_mlp.len()])
        } else {
            (Variant::Transformer, shapes_tf[(case / 2) as usize % shapes_tf.len()])
        };
        let n = h * d;
        let mut dec = NinaDecoder::new(flow_config(variant, h, d, depth, 8), 70 + case);
        let mut r = rng(170 + case);
        // 0.15 keeps the stacked Jacobians well-conditioned; at 0.3 the
        // condition number reaches ~3e6 and the numeric oracle's own
        // precision floor crosses the 1e-5 tolerance
        perturb(&mut dec, 0.15, &mut r);
        let ctx = rand_ctx(2, 3, &mut r);
        let a: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let f = |a: &[f64]| -> Vec<f64> {
            let mut t = Tape::no_grad();
            let (z0, _) = dec.stack.forward_sample(&mut t, &dec.store, a, &ctx).unwrap();
            t.value(z0).data.clone()
        };
        // 5-point stencil: O(step^4) truncation with step large enough to
        // keep roundoff small, since ln|det| amplifies entry error by the
        // Jacobian's condition number
        let step = 3e-5;
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let eval = |offset: f64| {
                let mut ax = a.clone();
                ax[j] += offset;
                f(&ax)
            };
            let (f2p, fp) = (eval(2.0 * step), eval(step));
            let (fm, f2m) = (eval(-step), eval(-2.0 * step));
            for i in 0..n {
                jac[(i, j)] =
                    (-f2p[i] + 8.0 * fp[i] - 8.0 * fm[i] + f2m[i]) / (12.0 * step);
            }
        }
        let oracle = jac.determinant().abs().ln();
        let mut t = Tape::no_grad();
        let (_, ld) = dec.stack.forward_sample(&mut t, &dec.store, &a, &ctx).unwrap();
        let diff = (t.value(ld).item() - oracle).abs();
        assert!(
            diff < 1e-5,
            "case {case} ({variant}, n={n}, K={depth}): logdet off by {diff:.3e}"
        );
        worst = worst.max(diff);
    }
    format!("100 cases, max |analytic - numeric-Jacobian logdet| = {worst:.2e}")
}

// ---------------------------------------------------------------------------
// criterion 3: exp(log_prob) integrates to 1 on a 2-D grid
// ---------------------------------------------------------------------------

/// Riemann sum of exp(log_prob) over [-6,6]^2 with step 0.02, batched one
/// grid column (601 points) per forward pass.
fn integrate_density(dec: &NinaDecoder, ctx: &Tensor) -> f64 {
    let (lo, step, axis) = (-6.0, 0.02, 601usize);
    let pooled = pool_context(ctx);
    let c = pooled.cols();
    let mut hrows = Vec::with_capacity(axis * c);
    for _ in 0..axis {
        hrows.extend_from_slice(&pooled.data);
    }
    let hmat = Tensor::matrix(axis, c, hrows);
    let mut total = 0.0;
    for i in 0..axis {
        let x = lo + i as f64 * step;
        let mut data = Vec::with_capacity(axis * 2);
        for j in 0..axis {
            data.push(x);
            data.push(lo + j as f64 * step);
        }
        let mut tape = Tape::no_grad();
        let a = tape.leaf(Tensor::matrix(axis, 2, data));
        let h = tape.leaf(hmat.clone());
        let (z0, ld) = dec
            .stack
            .forward_element(&mut tape, &dec.store, a, h)
            .unwrap();
        let z = tape.value(z0);
        let lds = &tape.value(ld).data;
        for r in 0..axis {
            let lp = std_normal_logpdf(&z.data[r * 2..(r + 1) * 2]) + lds[r];
            total += lp.exp();
        }
    }
    total * step * step
}

fn criterion_density_normalization(dir: &std::path::Path) -> String {
    // identity decoder: the density is exactly the standard normal
    let mut cfg = flow_config(Variant::Mlp, 1, 2, 3, 8);
    cfg.ctx_dim = TaskSpec::bimodal2d().ctx_dim;
    let ident = NinaDecoder::new_identity_plu(cfg, 0);
    let spec = TaskSpec::bimodal2d();
    let ctx = spec.contexts[0].tokens.clone();
    let mass_ident = integrate_density(&ident, &ctx);
    assert!(
        (mass_ident - 1.0).abs() < 0.02,
        "identity decoder mass {mass_ident:.5}"
    );

    // ~2k-step-trained decoder on the 2-D mixture
    let run = RunConfig {
        task: "bimodal2d".into(),
        model: ModelKind::NinaMlp,
        depth: 6,
        hidden: 32,
        layers_per_flow: 2,
        epochs: 9, // 18000 train samples / batch 80 -> 225 steps/epoch
        out_dir: dir.join("quad").to_string_lossy().into_owned(),
        ..RunConfig::default()
    };
    run.validate().unwrap();
    let art = harness::cmd_train(&run).unwrap();
    let ckpt = Checkpoint::load(&art.checkpoint_path).unwrap();
    let Model::Nina(dec) = &ckpt.model else { panic!("expected flow checkpoint") };
    let mass_trained = integrate_density(dec, &ctx);
    assert!(
        (mass_trained - 1.0).abs() < 0.02,
        "trained decoder mass {mass_trained:.5}"
    );
    format!("grid mass: identity {mass_ident:.5}, trained {mass_trained:.5}")
}

// ---------------------------------------------------------------------------
// criterion 4: gradients of every parameter vs central finite differences
// ---------------------------------------------------------------------------

fn criterion_gradient_check() -> String {
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for variant in [Variant::Mlp, Variant::Transformer] {
        let mut cfg = flow_config(variant, 2, 2, 2, 8);
        cfg.ctx_dim = 4;
        cfg.layers_per_flow = if variant == Variant::Mlp { 2 } else { 1 };
        let mut dec = NinaDecoder::new(cfg, 90);
        let mut r = rng(91);
        perturb(&mut dec, 0.2, &mut r);
        let samples: Vec<TaskSample> = (0..3)
            .map(|i| TaskSample {
                h: rand_ctx(2, 4, &mut r),
                a: Tensor::matrix(2, 2, (0..4).map(|_| r.gen::<f64>() - 0.5).collect()),
                mode_id: 0,
                context_id: i,
            })
            .collect();
        let refs: Vec<&TaskSample> = samples.iter().collect();

        let mut tape = Tape::new();
        let loss = dec.nll_loss(&mut tape, &refs, None).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();

        let eval = |dec: &NinaDecoder| -> f64 {
            let mut t = Tape::no_grad();
            let l = dec.nll_loss(&mut t, &refs, None).unwrap();
            t.value(l).item()
        };
        let h = 1e-5;
        for (pid, g) in &grads {
            for i in 0..g.data.len() {
                let orig = dec.store.get(*pid).data[i];
                dec.store.get_mut(*pid).data[i] = orig + h;
                let fp = eval(&dec);
                dec.store.get_mut(*pid).data[i] = orig - h;
                let fm = eval(&dec);
                dec.store.get_mut(*pid).data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (g.data[i] - fd).abs() / fd.abs().max(1e-3);
                assert!(
                    rel < 1e-4,
                    "{variant} param {} entry {i}: tape {} vs fd {fd} (rel {rel:.2e})",
                    dec.store.entries[pid.0].name,
                    g.data[i]
                );
                worst = worst.max(rel);
                entries += 1;
            }
        }
    }
    format!("{entries} parameter entries over both variants, max rel err {worst:.2e}")
}

// ---------------------------------------------------------------------------
// criterion 5: heldout NLL and success rate on chunked8
// ---------------------------------------------------------------------------

fn chunked8_run(model: ModelKind, dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        task: "chunked8".into(),
        model,
        out_dir: dir.to_string_lossy().into_owned(),
        ..RunConfig::default()
    };
    match model {
        ModelKind::NinaMlp => {
            cfg.depth = 10;
            cfg.hidden = 64;
            cfg.layers_per_flow = 3;
            cfg.epochs = 25;
            // the mlp variant generalizes worse than the transformer here
            // (train NLL dips under the oracle entropy at 20k); doubling the
            // data halves the heldout gap
            cfg.dataset_size = 40000;
        }
        ModelKind::NinaTransformer => {
            cfg.depth = 8;
            cfg.hidden = 32;
            cfg.layers_per_flow = 1;
            cfg.epochs = 18;
        }
        ModelKind::Ddpm => {
            cfg.hidden = 64;
            cfg.layers_per_flow = 3;
            cfg.ddpm_t = 50;
            cfg.epochs = 8;
        }
    }
    cfg.validate().unwrap();
    cfg
}

fn criterion_chunked8(dir: &std::path::Path) -> String {
    let mut lines = Vec::new();
    for model in [ModelKind::NinaMlp, ModelKind::NinaTransformer, ModelKind::Ddpm] {
        let cfg = chunked8_run(model, &dir.join(model.to_string()));
        let t0 = Instant::now();
        let art = harness::cmd_train(&cfg).unwrap();
        let report = harness::cmd_eval(&art.checkpoint_path).unwrap();
        let wall = t0.elapsed().as_secs_f64();
        assert!(wall < 900.0, "{model}: {wall:.0}s exceeds the 15-minute budget");
        match model {
            ModelKind::Ddpm => {
                assert!(
                    report.success_rate >= 0.90,
                    "{model}: success {:.3} < 0.90",
                    report.success_rate
                );
                lines.push(format!("ddpm success {:.3} ({wall:.0}s)", report.success_rate));
            }
            _ => {
                let gap = report.nll_gap.unwrap();
                assert!(gap < 0.5, "{model}: NLL gap {gap:.3} nats >= 0.5");
                assert!(
                    report.success_rate >= 0.95,
                    "{model}: success {:.3} < 0.95",
                    report.success_rate
                );
                lines.push(format!(
                    "{model} gap {gap:.3} nats, success {:.3} ({wall:.0}s)",
                    report.success_rate
                ));
            }
        }
    }
    lines.join("; ")
}

// ---------------------------------------------------------------------------
// criterion 6: noise ablation sweep and the --no-plu / --no-noise paths
// ---------------------------------------------------------------------------

fn ablate_base(dir: &std::path::Path) -> RunConfig {
    // small cells: the sweep's job is structure (grid x seeds -> CSV) and
    // the sigma=0.03 vs 0 comparison, not chasing the oracle entropy
    let cfg = RunConfig {
        task: "chunked8".into(),
        model: ModelKind::NinaMlp,
        depth: 6,
        hidden: 32,
        layers_per_flow: 2,
        epochs: 4,
        dataset_size: 8000,
        out_dir: dir.to_string_lossy().into_owned(),
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    cfg
}

fn criterion_noise_ablation(dir: &std::path::Path) -> String {
    let cfg = ablate_base(dir);
    let path = harness::cmd_ablate(&cfg, AblateAxis::Noise).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("noise,"))
        .collect();
    assert_eq!(rows.len(), 15, "expected 5 sigmas x 3 seeds, got {}", rows.len());
    let mean_nll = |sigma: &str| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|l| l.split(',').nth(1) == Some(sigma))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert_eq!(vals.len(), 3, "sigma {sigma}");
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let at_0 = mean_nll("0");
    let at_003 = mean_nll("0.03");

    // the flag paths must complete end to end
    for (name, set) in [("no-plu", true), ("no-noise", false)] {
        let mut c = ablate_base(&dir.join(name));
        c.epochs = 1;
        c.dataset_size = 1000;
        if set {
            c.no_plu = true;
        } else {
            c.no_noise = true;
        }
        c.validate().unwrap();
        harness::cmd_train(&c).unwrap();
    }
    format!(
        "15-cell sweep written; heldout NLL sigma=0.03: {at_003:.3} vs sigma=0: {at_0:.3} \
         (delta {:+.3}); --no-plu/--no-noise complete",
        at_003 - at_0
    )
}

// ---------------------------------------------------------------------------
// criterion 7: one-shot latency vs matched DDPM across T
// ---------------------------------------------------------------------------

fn criterion_latency(dir: &std::path::Path) -> String {
    let cfg = RunConfig {
        task: "chunked8".into(),
        model: ModelKind::NinaTransformer,
        depth: 18,
        hidden: 32,
        layers_per_flow: 1,
        ddpm_t: 50,
        out_dir: dir.to_string_lossy().into_owned(),
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    let report = harness::cmd_bench(&cfg, 150, 20).unwrap();
    let nina_params = report.results[0].params as f64;
    for r in &report.results[1..] {
        let rel = (r.params as f64 - nina_params).abs() / nina_params;
        assert!(
            rel <= 0.15,
            "{}: params {} vs flow {} ({:.1}% off)",
            r.model_id,
            r.params,
            nina_params,
            rel * 100.0
        );
    }
    let &(_, ratio50) = report
        .ratios
        .iter()
        .find(|(t, _)| *t == 50)
        .expect("T=50 in sweep");
    assert!(ratio50 <= 0.2, "nina/ddpm(T=50) median ratio {ratio50:.3} > 0.2");
    let r2 = report.ddpm_linearity_r2;
    assert!(r2 > 0.95, "ddpm time-vs-T R^2 {r2:.4} <= 0.95");
    format!("median flow/ddpm(T=50) ratio {ratio50:.3}, ddpm linearity R^2 {r2:.4}")
}

// ---------------------------------------------------------------------------
// criterion 8: bit-identical reruns
// ---------------------------------------------------------------------------

fn criterion_determinism(dir: &std::path::Path) -> String {
    let make = |sub: &str| {
        let cfg = RunConfig {
            task: "bimodal2d".into(),
            model: ModelKind::NinaMlp,
            depth: 4,
            hidden: 16,
            layers_per_flow: 2,
            epochs: 1,
            dataset_size: 2000,
            eval_every: 10,
            out_dir: dir.join(sub).to_string_lossy().into_owned(),
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        harness::cmd_train(&cfg).unwrap()
    };
    let a = make("a");
    let b = make("b");

    // metric streams must agree bit-for-bit (wall_ms is clock noise and is
    // not part of the reproducibility contract)
    let events = |p: &std::path::Path| -> Vec<(u64, String, u64)> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["step"].as_u64().unwrap(),
                    v["metric_name"].as_str().unwrap().to_string(),
                    v["value"].as_f64().unwrap().to_bits(),
                )
            })
            .collect()
    };
    let (ea, eb) = (events(&a.record_path), events(&b.record_path));
    assert!(!ea.is_empty(), "no metric events recorded");
    assert_eq!(ea, eb, "metric streams differ between identical runs");

    // sampling from the two checkpoints must agree bit-for-bit
    let sample_bits = |p: &std::path::Path| -> Vec<u64> {
        let ckpt = Checkpoint::load(p).unwrap();
        let Model::Nina(dec) = &ckpt.model else { panic!("expected flow") };
        let spec = TaskSpec::by_name(&ckpt.config.task).unwrap();
        let h = &spec.contexts[0].tokens;
        let mut r = rng(7);
        (0..20)
            .flat_map(|_| dec.sample(h, &mut r).unwrap().data)
            .map(f64::to_bits)
            .collect()
    };
    let (sa, sb) = (sample_bits(&a.checkpoint_path), sample_bits(&b.checkpoint_path));
    assert_eq!(sa, sb, "samples differ between identical runs");
    assert_eq!(
        a.final_loss.to_bits(),
        b.final_loss.to_bits(),
        "final losses differ"
    );
    format!(
        "{} metric events and {} sampled values bit-identical across reruns",
        ea.len(),
        sa.len()
    )
}

// ---------------------------------------------------------------------------

struct Criterion {
    name: &'static str,
    budget_s: f64,
    run: Box<dyn FnOnce() -> String>,
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s);
    let checks: Vec<Criterion> = vec![
        Criterion {
            name: "1-invertibility",
            budget_s: 60.0,
            run: Box::new(criterion_invertibility),
        },
        Criterion {
            name: "2-logdet-oracle",
            budget_s: 60.0,
            run: Box::new(criterion_logdet_oracle),
        },
        Criterion {
            name: "3-density-normalization",
            budget_s: 120.0,
            run: {
                let d = p("quad");
                Box::new(move || criterion_density_normalization(&d))
            },
        },
        Criterion {
            name: "4-gradient-check",
            budget_s: 120.0,
            run: Box::new(criterion_gradient_check),
        },
        Criterion {
            name: "5-chunked8-quality",
            budget_s: 2700.0, // 15 min per model
            run: {
                let d = p("c5");
                Box::new(move || criterion_chunked8(&d))
            },
        },
        Criterion {
            name: "6-noise-ablation",
            budget_s: 600.0,
            run: {
                let d = p("ablate");
                Box::new(move || criterion_noise_ablation(&d))
            },
        },
        Criterion {
            name: "7-latency-bench",
            budget_s: 300.0,
            run: {
                let d = p("bench");
                Box::new(move || criterion_latency(&d))
            },
        },
        Criterion {
            name: "8-determinism",
            budget_s: 120.0,
            run: {
                let d = p("det");
                Box::new(move || criterion_determinism(&d))
            },
        },
    ];

    // e.g. ACCEPTANCE_ONLY=2,7 to iterate on individual criteria
    let filter = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failures = Vec::new();
    for c in checks {
        if let Some(f) = &filter {
            let id = c.name.split('-').next().unwrap();
            if !f.split(',').any(|s| s.trim() == id) {
                continue;
            }
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let wall = t0.elapsed().as_secs_f64();
        // written straight to stderr so the verdict lines survive the test
        // harness's output capture even without --nocapture
        let mut err = std::io::stderr();
        match outcome {
            Ok(detail) if wall <= c.budget_s => {
                writeln!(err, "PASS criterion-{} ({wall:.1}s): {detail}", c.name).unwrap();
            }
            Ok(detail) => {
                writeln!(
                    err,
                    "FAIL criterion-{} ({wall:.1}s): over {:.0}s budget ({detail})",
                    c.name, c.budget_s
                )
                .unwrap();
                failures.push(format!("{} exceeded budget", c.name));
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                writeln!(err, "FAIL criterion-{} ({wall:.1}s): {msg}", c.name).unwrap();
                failures.push(format!("{}: {msg}", c.name));
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
