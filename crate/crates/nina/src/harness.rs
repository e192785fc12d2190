//! Command implementations behind the CLI: train, sample, eval, bench,
//! ablate, dataset export.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::bench::{run_bench, BenchReport, BenchSetup};
use crate::checkpoint::{Checkpoint, Model};
use crate::config::{ModelKind, RunConfig};
use crate::ddpm::DdpmDecoder;
use crate::decoder::NinaDecoder;
use crate::error::{Error, Result};
use crate::runrecord::{RunRecorder, CODE_VERSION};
use crate::taskgen::{self, TaskSample, TaskSpec};
use crate::tensor::Tensor;
use crate::train::{split_dataset, train_ddpm, train_nina};

pub const SUCCESS_RADIUS: f64 = 3.0;
pub const EVAL_SAMPLES_PER_CONTEXT: usize = 200;

fn load_or_generate(cfg: &RunConfig) -> Result<(TaskSpec, Vec<TaskSample>)> {
    if cfg.dataset_file.is_empty() {
        let spec = TaskSpec::by_name(&cfg.task)?;
        let data = taskgen::generate_dataset(&spec, cfg.dataset_size, cfg.seed)?;
        Ok((spec, data))
    } else {
        taskgen::read_dataset(Path::new(&cfg.dataset_file))
    }
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub record_path: PathBuf,
    pub final_loss: f64,
    pub heldout_metric: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let (spec, dataset) = load_or_generate(cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let record_path = out_dir.join("run.jsonl");
    let header = serde_json::to_value(cfg)?;
    let mut rec = RunRecorder::new(Some(&record_path), &header)?;
    let opts = cfg.train_options();

    let (model, outcome) = match cfg.model {
        ModelKind::NinaMlp | ModelKind::NinaTransformer => {
            let mut dec = NinaDecoder::new(cfg.decoder_config(&spec)?, cfg.seed);
            let outcome = train_nina(&mut dec, &dataset, &opts, &mut rec)?;
            (Model::Nina(dec), outcome)
        }
        ModelKind::Ddpm => {
            let mut dec = DdpmDecoder::new(cfg.ddpm_config(&spec), cfg.seed)?;
            let outcome = train_ddpm(&mut dec, &dataset, &opts, &mut rec)?;
            (Model::Ddpm(dec), outcome)
        }
    };
    let checkpoint_path = out_dir.join("checkpoint.json");
    Checkpoint::new(cfg.clone(), model).save(&checkpoint_path)?;
    println!(
        "trained {} on {}: {} steps, final loss {:.6}{}",
        cfg.model,
        cfg.task,
        outcome.steps,
        outcome.final_loss,
        match outcome.heldout_metric {
            Some(m) => format!(", heldout {:.6}", m),
            None => String::new(),
        }
    );
    Ok(TrainArtifacts {
        checkpoint_path,
        record_path,
        final_loss: outcome.final_loss,
        heldout_metric: outcome.heldout_metric,
    })
}

/// Evaluation context for a task: the fixed token block of each context.
pub fn eval_contexts(spec: &TaskSpec) -> Vec<Tensor> {
    spec.contexts.iter().map(|c| c.tokens.clone()).collect()
}

/// Mean success rate over contexts, sampling `per_ctx` chunks each.
pub fn success_of_model(
    model: &Model,
    spec: &TaskSpec,
    per_ctx: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (ci, h) in eval_contexts(spec).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xEC0 ^ ci as u64);
        let mut samples = Vec::with_capacity(per_ctx);
        for _ in 0..per_ctx {
            let chunk = match model {
                Model::Nina(dec) => dec.sample(h, &mut rng)?,
                Model::Ddpm(dec) => dec.sample(h, &mut rng)?,
            };
            samples.push(chunk.data);
        }
        total += taskgen::success_rate(&samples, h, spec, radius);
    }
    Ok(total / spec.contexts.len() as f64)
}

#[derive(Debug, serde::Serialize)]
pub struct EvalReport {
    pub model: String,
    pub params: usize,
    pub heldout_nll: Option<f64>,
    pub oracle_entropy: f64,
    pub nll_gap: Option<f64>,
    pub success_rate: f64,
}

pub fn cmd_eval(ckpt_path: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let (spec, dataset) = load_or_generate(cfg)?;
    let (_, heldout_idx) = split_dataset(dataset.len(), cfg.seed);
    let heldout: Vec<&TaskSample> = heldout_idx.iter().map(|&i| &dataset[i]).collect();
    let entropy = taskgen::oracle_entropy(&spec);

    let (heldout_nll, params) = match &ckpt.model {
        Model::Nina(dec) => {
            let nll = crate::train::heldout_nll(dec, &heldout)?;
            (Some(nll), dec.param_count())
        }
        Model::Ddpm(dec) => (None, dec.param_count()),
    };
    let success = success_of_model(
        &ckpt.model,
        &spec,
        EVAL_SAMPLES_PER_CONTEXT,
        SUCCESS_RADIUS,
        cfg.seed,
    )?;
    let report = EvalReport {
        model: cfg.model.to_string(),
        params,
        heldout_nll,
        oracle_entropy: entropy,
        nll_gap: heldout_nll.map(|n| n - entropy),
        success_rate: success,
    };
    let out = PathBuf::from(&cfg.out_dir).join("eval.json");
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let payload = serde_json::json!({
        "code_version": CODE_VERSION,
        "config": cfg,
        "report": &report,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&payload)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}

pub fn cmd_sample(
    ckpt_path: &Path,
    count: usize,
    seed: u64,
    context: usize,
    out: Option<&Path>,
) -> Result<Vec<Tensor>> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let spec = TaskSpec::by_name(&ckpt.config.task)?;
    if context >= spec.contexts.len() {
        return Err(Error::Invalid(format!(
            "context {context} out of range ({} contexts)",
            spec.contexts.len()
        )));
    }
    let h = spec.contexts[context].tokens.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunks = Vec::with_capacity(count);
    for _ in 0..count {
        let chunk = match &ckpt.model {
            Model::Nina(dec) => dec.sample(&h, &mut rng)?,
            Model::Ddpm(dec) => dec.sample(&h, &mut rng)?,
        };
        chunks.push(chunk);
    }
    let mut lines = String::new();
    for (i, c) in chunks.iter().enumerate() {
        lines.push_str(&serde_json::to_string(&serde_json::json!({
            "index": i,
            "context": context,
            "chunk": c.data,
        }))?);
        lines.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, &lines)?,
        None => print!("{lines}"),
    }
    Ok(chunks)
}

pub fn cmd_bench(cfg: &RunConfig, trials: usize, warmup: usize) -> Result<BenchReport> {
    let spec = TaskSpec::by_name(&cfg.task)?;
    if cfg.model == ModelKind::Ddpm {
        return Err(Error::Config(
            "bench takes a nina model config; the ddpm comparison is built internally".into(),
        ));
    }
    let mut t_values = vec![5usize, 10, 50];
    if !t_values.contains(&cfg.ddpm_t) {
        t_values.push(cfg.ddpm_t);
        t_values.sort_unstable();
    }
    let setup = BenchSetup {
        nina_cfg: cfg.decoder_config(&spec)?,
        spec,
        ddpm_blocks: cfg.layers_per_flow,
        t_values,
        seed: cfg.seed,
        warmup,
        trials,
    };
    let report = run_bench(&setup)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut csv = String::new();
    csv.push_str(&format!("# code_version={CODE_VERSION}\n"));
    csv.push_str(&format!("# config={}\n", serde_json::to_string(cfg)?));
    csv.push_str("# timing: batch size 1, single-threaded, monotonic clock\n");
    csv.push_str("model_id,params,calls_per_sample,p50_ns,p99_ns\n");
    for r in &report.results {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model_id, r.params, r.calls_per_sample, r.p50_ns, r.p99_ns
        ));
    }
    std::fs::write(out_dir.join("bench.csv"), &csv)?;

    println!("{:<22}{:>10}{:>8}{:>14}{:>14}", "model", "params", "calls", "p50 (ns)", "p99 (ns)");
    for r in &report.results {
        println!(
            "{:<22}{:>10}{:>8}{:>14}{:>14}",
            r.model_id, r.params, r.calls_per_sample, r.p50_ns, r.p99_ns
        );
    }
    for (t, ratio) in &report.ratios {
        println!("median ratio nina/ddpm(T={t}): {ratio:.4}");
    }
    println!("ddpm time-vs-T linearity R^2: {:.4}", report.ddpm_linearity_r2);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Noise,
    Depth,
    Hidden,
}

impl std::str::FromStr for AblateAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(AblateAxis::Noise),
            "depth" => Ok(AblateAxis::Depth),
            "hidden" => Ok(AblateAxis::Hidden),
            other => Err(Error::Config(format!("unknown ablation axis '{other}'"))),
        }
    }
}

pub const NOISE_GRID: [f64; 5] = [0.0, 0.01, 0.03, 0.05, 0.1];
pub const DEPTH_GRID: [usize; 4] = [6, 12, 18, 28];
pub const HIDDEN_GRID: [usize; 3] = [16, 64, 256];
pub const NOISE_SEEDS: usize = 3;

/// One trained cell of the sweep grid.
fn run_cell(cfg: &RunConfig) -> Result<(f64, f64, usize, f64)> {
    let (spec, dataset) = load_or_generate(cfg)?;
    let mut rec = RunRecorder::in_memory();
    let opts = cfg.train_options();
    let t0 = Instant::now();
    let mut dec = NinaDecoder::new(cfg.decoder_config(&spec)?, cfg.seed);
    let outcome = train_nina(&mut dec, &dataset, &opts, &mut rec)?;
    let wall = t0.elapsed().as_secs_f64();
    let params = dec.param_count();
    let success = success_of_model(
        &Model::Nina(dec),
        &spec,
        EVAL_SAMPLES_PER_CONTEXT,
        SUCCESS_RADIUS,
        cfg.seed,
    )?;
    Ok((outcome.heldout_metric.unwrap_or(f64::NAN), success, params, wall))
}

pub fn cmd_ablate(cfg: &RunConfig, axis: AblateAxis) -> Result<PathBuf> {
    if cfg.model == ModelKind::Ddpm {
        return Err(Error::Config("ablate sweeps are over nina models".into()));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let name = match axis {
        AblateAxis::Noise => "noise",
        AblateAxis::Depth => "depth",
        AblateAxis::Hidden => "hidden",
    };
    let path = out_dir.join(format!("ablate_{name}.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "# code_version={CODE_VERSION}")?;
    writeln!(f, "# config={}", serde_json::to_string(cfg)?)?;
    writeln!(f, "axis,value,seed,heldout_nll,success_rate,params,train_wall_s")?;

    let mut cells: Vec<(String, RunConfig)> = Vec::new();
    match axis {
        AblateAxis::Noise => {
            for &sigma in &NOISE_GRID {
                for ds in 0..NOISE_SEEDS as u64 {
                    let mut c = cfg.clone();
                    c.sigma_noise = sigma;
                    c.no_noise = false;
                    c.seed = cfg.seed + ds;
                    cells.push((format!("{sigma}"), c));
                }
            }
        }
        AblateAxis::Depth => {
            for &k in &DEPTH_GRID {
                let mut c = cfg.clone();
                c.depth = k;
                cells.push((format!("{k}"), c));
            }
        }
        AblateAxis::Hidden => {
            for &h in &HIDDEN_GRID {
                let mut c = cfg.clone();
                c.hidden = h;
                cells.push((format!("{h}"), c));
            }
        }
    }
    for (value, cell_cfg) in cells {
        cell_cfg.validate()?;
        let (nll, success, params, wall) = run_cell(&cell_cfg)?;
        writeln!(
            f,
            "{name},{value},{},{nll},{success},{params},{wall:.3}",
            cell_cfg.seed
        )?;
        f.flush()?;
        println!("{name}={value} seed={}: heldout_nll={nll:.4} success={success:.3}", cell_cfg.seed);
    }
    if axis == AblateAxis::Noise {
        println!("note: compare heldout_nll at sigma=0.03 vs sigma=0 in {}", path.display());
    }
    Ok(path)
}

pub fn cmd_dataset(task: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = TaskSpec::by_name(task)?;
    let samples = taskgen::generate_dataset(&spec, count, seed)?;
    taskgen::write_dataset(out, &spec, &samples, seed)?;
    println!("wrote {} samples of {task} to {}", samples.len(), out.display());
    Ok(())
}
