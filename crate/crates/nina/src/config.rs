//! Flat key-value run configuration. Unknown keys are rejected; overrides
//! arrive as `--set key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ddpm::DdpmConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::flows::Variant;
use crate::taskgen::TaskSpec;
use crate::train::TrainOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NinaMlp,
    NinaTransformer,
    Ddpm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::NinaMlp => "nina-mlp",
            ModelKind::NinaTransformer => "nina-transformer",
            ModelKind::Ddpm => "ddpm",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub model: ModelKind,
    /// Flow depth K (nina) / denoiser reuse depth is ddpm_t for ddpm.
    pub depth: usize,
    pub hidden: usize,
    /// Layers per flow (MLP depth / attention block pairs), the paper's N.
    pub layers_per_flow: usize,
    pub sigma_noise: f64,
    pub no_plu: bool,
    pub no_noise: bool,
    pub ddpm_t: usize,
    pub ddpm_family: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: String,
    pub dataset_size: usize,
    pub dataset_file: String,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "chunked8".into(),
            model: ModelKind::NinaMlp,
            depth: 10,
            hidden: 64,
            layers_per_flow: 3,
            sigma_noise: 0.03,
            no_plu: false,
            no_noise: false,
            ddpm_t: 50,
            ddpm_family: Variant::Transformer,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            epochs: 10,
            batch: 80,
            seed: 0,
            out_dir: "runs/out".into(),
            dataset_size: 20000,
            dataset_file: String::new(),
            eval_every: 200,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{s}': expected key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
        }
        match key {
            "task" => self.task = value.to_string(),
            "model" => {
                self.model = match value {
                    "nina-mlp" => ModelKind::NinaMlp,
                    "nina-transformer" => ModelKind::NinaTransformer,
                    "ddpm" => ModelKind::Ddpm,
                    _ => return Err(Error::Config(format!("unknown model '{value}'"))),
                }
            }
            "depth" => self.depth = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "layers_per_flow" => self.layers_per_flow = num(key, value)?,
            "sigma_noise" => self.sigma_noise = num(key, value)?,
            "no_plu" => self.no_plu = num(key, value)?,
            "no_noise" => self.no_noise = num(key, value)?,
            "ddpm_t" => self.ddpm_t = num(key, value)?,
            "ddpm_family" => {
                self.ddpm_family = match value {
                    "mlp" => Variant::Mlp,
                    "transformer" => Variant::Transformer,
                    _ => return Err(Error::Config(format!("unknown ddpm_family '{value}'"))),
                }
            }
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "dataset_size" => self.dataset_size = num(key, value)?,
            "dataset_file" => self.dataset_file = value.to_string(),
            "eval_every" => self.eval_every = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        TaskSpec::by_name(&self.task)?;
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.hidden == 0 || (self.model == ModelKind::NinaTransformer && self.hidden % 4 != 0) {
            return Err(Error::Config(
                "hidden must be > 0 (and a multiple of 4 for attention variants)".into(),
            ));
        }
        if self.layers_per_flow == 0 {
            return Err(Error::Config("layers_per_flow must be >= 1".into()));
        }
        if self.sigma_noise < 0.0 || !self.sigma_noise.is_finite() {
            return Err(Error::Config("sigma_noise must be finite and >= 0".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if self.ddpm_t == 0 {
            return Err(Error::Config("ddpm_t must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_sigma(&self) -> f64 {
        if self.no_noise {
            0.0
        } else {
            self.sigma_noise
        }
    }

    pub fn decoder_config(&self, spec: &TaskSpec) -> Result<DecoderConfig> {
        let variant = match self.model {
            ModelKind::NinaMlp => Variant::Mlp,
            ModelKind::NinaTransformer => Variant::Transformer,
            ModelKind::Ddpm => {
                return Err(Error::Config("decoder_config on a ddpm run".into()))
            }
        };
        Ok(DecoderConfig {
            variant,
            horizon: spec.horizon,
            action_dim: spec.action_dim,
            ctx_dim: spec.ctx_dim,
            depth: self.depth,
            hidden: self.hidden,
            layers_per_flow: self.layers_per_flow,
            sigma_noise: self.effective_sigma(),
            use_plu: !self.no_plu,
        })
    }

    pub fn ddpm_config(&self, spec: &TaskSpec) -> DdpmConfig {
        DdpmConfig {
            family: self.ddpm_family,
            horizon: spec.horizon,
            action_dim: spec.action_dim,
            ctx_dim: spec.ctx_dim,
            hidden: self.hidden,
            blocks: self.layers_per_flow,
            t_steps: self.ddpm_t,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}
