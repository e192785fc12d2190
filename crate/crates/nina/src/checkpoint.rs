//! Self-describing JSON checkpoints. A checkpoint carries the run config,
//! seed, code version, and the full model (architecture including frozen
//! split permutations and PLU P matrices, plus every parameter tensor).
//! serde_json round-trips f64 exactly, so reloading reproduces log_prob
//! bit-identically on the same build.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ddpm::DdpmDecoder;
use crate::decoder::NinaDecoder;
use crate::error::Result;
use crate::runrecord::CODE_VERSION;

#[derive(Serialize, Deserialize)]
pub enum Model {
    Nina(NinaDecoder),
    Ddpm(DdpmDecoder),
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub code_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: Model) -> Self {
        Checkpoint {
            code_version: CODE_VERSION.to_string(),
            seed: config.seed,
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
