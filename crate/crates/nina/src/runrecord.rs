//! JSON-lines run records: a header object embedding the full config and
//! code version, then one object per metric event.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Event {
    pub step: u64,
    pub wall_ms: u64,
    pub metric_name: String,
    pub value: f64,
}

pub struct RunRecorder {
    file: Option<BufWriter<File>>,
    pub events: Vec<Event>,
    start: Instant,
}

impl RunRecorder {
    /// `header` is serialized as the first line; pass the run config here.
    pub fn new(path: Option<&Path>, header: &serde_json::Value) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let mut f = BufWriter::new(File::create(p)?);
                let line = serde_json::json!({
                    "code_version": CODE_VERSION,
                    "config": header,
                });
                serde_json::to_writer(&mut f, &line)?;
                f.write_all(b"\n")?;
                Some(f)
            }
            None => None,
        };
        Ok(RunRecorder {
            file,
            events: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn in_memory() -> Self {
        RunRecorder {
            file: None,
            events: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn log(&mut self, step: u64, metric_name: &str, value: f64) -> Result<()> {
        let ev = Event {
            step,
            wall_ms: self.start.elapsed().as_millis() as u64,
            metric_name: metric_name.to_string(),
            value,
        };
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &ev)?;
            f.write_all(b"\n")?;
        }
        self.events.push(ev);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.events
            .iter()
            .rev()
            .find(|e| e.metric_name == metric)
            .map(|e| e.value)
    }
}
