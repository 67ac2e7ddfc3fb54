//! Run-config documents shared by the CLI and the test suites. JSON with
//! unknown fields rejected and an explicit schema version.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskSpec;
use crate::train::OptimSpec;

pub const SCHEMA_VERSION: u32 = 1;

pub fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "schema_version {v} unsupported; this build reads {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

/// Config document for `train`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub optimizer: OptimSpec,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_batch")]
    pub eval_batch_size: usize,
}

fn default_batch() -> usize {
    64
}
fn default_eval_batches() -> usize {
    4
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        self.model.validate()?;
        self.task.validate()?;
        if self.model.vocab != self.task.vocab {
            return Err(Error::Config(format!(
                "model vocab {} != task vocab {}",
                self.model.vocab, self.task.vocab
            )));
        }
        if self.model.seq_len < self.task.seq_len {
            return Err(Error::Config(format!(
                "model seq_len {} shorter than task seq_len {}",
                self.model.seq_len, self.task.seq_len
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainRunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config document for `bench`: a grid of kernel shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRunConfig {
    pub schema_version: u32,
    pub l_q: Vec<usize>,
    pub l_kv: Vec<usize>,
    pub d_h: Vec<usize>,
    pub b_r: Vec<usize>,
    pub b_c: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f64".into()
}

impl BenchRunConfig {
    pub fn cells(&self) -> usize {
        self.l_q.len() * self.l_kv.len() * self.d_h.len() * self.b_r.len() * self.b_c.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.cells() == 0 {
            return Err(Error::Config("empty bench grid".into()));
        }
        if self.cells() > 10_000 {
            return Err(Error::Config(format!(
                "bench grid has {} cells, limit is 10000",
                self.cells()
            )));
        }
        if self.dtype != "f32" && self.dtype != "f64" {
            return Err(Error::Config(format!("unknown dtype {:?}", self.dtype)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BenchRunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config document for `diag`: which checkpoint and which eval batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagRunConfig {
    pub schema_version: u32,
    pub checkpoint: String,
    pub task: TaskSpec,
    #[serde(default = "default_diag_batch")]
    pub batch_size: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_buckets")]
    pub position_buckets: usize,
}

fn default_diag_batch() -> usize {
    4
}
fn default_jitter() -> f64 {
    1e-6
}
fn default_buckets() -> usize {
    8
}

impl DiagRunConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        self.task.validate()?;
        if self.batch_size == 0 || self.position_buckets == 0 {
            return Err(Error::Config("batch size and buckets must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: DiagRunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
