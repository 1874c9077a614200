//! Experiment configuration (TOML) and the sweep runner.
//!
//! ```toml
//! seed = 7
//! memory_sizes = ["10MB", "1GB"]
//! techniques = ["proc", "epml"]
//!
//! [workload]
//! kind = "microbench"
//! rounds = 2
//!
//! [scheduler]
//! quantum_us = 10000
//! competitors = 1
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpointer;
use crate::cost::Calibration;
use crate::guest::SchedulerConfig;
use crate::hypervisor::DEFAULT_RING_CAPACITY;
use crate::migration::{coexistence_experiment, CoexistReport, MigrationJob, PeerSpec};
use crate::sim::machine::{run_single, Vm, VmConfig};
use crate::size::ByteSize;
use crate::tracker::{Technique, TrackerConfig, TrackerPhaseReport};
use crate::workload::{KvWorkloadSpec, MicroBenchSpec, Workload};

/// Default simulated time limit: 60 s.
pub const DEFAULT_HORIZON_US: f64 = 60e6;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("calibration {path}: {msg}")]
    Calibration { path: String, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadConfig {
    /// One write per page per round over each memory size.
    Microbench {
        #[serde(default = "one")]
        rounds: u32,
        #[serde(default)]
        churn_rate: f64,
        #[serde(default)]
        checkpoint_each_round: bool,
    },
    /// Zipf-skewed key-value writes; footprint = memory size, or the
    /// engine's footprint when no sizes are given.
    Kv {
        #[serde(default)]
        engine: Option<String>,
        #[serde(default = "default_skew")]
        write_skew: f64,
        #[serde(default)]
        churn_rate: f64,
        #[serde(default = "default_requests")]
        requests: u64,
        #[serde(default = "default_request_us")]
        request_us: f64,
        #[serde(default)]
        checkpoint_every: u64,
    },
}

fn one() -> u32 {
    1
}
fn default_skew() -> f64 {
    KvWorkloadSpec::default().write_skew
}
fn default_requests() -> u64 {
    KvWorkloadSpec::default().requests
}
fn default_request_us() -> f64 {
    KvWorkloadSpec::default().request_us
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Microbench {
            rounds: 1,
            churn_rate: 0.0,
            checkpoint_each_round: false,
        }
    }
}

impl WorkloadConfig {
    pub fn build(&self, memory: ByteSize, write_us: f64, seed: u64) -> Workload {
        match self {
            WorkloadConfig::Microbench {
                rounds,
                churn_rate,
                checkpoint_each_round,
            } => MicroBenchSpec {
                memory,
                rounds: *rounds,
                churn_rate: *churn_rate,
                checkpoint_each_round: *checkpoint_each_round,
            }
            .build(write_us, seed),
            WorkloadConfig::Kv {
                write_skew,
                churn_rate,
                requests,
                request_us,
                checkpoint_every,
                ..
            } => KvWorkloadSpec {
                footprint: memory,
                write_skew: *write_skew,
                churn_rate: *churn_rate,
                requests: *requests,
                request_us: *request_us,
                checkpoint_every: *checkpoint_every,
            }
            .build(write_us, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            formats: vec![Format::Csv],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Plotdata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    pub job: MigrationJob,
    pub peer: PeerSpec,
    pub model_check_depth: usize,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        MigrationConfig {
            job: MigrationJob::default(),
            peer: PeerSpec::default(),
            model_check_depth: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub vcpus: u32,
    pub memory_sizes: Vec<ByteSize>,
    pub techniques: Vec<Technique>,
    pub workload: WorkloadConfig,
    pub scheduler: SchedulerConfig,
    pub ring_capacity: usize,
    pub collection_interval_us: f64,
    /// Charge the SPML page-table walk on every drain.
    pub walk_each_drain: bool,
    /// Attach the incremental checkpointer as exploitation phase.
    pub checkpoint: bool,
    pub horizon_us: f64,
    pub calibration: Option<PathBuf>,
    pub output: OutputConfig,
    /// Also run the migration coexistence experiment.
    pub migration: Option<MigrationConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            vcpus: 1,
            memory_sizes: vec![ByteSize::mb(100)],
            techniques: Technique::ALL.to_vec(),
            workload: WorkloadConfig::default(),
            scheduler: SchedulerConfig::default(),
            ring_capacity: DEFAULT_RING_CAPACITY,
            collection_interval_us: 1_000.0,
            walk_each_drain: false,
            checkpoint: false,
            horizon_us: DEFAULT_HORIZON_US,
            calibration: None,
            output: OutputConfig::default(),
            migration: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vcpus != 1 {
            return Err(invalid(
                "vcpus",
                format!("only single-vCPU guests are modeled, got {}", self.vcpus),
            ));
        }
        if self.techniques.is_empty() {
            return Err(invalid("techniques", "at least one technique is required"));
        }
        let kv_engine = match &self.workload {
            WorkloadConfig::Kv { engine, .. } => engine.clone(),
            WorkloadConfig::Microbench { .. } => None,
        };
        if let Some(e) = &kv_engine {
            if KvWorkloadSpec::engine(e).is_none() {
                return Err(invalid("workload.engine", format!("unknown engine {e:?}")));
            }
        }
        if self.memory_sizes.is_empty() && kv_engine.is_none() {
            return Err(invalid("memory_sizes", "at least one size is required"));
        }
        if self.memory_sizes.iter().any(|s| s.bytes() == 0) {
            return Err(invalid("memory_sizes", "sizes must be positive"));
        }
        if self.collection_interval_us.is_nan() || self.collection_interval_us <= 0.0 {
            return Err(invalid("collection_interval_us", "must be positive"));
        }
        if self.horizon_us.is_nan() || self.horizon_us < 0.0 {
            return Err(invalid("horizon_us", "must be non-negative"));
        }
        if self.ring_capacity < 2 {
            return Err(invalid("ring_capacity", "must hold at least one block"));
        }
        if self.scheduler.quantum_us.is_nan() || self.scheduler.quantum_us <= 0.0 {
            return Err(invalid("scheduler.quantum_us", "must be positive"));
        }
        if let WorkloadConfig::Kv { write_skew, .. } = &self.workload {
            if write_skew.is_nan() || *write_skew <= 0.0 {
                return Err(invalid("workload.write_skew", "must be positive"));
            }
        }
        Ok(())
    }

    /// Memory sizes to sweep, resolving a key-value engine's footprint.
    pub fn sizes(&self) -> Vec<ByteSize> {
        if !self.memory_sizes.is_empty() {
            return self.memory_sizes.clone();
        }
        match &self.workload {
            WorkloadConfig::Kv { engine: Some(e), .. } => {
                KvWorkloadSpec::engine(e).map(|s| vec![s.footprint]).unwrap_or_default()
            }
            _ => Vec::new(),
        }
    }

    /// Calibration from `override_path`, else the configured file, else
    /// the defaults.
    pub fn calibration(&self, override_path: Option<&Path>) -> Result<Calibration, ConfigError> {
        match override_path.or(self.calibration.as_deref()) {
            None => Ok(Calibration::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Calibration::parse(&text).map_err(|e| ConfigError::Calibration {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })
            }
        }
    }
}

/// One (technique, size) point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub technique: Technique,
    pub memory: ByteSize,
    pub report: TrackerPhaseReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub points: Vec<RunPoint>,
    pub migration: Option<CoexistReport>,
}

/// Runs one sweep point.
pub fn run_point(cfg: &ExperimentConfig, cal: &Arc<Calibration>, t: Technique, memory: ByteSize) -> RunPoint {
    let w = Arc::new(cfg.workload.build(memory, cal.write_us, cfg.seed));
    let mut vc = VmConfig::new(memory);
    vc.sched = cfg.scheduler;
    vc.ring_capacity = cfg.ring_capacity;
    let mut tc = TrackerConfig::new(t);
    tc.collection_interval_us = cfg.collection_interval_us;
    tc.walk_each_drain = cfg.walk_each_drain;
    let mut vm = Vm::new(0, vc, Some(tc), Arc::clone(cal), w);
    if cfg.checkpoint {
        vm = vm.with_exploit(Box::new(Checkpointer::new()));
    }
    RunPoint {
        technique: t,
        memory,
        report: run_single(&mut vm, cfg.horizon_us),
    }
}

/// Runs every (technique, size) point in parallel. Points come back
/// ordered by (technique, size) whatever the thread schedule.
pub fn run(cfg: &ExperimentConfig, cal: &Calibration) -> Result<RunReport, ConfigError> {
    cfg.validate()?;
    cal.table.validate().map_err(|e| ConfigError::Calibration {
        path: "<in memory>".into(),
        msg: e.to_string(),
    })?;
    let cal = Arc::new(cal.clone());
    if cfg.horizon_us == 0.0 {
        return Ok(RunReport::default());
    }
    let mut grid: Vec<(Technique, ByteSize)> = cfg
        .techniques
        .iter()
        .flat_map(|t| cfg.sizes().into_iter().map(move |s| (*t, s)))
        .collect();
    grid.sort();
    grid.dedup();
    let points: Vec<RunPoint> = grid.par_iter().map(|(t, s)| run_point(cfg, &cal, *t, *s)).collect();
    let migration = cfg
        .migration
        .as_ref()
        .map(|m| coexistence_experiment(&m.job, &m.peer, &cal, m.model_check_depth));
    Ok(RunReport { points, migration })
}
