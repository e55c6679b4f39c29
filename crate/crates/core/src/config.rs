//! Run configuration, read from TOML and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pruning::{attach_method, balance_lambdas, Method, RegWeights};
use crate::trainer::{OptimConfig, PruneSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            warmup: 5,
            reps: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub method: Method,
    /// Square block side (attention for hybrid methods, both families for
    /// `block`); `None` uses the method default.
    pub block_size: Option<usize>,
    /// λ at the end of the ramp for single runs; sweep center otherwise.
    pub lambda: f64,
    /// Explicit sweep values. Empty means `lambda × lambda_multipliers`.
    pub lambdas: Vec<f64>,
    pub lambda_multipliers: Vec<f64>,
    /// Search the sweep center with short runs aiming at `target_density`.
    pub calibrate: bool,
    pub target_density: f64,
    pub calibration_epochs: usize,
    /// Sweep over block sizes; empty means `[block_size]`.
    pub block_sizes: Vec<usize>,
    /// Sweep over methods; empty means `[method]`.
    pub methods: Vec<Method>,
    /// Scale λ per family by relative group size.
    pub balance: bool,
    pub alpha: f64,
    pub temperature: f64,
    pub teacher_epochs: usize,
    pub fill_steps: usize,
    pub rewind: bool,
    pub seeds: Vec<u64>,
    pub schedule: PruneSchedule,
    pub optim: OptimConfig,
    pub timing: TimingConfig,
    /// Worker threads for data-parallel evaluation and sweeps (0 = all).
    pub threads: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            method: Method::Hybrid,
            block_size: None,
            lambda: 0.01,
            lambdas: Vec::new(),
            lambda_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            calibrate: true,
            target_density: 0.3,
            calibration_epochs: 2,
            block_sizes: Vec::new(),
            methods: Vec::new(),
            balance: true,
            alpha: 0.5,
            temperature: 2.0,
            teacher_epochs: 3,
            fill_steps: 200,
            rewind: false,
            seeds: vec![0],
            schedule: PruneSchedule::default(),
            optim: OptimConfig::default(),
            timing: TimingConfig::default(),
            threads: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.schedule.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.task.seq_len > self.model.max_len {
            return fail(format!(
                "task seq_len {} exceeds model max_len {}",
                self.task.seq_len, self.model.max_len
            ));
        }
        if self.model.vocab_size < 256 {
            return fail("byte-level tasks need vocab_size >= 256".into());
        }
        if self.task.kind != TaskKind::Tsv && self.model.n_classes != 2 {
            return fail("synthetic tasks are binary; set model.n_classes = 2".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.temperature > 0.0) {
            return fail("alpha must be in [0, 1] and temperature > 0".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.optim.batch_size == 0 {
            return fail("optim.batch_size must be positive".into());
        }
        if !(self.target_density > 0.0 && self.target_density < 1.0) {
            return fail("target_density must be in (0, 1)".into());
        }
        for &l in self.lambdas.iter().chain([&self.lambda]) {
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("lambda {l} must be finite and >= 0"));
            }
        }
        if self.lambdas.is_empty() && self.lambda_multipliers.iter().any(|m| !(*m >= 0.0)) {
            return fail("lambda multipliers must be >= 0".into());
        }
        if self.timing.batch == 0 || self.timing.reps == 0 {
            return fail("timing batch and reps must be positive".into());
        }
        // block geometry is checked by attaching each requested pattern to a
        // model skeleton
        let skeleton = Model::<f32>::new(self.model.clone(), 0)?;
        for &method in &self.method_list() {
            for bs in self.block_size_list() {
                let mut m = skeleton.clone();
                attach_method(&mut m, method, bs)?;
            }
        }
        Ok(())
    }

    pub fn method_list(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.method]
        } else {
            self.methods.clone()
        }
    }

    pub fn block_size_list(&self) -> Vec<Option<usize>> {
        if self.block_sizes.is_empty() {
            vec![self.block_size]
        } else {
            self.block_sizes.iter().map(|&b| Some(b)).collect()
        }
    }

    /// Sweep λ values around `center`.
    pub fn lambda_list(&self, center: f64) -> Vec<f64> {
        if self.lambdas.is_empty() {
            self.lambda_multipliers.iter().map(|m| m * center).collect()
        } else {
            self.lambdas.clone()
        }
    }

    /// Per-family λ at `lambda_end = 1` for a method and block size.
    pub fn reg_unit(&self, method: Method, block: Option<usize>) -> RegWeights {
        if self.balance {
            balance_lambdas(1.0, (&self.model).into(), method.pattern(block))
        } else {
            RegWeights::uniform(1.0)
        }
    }
}
