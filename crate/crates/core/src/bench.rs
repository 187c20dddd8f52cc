//! Host-side latency measurement: load time, then per-run wall time after a
//! few discarded warmup runs.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::parity::{ArtifactStage, Backend, ParityError};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 20;
pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_BUDGET_MS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("monotonic clock unavailable: {0}")]
    ClockUnavailable(String),
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("target {target} failed: {message}")]
    Target { target: String, message: String },
    #[error(transparent)]
    Parity(#[from] ParityError),
}

impl BenchError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            BenchError::ClockUnavailable(_) | BenchError::Target { .. } => ErrorKind::Other,
            BenchError::NoRuns => ErrorKind::Config,
            BenchError::Parity(e) => e.kind(),
        }
    }
}

/// Microsecond timestamps from a monotonic source.
pub trait Clock {
    fn now_us(&mut self) -> Result<u64, BenchError>;
}

pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_us(&mut self) -> Result<u64, BenchError> {
        Ok(self.origin.elapsed().as_micros() as u64)
    }
}

/// Replays fixed timestamps; fails once they run out.
#[derive(Debug, Clone)]
pub struct ScriptedClock {
    ticks: VecDeque<u64>,
}

impl ScriptedClock {
    pub fn new(ticks: impl IntoIterator<Item = u64>) -> Self {
        ScriptedClock {
            ticks: ticks.into_iter().collect(),
        }
    }

    /// Timestamps that make load take `init_us` and run `i` take
    /// `durations_us[i]`, with zero-length gaps in between.
    pub fn from_durations(init_us: u64, durations_us: &[u64]) -> Self {
        let mut t = 0;
        let mut ticks = vec![t];
        t += init_us;
        ticks.push(t);
        for d in durations_us {
            ticks.push(t);
            t += d;
            ticks.push(t);
        }
        Self::new(ticks)
    }
}

impl Clock for ScriptedClock {
    fn now_us(&mut self) -> Result<u64, BenchError> {
        self.ticks
            .pop_front()
            .ok_or_else(|| BenchError::ClockUnavailable("scripted clock exhausted".into()))
    }
}

pub trait BenchTarget {
    fn name(&self) -> String;
    /// Loads the artifact and allocates what the first inference needs.
    fn load(&mut self) -> Result<(), BenchError>;
    fn infer(&mut self, x: &Tensor) -> Result<(), BenchError>;
}

/// An exported artifact run through its backend.
pub struct ArtifactTarget {
    pub stage: ArtifactStage,
    pub path: PathBuf,
    backend: Option<Backend>,
}

impl ArtifactTarget {
    pub fn new(stage: ArtifactStage, path: impl Into<PathBuf>) -> Self {
        ArtifactTarget {
            stage,
            path: path.into(),
            backend: None,
        }
    }
}

impl BenchTarget for ArtifactTarget {
    fn name(&self) -> String {
        self.stage.name().to_string()
    }

    fn load(&mut self) -> Result<(), BenchError> {
        self.backend = Some(Backend::load(self.stage, &self.path)?);
        Ok(())
    }

    fn infer(&mut self, x: &Tensor) -> Result<(), BenchError> {
        let b = self.backend.as_mut().ok_or_else(|| BenchError::Target {
            target: self.stage.name().to_string(),
            message: "inference before load".into(),
        })?;
        b.infer(x)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub artifact: String,
    pub runs: usize,
    pub warmup: usize,
    pub init_ms: f64,
    pub avg_ms: f64,
    /// Population standard deviation.
    pub std_ms: f64,
    pub per_run_ms: Vec<f64>,
    pub input_shape: Vec<usize>,
    pub host_descriptor: String,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "artifact        {}\ninput shape     {:?}\nruns            {} (+{} warmup)\ninit            {:.3} ms\naverage         {:.3} ms\nstd (pop.)      {:.3} ms\nhost            {}\n",
            self.artifact,
            self.input_shape,
            self.runs,
            self.warmup,
            self.init_ms,
            self.avg_ms,
            self.std_ms,
            self.host_descriptor
        )
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn host_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{}-{}, {cores} logical cores, single-threaded",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Fixed standard-normal input reused across runs.
pub fn bench_input(side: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    let data = (0..3 * side * side).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(&[1, 3, side, side], data).expect("input shape")
}

pub fn benchmark(
    target: &mut dyn BenchTarget,
    clock: &mut dyn Clock,
    input: &Tensor,
    config: BenchConfig,
) -> Result<BenchReport, BenchError> {
    if config.runs == 0 {
        return Err(BenchError::NoRuns);
    }
    let t0 = clock.now_us()?;
    target.load()?;
    let t1 = clock.now_us()?;
    for _ in 0..config.warmup {
        target.infer(input)?;
    }
    let mut per_run_ms = Vec::with_capacity(config.runs);
    for _ in 0..config.runs {
        let a = clock.now_us()?;
        target.infer(input)?;
        let b = clock.now_us()?;
        per_run_ms.push(b.saturating_sub(a) as f64 / 1000.0);
    }
    let (avg_ms, std_ms) = mean_std(&per_run_ms);
    Ok(BenchReport {
        artifact: target.name(),
        runs: config.runs,
        warmup: config.warmup,
        init_ms: t1.saturating_sub(t0) as f64 / 1000.0,
        avg_ms,
        std_ms,
        per_run_ms,
        input_shape: input.shape().to_vec(),
        host_descriptor: host_descriptor(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget_ms: f64,
    pub avg_ms: f64,
    pub pass: bool,
    /// `budget - avg`; negative when over budget.
    pub margin_ms: f64,
}

impl std::fmt::Display for BudgetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: average {:.3} ms vs budget {:.3} ms (margin {:+.3} ms)",
            if self.pass { "PASS" } else { "FAIL" },
            self.avg_ms,
            self.budget_ms,
            self.margin_ms
        )
    }
}

/// Passes when the average is at or below the budget.
pub fn report_budget(report: &BenchReport, budget_ms: f64) -> BudgetSummary {
    BudgetSummary {
        budget_ms,
        avg_ms: report.avg_ms,
        pass: report.avg_ms <= budget_ms,
        margin_ms: budget_ms - report.avg_ms,
    }
}
