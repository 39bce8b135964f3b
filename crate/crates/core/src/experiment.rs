//! Experiment configuration, LR-transfer sweeps and their output files.
//!
//! A sweep follows a two-phase protocol. Phase 1 trains the base width
//! (`m = 1`) over the LR grid with one global learning rate and freezes the
//! best rate for the input, gain and bias groups. Phase 2 then sweeps the base
//! rate of the hidden and output groups over every width.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{OptimConfig, WdMode};
use crate::schedule::{ScheduleKind, ScheduleSpec, WarmupFactorSpec};
use crate::trainer::{
    train, write_loss_jsonl, write_metric_csv, NetworkConfig, RunResult, TaskConfig, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    /// Defaults to `batch_size / 64`.
    pub probe_batch_size: Option<usize>,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8192,
            probe_batch_size: None,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_frac: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearWarmupLinearDecay,
            warmup_frac: 0.1,
            floor_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub widths: Vec<f64>,
    /// Base learning rates. Empty means `lr_min · 2^k` for `k < lr_count`.
    pub lr_grid: Vec<f64>,
    pub lr_min: f64,
    pub lr_count: usize,
    pub repeats: u64,
    /// Learning rate of input, gain and bias groups in phase 2. Setting it
    /// skips phase 1.
    pub frozen_groups_lr: Option<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![1.0, 4.0, 16.0],
            lr_grid: Vec::new(),
            lr_min: 1e-3,
            lr_count: 7,
            repeats: 1,
            frozen_groups_lr: None,
        }
    }
}

/// Factor-2 log-spaced grid starting at `min`.
pub fn log2_grid(min: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| min * 2f64.powi(k as i32)).collect()
}

impl SweepSection {
    pub fn grid(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            log2_grid(self.lr_min, self.lr_count)
        } else {
            self.lr_grid.clone()
        }
    }
}

/// Contents of a configuration file. Every table and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub task: TaskConfig,
    pub train: TrainSection,
    pub optim: OptimConfig,
    pub schedule: ScheduleSection,
    pub warmup_factor: WarmupFactorSpec,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train_config()?.validate()?;
        let s = &self.sweep;
        if s.widths.iter().any(|&m| !(m >= 1.0)) || s.repeats == 0 {
            return Err(Error::Config("sweep widths must be >= 1 and repeats >= 1".into()));
        }
        if s.grid().iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("sweep learning rates must be positive".into()));
        }
        if let Some(lr) = s.frozen_groups_lr {
            if !(lr > 0.0) {
                return Err(Error::Config("frozen_groups_lr must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.schedule.floor_frac) {
            return Err(Error::Config("floor_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Training configuration with the schedule spanning all steps and
    /// peaking at `optim.eta_base`.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let probe = t.probe_batch_size.unwrap_or((t.batch_size / 64).max(1));
        Ok(TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            probe_batch_size: probe,
            seed: t.seed,
            run_index: 0,
            optim: self.optim.clone(),
            schedule: ScheduleSpec {
                kind: self.schedule.kind,
                total_steps: t.steps,
                warmup_frac: self.schedule.warmup_frac,
                peak: self.optim.eta_base,
                floor: self.schedule.floor_frac * self.optim.eta_base,
            },
            warmup_factor: self.warmup_factor.clone(),
            log_every: t.log_every,
        })
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run_id: String,
    pub phase: u8,
    pub network: NetworkConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunPlan {
    pub fn width(&self) -> f64 {
        self.network.width_multiplier
    }

    pub fn base_lr(&self) -> f64 {
        self.train.optim.eta_base
    }

    /// SHA-256 of the plan's canonical JSON encoding, excluding the run id.
    pub fn config_hash(&self) -> String {
        let payload = serde_json::to_vec(&(&self.network, &self.task, &self.train))
            .expect("plain data serializes");
        Sha256::digest(payload)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// What a runner reports back for one plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub metric_log: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub phase: u8,
    pub m: f64,
    pub base_lr: f64,
    pub wd_mode: WdMode,
    pub repeat: u64,
    pub config_hash: String,
    /// Mean loss over the last 5% of steps; absent for diverged runs.
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub metric_log: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

/// Writes `<run_id>.metrics.csv` and `<run_id>.loss.jsonl` under `dir`.
pub fn write_run_logs(dir: &Path, run_id: &str, run: &RunResult) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let metrics = dir.join(format!("{run_id}.metrics.csv"));
    let losses = dir.join(format!("{run_id}.loss.jsonl"));
    write_metric_csv(&run.rows, std::io::BufWriter::new(fs::File::create(&metrics)?))?;
    write_loss_jsonl(&run.losses, std::io::BufWriter::new(fs::File::create(&losses)?))?;
    Ok((metrics, losses))
}

/// Trains `plan` and optionally writes its logs under `log_dir`.
pub fn execute_plan(plan: &RunPlan, log_dir: Option<&Path>) -> Result<RunOutcome> {
    let run = train(&plan.network, &plan.task, &plan.train)?;
    let (metric_log, loss_log) = match log_dir {
        Some(dir) => {
            let (m, l) = write_run_logs(dir, &plan.run_id, &run)?;
            (Some(m), Some(l))
        }
        None => (None, None),
    };
    Ok(RunOutcome {
        final_loss: run.final_loss(),
        diverged: run.diverged.is_some(),
        metric_log,
        loss_log,
    })
}

fn lr_tag(lr: f64) -> String {
    format!("{lr:e}")
}

fn plan_for(
    cfg: &ExperimentConfig,
    phase: u8,
    m: f64,
    lr: f64,
    frozen: Option<f64>,
    repeat: u64,
) -> Result<RunPlan> {
    let mut network = cfg.network.clone();
    network.width_multiplier = m;
    let mut train = cfg.train_config()?;
    train.optim.eta_base = lr;
    train.optim.eta_frozen = frozen;
    train.schedule.peak = lr;
    train.schedule.floor = cfg.schedule.floor_frac * lr;
    train.run_index = repeat;
    Ok(RunPlan {
        run_id: format!("p{phase}-m{m}-lr{}-r{repeat}", lr_tag(lr)),
        phase,
        network,
        task: cfg.task.clone(),
        train,
    })
}

/// Phase-1 plans: base width, global learning rate.
pub fn phase1_plans(cfg: &ExperimentConfig) -> Result<Vec<RunPlan>> {
    let mut out = Vec::new();
    for lr in cfg.sweep.grid() {
        for r in 0..cfg.sweep.repeats {
            out.push(plan_for(cfg, 1, 1.0, lr, None, r)?);
        }
    }
    Ok(out)
}

/// Phase-2 plans over widths and base learning rates.
pub fn phase2_plans(cfg: &ExperimentConfig, frozen_lr: f64) -> Result<Vec<RunPlan>> {
    let mut out = Vec::new();
    for &m in &cfg.sweep.widths {
        for lr in cfg.sweep.grid() {
            for r in 0..cfg.sweep.repeats {
                out.push(plan_for(cfg, 2, m, lr, Some(frozen_lr), r)?);
            }
        }
    }
    Ok(out)
}

fn run_all<F>(plans: &[RunPlan], runner: &F) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunPlan) -> Result<RunOutcome> + Sync,
{
    // Indexed parallel collect keeps plan order regardless of scheduling.
    let outcomes: Vec<Result<RunOutcome>> = plans.par_iter().map(runner).collect();
    plans
        .iter()
        .zip(outcomes)
        .map(|(plan, outcome)| {
            let o = outcome?;
            Ok(RunRecord {
                run_id: plan.run_id.clone(),
                phase: plan.phase,
                m: plan.width(),
                base_lr: plan.base_lr(),
                wd_mode: plan.train.optim.wd_mode,
                repeat: plan.train.run_index,
                config_hash: plan.config_hash(),
                final_loss: if o.diverged { None } else { o.final_loss },
                diverged: o.diverged,
                metric_log: o.metric_log,
                loss_log: o.loss_log,
            })
        })
        .collect()
}

/// One `(m, base_lr)` cell of a transfer table, aggregated over repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub m: f64,
    pub base_lr: f64,
    pub wd_mode: WdMode,
    pub final_loss: Option<f64>,
    pub diverged: bool,
}

/// Averages repeats per `(m, base_lr, wd_mode)`; a cell is diverged if any
/// of its repeats diverged. Rows are ordered by `m`, then `base_lr`.
pub fn aggregate(records: &[RunRecord]) -> Vec<TransferRow> {
    let mut cells: BTreeMap<(u64, u64, &str), (WdMode, Vec<&RunRecord>)> = BTreeMap::new();
    for r in records {
        // Positive floats order like their bit patterns.
        cells
            .entry((r.m.to_bits(), r.base_lr.to_bits(), r.wd_mode.as_str()))
            .or_insert_with(|| (r.wd_mode, Vec::new()))
            .1
            .push(r);
    }
    cells
        .into_iter()
        .map(|((m, lr, _), (wd_mode, runs))| {
            let diverged = runs.iter().any(|r| r.diverged || r.final_loss.is_none());
            let final_loss = (!diverged).then(|| {
                runs.iter().filter_map(|r| r.final_loss).sum::<f64>() / runs.len() as f64
            });
            TransferRow {
                m: f64::from_bits(m),
                base_lr: f64::from_bits(lr),
                wd_mode,
                final_loss,
                diverged,
            }
        })
        .collect()
}

pub const TRANSFER_HEADER: &str = "m,base_lr,wd_mode,final_loss,diverged";

/// Renders phase-2 records as a transfer table CSV.
pub fn emit_transfer_table(records: &[RunRecord]) -> String {
    let phase2: Vec<RunRecord> = records.iter().filter(|r| r.phase == 2).cloned().collect();
    let mut out = String::from(TRANSFER_HEADER);
    out.push('\n');
    for row in aggregate(&phase2) {
        let loss = row.final_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.m,
            row.base_lr,
            row.wd_mode.as_str(),
            loss,
            u8::from(row.diverged)
        ));
    }
    out
}

pub fn parse_transfer_table(text: &str) -> Result<Vec<TransferRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Config(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRANSFER_HEADER {
        return Err(Error::Config(format!("unexpected header {headers:?}")));
    }
    let bad = |what: &str| Error::Config(format!("bad transfer table field {what}"));
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
            Ok(TransferRow {
                m: num(0)?,
                base_lr: num(1)?,
                wd_mode: rec[2].parse()?,
                final_loss: if rec[3].is_empty() { None } else { Some(num(3)?) },
                diverged: match &rec[4] {
                    "0" => false,
                    "1" => true,
                    other => return Err(bad(other)),
                },
            })
        })
        .collect()
}

/// Phase-1 winner: lowest mean tail loss among non-diverged learning rates,
/// ties going to the smaller rate.
pub fn select_frozen_lr(records: &[RunRecord]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for row in aggregate(records) {
        if let Some(loss) = row.final_loss {
            let better = match best {
                None => true,
                Some((lr, l)) => loss < l || (loss == l && row.base_lr < lr),
            };
            if better {
                best = Some((row.base_lr, loss));
            }
        }
    }
    best.map(|(lr, _)| lr)
        .ok_or_else(|| Error::AllDiverged("phase 1".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub frozen_groups_lr: f64,
    pub phase1: Vec<RunRecord>,
    pub phase2: Vec<RunRecord>,
}

impl SweepResult {
    pub fn transfer_table(&self) -> String {
        emit_transfer_table(&self.phase2)
    }
}

/// Runs the sweep with a custom runner, e.g. a stub in tests.
pub fn run_sweep_with<F>(cfg: &ExperimentConfig, runner: F) -> Result<SweepResult>
where
    F: Fn(&RunPlan) -> Result<RunOutcome> + Sync,
{
    cfg.validate()?;
    let (frozen, phase1) = match cfg.sweep.frozen_groups_lr {
        Some(lr) => (lr, Vec::new()),
        None => {
            let records = run_all(&phase1_plans(cfg)?, &runner)?;
            (select_frozen_lr(&records)?, records)
        }
    };
    let phase2 = run_all(&phase2_plans(cfg, frozen)?, &runner)?;
    Ok(SweepResult {
        frozen_groups_lr: frozen,
        phase1,
        phase2,
    })
}

/// Runs the sweep, writing per-run logs under `log_dir` when given.
pub fn run_sweep(cfg: &ExperimentConfig, log_dir: Option<&Path>) -> Result<SweepResult> {
    run_sweep_with(cfg, |plan| execute_plan(plan, log_dir))
}
