//! Grids over (target, rule, group size) on top of a base run config.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{GroupTarget, OptimizerKind, RuleKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;
use crate::train::run_training;

pub const SWEEP_CSV_HEADER: [&str; 8] =
    ["target", "rule", "group_size", "repetition", "final_val_loss", "best_val_loss", "steps", "diverged"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: SweepAxes,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Worker count; the CLI flag overrides it.
    #[serde(default = "one")]
    pub parallel: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub target: Vec<GroupTarget>,
    pub rule: Vec<RuleKind>,
    pub group_size: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepCell {
    pub target: GroupTarget,
    pub rule: RuleKind,
    pub group_size: usize,
    pub repetition: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: GroupTarget,
    pub rule: RuleKind,
    pub group_size: usize,
    pub repetition: usize,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub steps: u64,
    pub diverged: bool,
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Cells in target, rule, group size, repetition order.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        let a = &self.axes;
        if a.target.is_empty() || a.rule.is_empty() || a.group_size.is_empty() || self.repetitions == 0 {
            return Err(HarnessError::Config("empty sweep: every axis and repetitions must be non-empty".into()));
        }
        let mut cells = Vec::new();
        for &target in &a.target {
            for &rule in &a.rule {
                for &group_size in &a.group_size {
                    for repetition in 0..self.repetitions {
                        cells.push(SweepCell { target, rule, group_size, repetition });
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Cells with their validated run configs.
    pub fn plan(&self, base: &RunConfig) -> Result<Vec<(SweepCell, RunConfig)>> {
        if self.parallel == 0 {
            return Err(HarnessError::Config("sweep parallel must be at least 1".into()));
        }
        self.cells()?
            .into_iter()
            .map(|cell| {
                let mut c = base.clone();
                c.optimizer.kind = OptimizerKind::MuonGroup;
                c.grouping.target = cell.target;
                c.grouping.rule = cell.rule;
                c.grouping.group_size = cell.group_size;
                c.validate()?;
                Ok((cell, c))
            })
            .collect()
    }
}

/// Runs one cell; divergence is recorded in the row.
pub fn run_cell(cell: SweepCell, config: &RunConfig) -> Result<(SweepRow, Vec<MetricsRecord>)> {
    let out = run_training(config)?;
    let row = SweepRow {
        target: cell.target,
        rule: cell.rule,
        group_size: cell.group_size,
        repetition: cell.repetition,
        final_val_loss: out.final_val_loss,
        best_val_loss: out.best_val_loss,
        steps: out.steps_completed,
        diverged: out.diverged_at.is_some(),
    };
    Ok((row, out.records))
}

/// Runs every cell on `workers` threads. `on_cell` sees each finished cell
/// (index, row, metrics) once; rows come back in plan order.
pub fn run_sweep<F>(plan: &[(SweepCell, RunConfig)], workers: usize, on_cell: F) -> Result<Vec<SweepRow>>
where
    F: Fn(usize, &SweepRow, &[MetricsRecord]) -> Result<()> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, config)) = plan.get(i) else { break };
        let result = run_cell(*cell, config).and_then(|(row, records)| {
            info!(
                "cell {i}: {} {} g={} rep {} -> {:?}{}",
                cell.target.name(),
                cell.rule.name(),
                cell.group_size,
                cell.repetition,
                row.final_val_loss,
                if row.diverged { " (diverged)" } else { "" }
            );
            on_cell(i, &row, &records)?;
            Ok(row)
        });
        slots.lock().expect("no panics while holding the lock")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 1..workers.max(1).min(plan.len().max(1)) {
            s.spawn(work);
        }
        work();
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn write_rows_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
