use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trajectory::write_trajectory_csv;

use super::{LossKind, LossRecord, Objective, OptimRun, StageConfig};

pub const LOSS_HISTORY_HEADER: &str = "iteration,stage,loss,data_term,penalty_term";

pub fn write_loss_history_csv<W: Write>(mut out: W, history: &[LossRecord]) -> Result<()> {
    writeln!(out, "{LOSS_HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e}",
            r.iteration,
            r.stage.name(),
            r.loss,
            r.data_term,
            r.penalty_term
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StageEcho<'a> {
    #[serde(flatten)]
    config: &'a StageConfig,
    loss: LossKind,
    first_iteration: usize,
    completed_iterations: usize,
}

#[derive(Serialize)]
struct RunEcho<'a> {
    objective: &'a Objective,
    stages: Vec<StageEcho<'a>>,
}

/// Writes `loss_history.csv`, `stages.toml`, one trajectory CSV per stage
/// boundary (`trajectory_<k>_<stage>.csv`), and `trajectory_final.csv`
/// under `dir`.
pub fn write_run_artifacts(run: &OptimRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_loss_history_csv(BufWriter::new(File::create(dir.join("loss_history.csv"))?), &run.loss_history)?;
    for (k, rec) in run.stage_log.iter().enumerate() {
        let name = format!("trajectory_{k}_{}.csv", rec.config.stage.name());
        write_trajectory_csv(BufWriter::new(File::create(dir.join(name))?), &rec.trajectory)?;
    }
    write_trajectory_csv(BufWriter::new(File::create(dir.join("trajectory_final.csv"))?), &run.trajectory)?;
    let echo = RunEcho {
        objective: &run.objective,
        stages: run
            .stage_log
            .iter()
            .map(|r| StageEcho {
                config: &r.config,
                loss: r.loss,
                first_iteration: r.first_iteration,
                completed_iterations: r.iterations,
            })
            .collect(),
    };
    let text = toml::to_string(&echo).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("stages.toml"), text)?;
    Ok(())
}
