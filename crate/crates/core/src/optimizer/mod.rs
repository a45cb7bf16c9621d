//! Trajectory learning: momentum descent on spline control points under a
//! reconstruction or decay objective, followed by per-sample refinement with
//! the trajectory frozen.

mod artifacts;
mod objective;
mod refine;

pub use artifacts::{write_loss_history_csv, write_run_artifacts, LOSS_HISTORY_HEADER};
pub use objective::{
    decay_loss, kinematic_penalty, loss_and_gradient, recon_loss, Gradients, LossKind, LossTerms, Objective,
};
pub use refine::{refine_sample, SampleRefinement};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};
use crate::trajectory::{project_controls, KPoint, Trajectory};

const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReconPretrain,
    Decay,
    PerSample,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::ReconPretrain => "recon_pretrain",
            Stage::Decay => "decay",
            Stage::PerSample => "per_sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Descent steps; for the per-sample stage, the number of regularization
    /// values tried per sample.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Sequences per step; 0 or anything at least the data size means the
    /// full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub kinematic_penalty_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage, iterations: usize, learning_rate: f64) -> Self {
        Self { stage, iterations, learning_rate, batch_size: 0, kinematic_penalty_weight: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(format!("{}: iterations must be at least 1", self.stage.name())));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "{}: learning_rate must be a finite nonnegative number",
                self.stage.name()
            )));
        }
        if !(self.kinematic_penalty_weight >= 0.0) {
            return Err(Error::Config(format!("{}: kinematic_penalty_weight must be nonnegative", self.stage.name())));
        }
        Ok(())
    }
}

/// How the schedule treats the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Reconstruction pre-training, then decay-guided training.
    Full,
    /// Reconstruction objective in both training stages.
    ReconOnly,
    /// Like `Full`, with one mask shared by every frame.
    SingleMask,
    /// No trajectory updates.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: Mode,
    pub recon_pretrain: StageConfig,
    pub decay: StageConfig,
    pub per_sample: StageConfig,
    #[serde(default)]
    pub objective: Objective,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            recon_pretrain: StageConfig::new(Stage::ReconPretrain, 300, 1e-3),
            decay: StageConfig::new(Stage::Decay, 400, 5e-4),
            per_sample: StageConfig::new(Stage::PerSample, 50, 0.0),
            objective: Objective::default(),
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub loss: f64,
    pub data_term: f64,
    pub penalty_term: f64,
}

/// A finished stage: its configuration, the objective it used, where its
/// iterations start in the loss history, and the trajectory it ended with.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub config: StageConfig,
    pub loss: LossKind,
    pub first_iteration: usize,
    pub iterations: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimRun {
    pub trajectory: Trajectory,
    pub loss_history: Vec<LossRecord>,
    pub stage_log: Vec<StageRecord>,
    pub frozen: bool,
    pub objective: Objective,
    pub refinements: Vec<SampleRefinement>,
}

impl OptimRun {
    pub fn new(trajectory: Trajectory, objective: Objective) -> Self {
        Self {
            trajectory,
            loss_history: Vec::new(),
            stage_log: Vec::new(),
            frozen: false,
            objective,
            refinements: Vec::new(),
        }
    }
}

/// Runs one stage on `data`. See [`run_stage_observed`].
pub fn run_stage(run: &mut OptimRun, data: &[WeightedSequence], stage: &StageConfig, loss: LossKind) -> Result<()> {
    run_stage_observed(run, data, stage, loss, |_| {})
}

/// Runs one stage, calling `after_step` with the trajectory after every
/// update.
///
/// Training stages take momentum steps on the control points along the
/// max-normalized loss gradient and project every shot back onto the
/// kinematic constraints. When the trajectory is shared across frames the
/// per-frame gradients are summed and one update is applied to all frames.
///
/// The per-sample stage freezes the trajectory and refines each sequence
/// separately; its loss records carry the sample index as the iteration.
///
/// On a non-finite loss the run keeps the last finite state and an error
/// describing the failure is returned.
pub fn run_stage_observed(
    run: &mut OptimRun,
    data: &[WeightedSequence],
    stage: &StageConfig,
    loss: LossKind,
    mut after_step: impl FnMut(&Trajectory),
) -> Result<()> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("stage needs at least one sequence".into()));
    }
    let first_iteration = run.loss_history.len();
    if stage.stage == Stage::PerSample {
        run.frozen = true;
        for (i, seq) in data.iter().enumerate() {
            let r = refine_sample(&run.trajectory, seq, &run.objective, stage.iterations, None)?;
            run.loss_history.push(LossRecord {
                iteration: first_iteration + i,
                stage: stage.stage,
                loss: r.loss_after.total(),
                data_term: r.loss_after.data,
                penalty_term: r.loss_after.penalty,
            });
            run.refinements.push(r);
        }
        run.stage_log.push(StageRecord {
            config: *stage,
            loss,
            first_iteration,
            iterations: data.len(),
            trajectory: run.trajectory.clone(),
        });
        return Ok(());
    }
    if run.frozen {
        return Err(Error::Frozen);
    }

    let obj = Objective { penalty_weight: stage.kinematic_penalty_weight, ..run.objective };
    let tied = run.trajectory.shared_across_frames();
    let basis = run.trajectory.basis();
    let c = run.trajectory.n_control();
    let per_frame = run.trajectory.n_shots() * c;
    let mut velocity = vec![KPoint::default(); run.trajectory.control_points().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut last_finite = run.loss_history.last().map(|r| r.loss);

    for it in 0..stage.iterations {
        let batch: Vec<&WeightedSequence> = if stage.batch_size == 0 || stage.batch_size >= data.len() {
            data.iter().collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, data.len(), stage.batch_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &data[i]).collect()
        };
        let (terms, grad) = loss_and_gradient(&run.trajectory, &batch, loss, &obj)?;
        let finite = terms.total().is_finite() && grad.controls.iter().all(|g| g.kx.is_finite() && g.ky.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                stage: stage.stage.name().to_string(),
                iteration: first_iteration + it,
                last_finite,
            });
        }
        last_finite = Some(terms.total());
        run.loss_history.push(LossRecord {
            iteration: first_iteration + it,
            stage: stage.stage,
            loss: terms.total(),
            data_term: terms.data,
            penalty_term: terms.penalty,
        });
        if stage.learning_rate == 0.0 {
            after_step(&run.trajectory);
            continue;
        }

        let mut g = grad.controls;
        if tied {
            let mut sum = vec![KPoint::default(); per_frame];
            for frame in g.chunks(per_frame) {
                for (s, v) in sum.iter_mut().zip(frame) {
                    s.kx += v.kx;
                    s.ky += v.ky;
                }
            }
            g = sum.iter().copied().cycle().take(g.len()).collect();
        }
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.kx.abs()).max(v.ky.abs()));
        let inv = if gmax > 0.0 { 1.0 / gmax } else { 0.0 };

        let mut psi = run.trajectory.control_points().to_vec();
        for ((p, v), gi) in psi.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            v.kx = MOMENTUM * v.kx + gi.kx * inv;
            v.ky = MOMENTUM * v.ky + gi.ky * inv;
            p.kx -= stage.learning_rate * v.kx;
            p.ky -= stage.learning_rate * v.ky;
        }
        let n_shots_total = if tied { run.trajectory.n_shots() } else { psi.len() / c };
        let mut projected = Vec::with_capacity(psi.len());
        for shot in psi[..n_shots_total * c].chunks(c) {
            projected.extend(project_controls(shot, &basis, &obj.limits)?);
        }
        if tied {
            projected = projected.iter().copied().cycle().take(psi.len()).collect();
        }
        run.trajectory = run.trajectory.with_control_points(projected)?;
        after_step(&run.trajectory);
    }
    run.stage_log.push(StageRecord {
        config: *stage,
        loss,
        first_iteration,
        iterations: stage.iterations,
        trajectory: run.trajectory.clone(),
    });
    Ok(())
}

/// Runs the training stages selected by `cfg.mode` from `init` and freezes
/// the trajectory. The per-sample stage is left to the caller, which applies
/// it to evaluation data with [`run_stage`].
pub fn run_schedule(data: &[WeightedSequence], init: &Trajectory, cfg: &ScheduleConfig) -> Result<OptimRun> {
    let start = match cfg.mode {
        Mode::SingleMask => init.tied_to_first_frame()?,
        Mode::Full | Mode::ReconOnly if init.shared_across_frames() => Trajectory::from_control_points(
            init.n_frames(),
            init.n_shots(),
            init.m_points(),
            init.n_control(),
            init.control_points().to_vec(),
            false,
        )?,
        _ => init.clone(),
    };
    let mut run = OptimRun::new(start, cfg.objective);
    if cfg.mode != Mode::Fixed {
        run_stage(&mut run, data, &cfg.recon_pretrain, LossKind::Recon)?;
        let second = if cfg.mode == Mode::ReconOnly { LossKind::Recon } else { LossKind::Decay };
        run_stage(&mut run, data, &cfg.decay, second)?;
    }
    run.frozen = true;
    Ok(run)
}
