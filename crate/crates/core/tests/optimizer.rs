mod common;

use common::{cardiac, cartesian, TIMES3};
use t1map::decay_model::DEFAULT_INVERSION_TIMES;
use t1map::optimizer::{
    decay_loss, recon_loss, run_schedule, run_stage, write_run_artifacts, LossKind, Mode, Objective, OptimRun,
    ScheduleConfig, Stage, StageConfig, LOSS_HISTORY_HEADER,
};
use t1map::sampling::{Density, ReconConfig};
use t1map::trajectory::{feasibility_report, radial_scheme, read_trajectory_csv, KPoint, Trajectory};
use t1map::Error;

fn exact_objective() -> Objective {
    Objective {
        recon: ReconConfig { density: Density::Uniform, ..Default::default() },
        penalty_weight: 0.0,
        ..Default::default()
    }
}

fn schedule(mode: Mode, iterations: usize) -> ScheduleConfig {
    ScheduleConfig {
        mode,
        recon_pretrain: StageConfig::new(Stage::ReconPretrain, iterations, 2e-3),
        decay: StageConfig::new(Stage::Decay, iterations, 1e-3),
        per_sample: StageConfig::new(Stage::PerSample, 4, 0.0),
        objective: Objective::default(),
    }
}

fn small_data() -> Vec<t1map::decay_model::WeightedSequence> {
    (0..2).map(|k| cardiac(24, &TIMES3, k, 0.0)).collect()
}

fn radial(frames: usize) -> Trajectory {
    radial_scheme(4, 25, frames).unwrap().with_n_control(6).unwrap()
}

#[test]
fn full_cartesian_recon_loss_vanishes() {
    let seq = cardiac(16, &TIMES3, 0, 0.0);
    let l = recon_loss(&cartesian(16, 16, 3), &seq, &exact_objective()).unwrap();
    assert!(l.data < 1e-6, "{}", l.data);
    assert_eq!(l.penalty, 0.0);
}

#[test]
fn full_cartesian_decay_loss_vanishes() {
    let seq = cardiac(16, &TIMES3, 1, 0.0);
    let l = decay_loss(&cartesian(16, 16, 3), &seq, &exact_objective()).unwrap();
    assert!(l.data < 1e-4, "{}", l.data);
}

#[test]
fn single_point_is_worse_than_full_sampling() {
    let seq = cardiac(16, &TIMES3, 2, 0.0);
    let obj = exact_objective();
    let origin = Trajectory::from_samples(3, 1, 2, vec![KPoint::new(0.0, 0.0); 6]).unwrap();
    let full = cartesian(16, 16, 3);
    assert!(recon_loss(&origin, &seq, &obj).unwrap().data > recon_loss(&full, &seq, &obj).unwrap().data);
    assert!(decay_loss(&origin, &seq, &obj).unwrap().data > decay_loss(&full, &seq, &obj).unwrap().data);
}

#[test]
fn penalty_counts_excess_speed() {
    let seq = cardiac(16, &TIMES3, 0, 0.0);
    let obj = Objective { penalty_weight: 1.0, ..exact_objective() };
    // Cartesian rows step 1/16 per sample, twice the default speed limit.
    let l = recon_loss(&cartesian(16, 16, 3), &seq, &obj).unwrap();
    let per_step = (1.0f64 / 16.0 - 1.0 / 32.0).powi(2);
    let expected = 3.0 * 16.0 * 15.0 * per_step;
    assert!((l.penalty - expected).abs() < 1e-12 * expected, "{} vs {expected}", l.penalty);
}

#[test]
fn pretraining_does_not_increase_loss() {
    let data = vec![cardiac(24, &TIMES3, 5, 0.0)];
    let start = radial(3);
    let mut perturbed: Vec<KPoint> = start.control_points().to_vec();
    for (i, p) in perturbed.iter_mut().enumerate() {
        p.kx = (p.kx + 0.01 * ((i as f64) * 0.7).sin()).clamp(-0.5, 0.5);
        p.ky = (p.ky + 0.01 * ((i as f64) * 1.3).cos()).clamp(-0.5, 0.5);
    }
    let init = Trajectory::from_control_points(3, 4, 25, 6, perturbed, false).unwrap();
    let mut run = OptimRun::new(init, Objective::default());
    run_stage(&mut run, &data, &StageConfig::new(Stage::ReconPretrain, 100, 2e-3), LossKind::Recon).unwrap();
    let first = run.loss_history[0].loss;
    let last = run.loss_history.last().unwrap().loss;
    assert_eq!(run.loss_history.len(), 100);
    assert!(last <= first, "{first} -> {last}");
}

#[test]
fn schedule_is_deterministic() {
    let data = small_data();
    let mut cfg = schedule(Mode::Full, 6);
    cfg.recon_pretrain.batch_size = 1;
    cfg.recon_pretrain.seed = 9;
    let a = run_schedule(&data, &radial(3), &cfg).unwrap();
    let b = run_schedule(&data, &radial(3), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_keeps_the_trajectory() {
    let data = small_data();
    let init = radial(3).with_control_points(radial(3).control_points().to_vec()).unwrap();
    let mut run = OptimRun::new(init.clone(), Objective::default());
    run_stage(&mut run, &data, &StageConfig::new(Stage::ReconPretrain, 5, 0.0), LossKind::Recon).unwrap();
    assert_eq!(run.trajectory, init);
    assert_eq!(run.loss_history.len(), 5);
    assert!(run.loss_history.windows(2).all(|w| w[0].loss == w[1].loss));
}

#[test]
fn fixed_mode_only_freezes() {
    let run = run_schedule(&small_data(), &radial(3), &schedule(Mode::Fixed, 5)).unwrap();
    assert_eq!(run.trajectory, radial(3));
    assert!(run.loss_history.is_empty());
    assert!(run.frozen);
}

#[test]
fn frozen_run_rejects_training() {
    let data = small_data();
    let mut run = run_schedule(&data, &radial(3), &schedule(Mode::Fixed, 1)).unwrap();
    let err = run_stage(&mut run, &data, &StageConfig::new(Stage::Decay, 1, 1e-3), LossKind::Decay).unwrap_err();
    assert!(matches!(err, Error::Frozen));
}

#[test]
fn single_mask_stays_shared_and_full_mode_diverges() {
    let data = small_data();
    let single = run_schedule(&data, &radial(3), &schedule(Mode::SingleMask, 4)).unwrap().trajectory;
    assert!(single.shared_across_frames());
    let per = single.n_shots() * single.n_control();
    let cp = single.control_points();
    assert!(cp.chunks(per).all(|f| f == &cp[..per]));
    assert_ne!(&cp[..per], &radial(3).control_points()[..per]);

    let full = run_schedule(&data, &radial(3), &schedule(Mode::Full, 4)).unwrap().trajectory;
    assert!(!full.shared_across_frames());
    let cp = full.control_points();
    assert_ne!(&cp[..per], &cp[per..2 * per]);
}

#[test]
fn training_respects_kinematics() {
    let data = small_data();
    let run = run_schedule(&data, &radial(3), &schedule(Mode::Full, 8)).unwrap();
    for rec in &run.stage_log {
        assert!(feasibility_report(&rec.trajectory, &run.objective.limits).iter().all(|r| !r.violated()));
    }
}

#[test]
fn per_sample_stage_never_lowers_psnr() {
    let data = small_data();
    let mut run = run_schedule(&data, &radial(3), &schedule(Mode::Fixed, 1)).unwrap();
    let eval: Vec<_> = (10..12).map(|k| cardiac(24, &TIMES3, k, 5.0)).collect();
    run_stage(&mut run, &eval, &StageConfig::new(Stage::PerSample, 6, 0.0), LossKind::Decay).unwrap();
    assert_eq!(run.refinements.len(), 2);
    for r in &run.refinements {
        assert!(r.psnr_after >= r.psnr_before, "{} < {}", r.psnr_after, r.psnr_before);
    }
    assert_eq!(run.stage_log.last().unwrap().trajectory, radial(3));
}

#[test]
fn artifacts_round_trip() {
    let data = small_data();
    let run = run_schedule(&data, &radial(3), &schedule(Mode::Full, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_artifacts(&run, dir.path()).unwrap();
    let history = std::fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), LOSS_HISTORY_HEADER);
    assert_eq!(history.lines().count(), 1 + run.loss_history.len());
    let file = std::fs::File::open(dir.path().join("trajectory_final.csv")).unwrap();
    let back = read_trajectory_csv(std::io::BufReader::new(file)).unwrap();
    assert_eq!(back.samples(), run.trajectory.samples());
    assert!(dir.path().join("trajectory_0_recon_pretrain.csv").exists());
    assert!(dir.path().join("trajectory_1_decay.csv").exists());
    let stages = std::fs::read_to_string(dir.path().join("stages.toml")).unwrap();
    assert!(stages.contains("recon_pretrain") && stages.contains("decay"));
}

#[test]
fn nine_frame_schedule_runs() {
    let data = vec![cardiac(24, &DEFAULT_INVERSION_TIMES, 3, 0.0)];
    let run = run_schedule(&data, &radial(9), &schedule(Mode::Full, 2)).unwrap();
    assert_eq!(run.loss_history.len(), 4);
    assert!(run.loss_history.iter().all(|r| r.loss.is_finite()));
}
