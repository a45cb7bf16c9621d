use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};
use crate::fitting::{fit_map, model_sequence, DecayFit};
use crate::metrics::decay_psnr;
use crate::sampling::{acquire, reconstruct, KSpaceData, ReconConfig, ReconMethod};
use crate::trajectory::Trajectory;

use super::objective::{kinematic_penalty, LossTerms, Objective};

/// Search interval for `log10(λ / M)`, `M` the samples per frame.
const LOG_LAMBDA_RANGE: (f64, f64) = (-4.0, 1.0);

/// Outcome of refining one sequence with the trajectory held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRefinement {
    /// Regularization weight of the accepted least-squares reconstruction,
    /// or `None` when the unrefined reconstruction was kept.
    pub lambda: Option<f64>,
    pub loss_before: LossTerms,
    pub loss_after: LossTerms,
    /// Mean per-frame decay PSNR before and after, on the refinement mask.
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub reconstruction: Vec<Vec<f64>>,
    pub fit: DecayFit,
}

struct Candidate {
    lambda: Option<f64>,
    residual: f64,
    psnr: f64,
    frames: Vec<Vec<f64>>,
    fit: DecayFit,
}

/// Records `c` if it is the best so far and returns its residual.
fn keep(c: Candidate, best: &mut Option<Candidate>) -> f64 {
    let r = c.residual;
    if best.as_ref().is_none_or(|b| r < b.residual) {
        *best = Some(c);
    }
    r
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn candidate(
    ksp: &KSpaceData,
    seq: &WeightedSequence,
    obj: &Objective,
    recon: &ReconConfig,
    lambda: Option<f64>,
    mask: &[bool],
) -> Result<Candidate> {
    let frames = reconstruct(ksp, recon)?.frames;
    let rseq = WeightedSequence::new(seq.height, seq.width, frames, seq.inversion_times.clone())?;
    let support = seq.support_or_all();
    let fit = fit_map(&rseq, Some(&support), &obj.fit)?;
    let model = model_sequence(&fit, &seq.inversion_times)?;
    let pixels: Vec<usize> = (0..seq.n_pixels()).filter(|&q| support[q]).collect();
    if pixels.is_empty() {
        return Err(Error::InvalidInput("sequence support is empty".into()));
    }
    let residual = mean(
        &model
            .frames
            .iter()
            .zip(&seq.frames)
            .map(|(m, x)| (pixels.iter().map(|&q| (x[q] - m[q]).powi(2)).sum::<f64>() / pixels.len() as f64).sqrt())
            .collect::<Vec<_>>(),
    );
    let psnr = mean(&decay_psnr(&model, seq, mask)?);
    Ok(Candidate { lambda, residual, psnr, frames: rseq.frames, fit })
}

/// Refines one sequence: the trajectory is frozen and a regularized
/// least-squares reconstruction is tuned by golden-section search over
/// `log λ`, scoring each value by the decay residual against `seq`. The best
/// value replaces the training reconstruction only if it does not lower the
/// mean decay PSNR on `mask` (the sequence support when `None`).
/// `evaluations` bounds the number of regularization values tried.
pub fn refine_sample(
    traj: &Trajectory,
    seq: &WeightedSequence,
    obj: &Objective,
    evaluations: usize,
    mask: Option<&[bool]>,
) -> Result<SampleRefinement> {
    let ksp = acquire(seq, traj)?;
    let support = seq.support_or_all();
    let mask = mask.unwrap_or(&support);
    let penalty: f64 = traj
        .samples()
        .chunks(traj.m_points())
        .map(|x| kinematic_penalty(x, &obj.limits, obj.penalty_weight, None))
        .sum();

    let base = candidate(&ksp, seq, obj, &obj.recon, None, mask)?;
    let m = traj.samples_per_frame() as f64;
    let cg = |u: f64| ReconConfig {
        method: ReconMethod::CgLeastSquares,
        tikhonov_lambda: m * 10f64.powf(u),
        cg_iterations: obj.recon.cg_iterations.max(1),
        ..obj.recon
    };
    let eval = |u: f64| -> Result<Candidate> {
        let cfg = cg(u);
        candidate(&ksp, seq, obj, &cfg, Some(cfg.tikhonov_lambda), mask)
    };

    let mut best: Option<Candidate> = None;
    if evaluations > 0 {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = LOG_LAMBDA_RANGE;
        let mut x1 = b - inv_phi * (b - a);
        let mut x2 = a + inv_phi * (b - a);
        let mut f1 = keep(eval(x1)?, &mut best);
        let mut f2 = if evaluations > 1 { keep(eval(x2)?, &mut best) } else { f64::INFINITY };
        for _ in 2..evaluations {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - inv_phi * (b - a);
                f1 = keep(eval(x1)?, &mut best);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + inv_phi * (b - a);
                f2 = keep(eval(x2)?, &mut best);
            }
        }
    }

    let (residual_before, psnr_before) = (base.residual, base.psnr);
    let chosen = match best {
        Some(c) if c.psnr >= psnr_before => c,
        _ => base,
    };
    Ok(SampleRefinement {
        lambda: chosen.lambda,
        loss_before: LossTerms { data: residual_before, penalty },
        loss_after: LossTerms { data: chosen.residual, penalty },
        psnr_before,
        psnr_after: chosen.psnr,
        reconstruction: chosen.frames,
        fit: chosen.fit,
    })
}
