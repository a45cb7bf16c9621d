use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};
use crate::fitting::{fit_pixels, fit_vjp, FitConfig};
use crate::sampling::{recon_batch, recon_batch_backward, BatchRecon, NudftPlan, ReconConfig};
use crate::trajectory::{KPoint, KinematicLimits, Trajectory};

/// Everything a loss evaluation needs besides the trajectory and the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub recon: ReconConfig,
    pub fit: FitConfig,
    pub limits: KinematicLimits,
    /// Weight of the soft kinematic penalty added to the data term.
    pub penalty_weight: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            recon: ReconConfig::default(),
            fit: FitConfig::default(),
            limits: KinematicLimits::default(),
            penalty_weight: 1.0,
        }
    }
}

/// Which data term drives the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Distance between the fully sampled frames and their reconstructions.
    Recon,
    /// Distance between the fully sampled frames and the decay model fitted
    /// to the reconstructions.
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub data: f64,
    pub penalty: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Loss gradients with respect to every sample (frame-major, as in
/// [`Trajectory::samples`]) and every control point.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub samples: Vec<KPoint>,
    pub controls: Vec<KPoint>,
}

/// Reconstruction objective of one sequence: the mean over frames of the
/// root-mean-square difference between each frame and its reconstruction,
/// plus the kinematic penalty.
pub fn recon_loss(traj: &Trajectory, seq: &WeightedSequence, obj: &Objective) -> Result<LossTerms> {
    Ok(evaluate(traj, &[seq], LossKind::Recon, obj, false)?.0)
}

/// Decay objective of one sequence: reconstruct, fit the decay model per
/// pixel, and measure the mean over frames of the root-mean-square residual
/// between the original frames and the fitted model on the sequence support,
/// plus the kinematic penalty.
pub fn decay_loss(traj: &Trajectory, seq: &WeightedSequence, obj: &Objective) -> Result<LossTerms> {
    Ok(evaluate(traj, &[seq], LossKind::Decay, obj, false)?.0)
}

/// Batch loss and its gradients, averaged over `data`.
pub fn loss_and_gradient(
    traj: &Trajectory,
    data: &[&WeightedSequence],
    kind: LossKind,
    obj: &Objective,
) -> Result<(LossTerms, Gradients)> {
    let (terms, grad) = evaluate(traj, data, kind, obj, true)?;
    Ok((terms, grad.expect("requested")))
}

fn check_shapes(traj: &Trajectory, data: &[&WeightedSequence]) -> Result<(usize, usize)> {
    let first = data.first().ok_or_else(|| Error::InvalidInput("no sequences to evaluate".into()))?;
    let (h, w) = (first.height, first.width);
    for s in data {
        if s.height != h || s.width != w {
            return Err(Error::InvalidInput("sequences differ in image size".into()));
        }
        if s.n_frames() != traj.n_frames() {
            return Err(Error::InvalidInput(format!(
                "sequence has {} frames, trajectory {}",
                s.n_frames(),
                traj.n_frames()
            )));
        }
    }
    Ok((h, w))
}

fn evaluate(
    traj: &Trajectory,
    data: &[&WeightedSequence],
    kind: LossKind,
    obj: &Objective,
    with_grad: bool,
) -> Result<(LossTerms, Option<Gradients>)> {
    let (h, w) = check_shapes(traj, data)?;
    obj.recon.validate()?;
    let floor = 1.0 / traj.m_points() as f64;
    let n_frames = traj.n_frames();

    let frames: Vec<(NudftPlan, BatchRecon)> = (0..n_frames)
        .into_par_iter()
        .map(|f| {
            let plan = NudftPlan::new(h, w, traj.frame_samples(f))?;
            let truths: Vec<&[f64]> = data.iter().map(|s| s.frames[f].as_slice()).collect();
            let fwd = recon_batch(&plan, &truths, &obj.recon, floor, with_grad);
            Ok((plan, fwd))
        })
        .collect::<Result<_>>()?;

    // upstream[f][p] = ∂L/∂(reconstruction of frame f of sequence p)
    let (data_term, upstream) = match kind {
        LossKind::Recon => recon_term(data, &frames, h * w),
        LossKind::Decay => decay_term(data, &frames, &obj.fit)?,
    };

    let m = traj.m_points();
    let mut sample_grad = vec![KPoint::default(); if with_grad { traj.samples().len() } else { 0 }];
    let mut penalty = 0.0;
    for (shot, x) in traj.samples().chunks(m).enumerate() {
        let g = with_grad.then(|| &mut sample_grad[shot * m..(shot + 1) * m]);
        penalty += kinematic_penalty(x, &obj.limits, obj.penalty_weight, g);
    }
    let terms = LossTerms { data: data_term, penalty };
    if !with_grad {
        return Ok((terms, None));
    }

    let per_frame = traj.samples_per_frame();
    let data_grads: Vec<Vec<KPoint>> = frames
        .par_iter()
        .zip(upstream.par_iter())
        .enumerate()
        .map(|(f, ((plan, fwd), up))| {
            let truths: Vec<&[f64]> = data.iter().map(|s| s.frames[f].as_slice()).collect();
            recon_batch_backward(plan, &truths, &obj.recon, fwd, up)
        })
        .collect();
    for (f, g) in data_grads.iter().enumerate() {
        for (dst, src) in sample_grad[f * per_frame..(f + 1) * per_frame].iter_mut().zip(g) {
            dst.kx += src.kx;
            dst.ky += src.ky;
        }
    }

    let basis = traj.basis();
    let c = traj.n_control();
    let mut controls = Vec::with_capacity(traj.control_points().len());
    for (shot, ctrl) in traj.control_points().chunks(c).enumerate() {
        // samples pinned by the box clamp do not move with the controls
        let raw = basis.apply_unclamped(ctrl);
        let g: Vec<KPoint> = sample_grad[shot * m..(shot + 1) * m]
            .iter()
            .zip(&raw)
            .map(|(g, p)| {
                KPoint::new(if p.kx.abs() <= 0.5 { g.kx } else { 0.0 }, if p.ky.abs() <= 0.5 { g.ky } else { 0.0 })
            })
            .collect();
        controls.extend(basis.pullback(&g));
    }
    Ok((terms, Some(Gradients { samples: sample_grad, controls })))
}

fn recon_term(
    data: &[&WeightedSequence],
    frames: &[(NudftPlan, BatchRecon)],
    n_pixels: usize,
) -> (f64, Vec<Vec<Vec<f64>>>) {
    let scale = 1.0 / ((n_pixels as f64).sqrt() * (data.len() * frames.len()) as f64);
    let mut total = 0.0;
    let mut upstream = Vec::with_capacity(frames.len());
    for (f, (_, fwd)) in frames.iter().enumerate() {
        let mut per = Vec::with_capacity(data.len());
        for (p, seq) in data.iter().enumerate() {
            let diff: Vec<f64> = fwd.images[p].iter().zip(&seq.frames[f]).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += norm * scale;
            let k = if norm > 0.0 { scale / norm } else { 0.0 };
            per.push(diff.into_iter().map(|v| v * k).collect());
        }
        upstream.push(per);
    }
    (total, upstream)
}

fn decay_term(
    data: &[&WeightedSequence],
    frames: &[(NudftPlan, BatchRecon)],
    fit_cfg: &FitConfig,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let n_frames = frames.len();
    let n_seq = data.len();
    let mut upstream = vec![vec![Vec::new(); n_seq]; n_frames];
    let mut total = 0.0;
    let mut any_valid = false;
    for (p, seq) in data.iter().enumerate() {
        let recon_frames: Vec<Vec<f64>> = frames.iter().map(|(_, fwd)| fwd.images[p].clone()).collect();
        let recon = WeightedSequence::new(seq.height, seq.width, recon_frames, seq.inversion_times.clone())?;
        let support = seq.support_or_all();
        let fits = fit_pixels(&recon, Some(&support), fit_cfg);
        any_valid |= fits.iter().flatten().any(|f| f.valid);
        let pixels: Vec<usize> = (0..seq.n_pixels()).filter(|&q| support[q]).collect();
        if pixels.is_empty() {
            for up in upstream.iter_mut() {
                up[p] = vec![0.0; seq.n_pixels()];
            }
            continue;
        }
        let t = &seq.inversion_times;
        let scale = 1.0 / ((pixels.len() as f64).sqrt() * (n_seq * n_frames) as f64);

        // residual x - g per frame over the support, and its cotangent
        let mut dg = vec![vec![0.0; pixels.len()]; n_frames];
        for i in 0..n_frames {
            let r: Vec<f64> = pixels
                .iter()
                .map(|&q| {
                    let f = fits[q].as_ref().expect("support pixel fitted");
                    seq.frames[i][q] - (f.a - f.b * (-t[i] / f.t1_star).exp())
                })
                .collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += norm * scale;
            if norm > 0.0 {
                for (d, rv) in dg[i].iter_mut().zip(&r) {
                    *d = -rv * scale / norm;
                }
            }
        }

        let dy: Vec<Vec<f64>> = pixels
            .par_iter()
            .enumerate()
            .map(|(k, &q)| {
                let f = fits[q].as_ref().expect("support pixel fitted");
                let mut dtheta = [0.0; 3];
                for i in 0..n_frames {
                    let e = (-t[i] / f.t1_star).exp();
                    let d = dg[i][k];
                    dtheta[0] += d;
                    dtheta[1] -= d * e;
                    dtheta[2] -= d * f.b * e * t[i] / (f.t1_star * f.t1_star);
                }
                fit_vjp(&recon.trace(q), t, f, dtheta)
            })
            .collect();
        for (i, up) in upstream.iter_mut().enumerate() {
            let mut g = vec![0.0; seq.n_pixels()];
            for (k, &q) in pixels.iter().enumerate() {
                g[q] = dy[k][i];
            }
            up[p] = g;
        }
    }
    if !any_valid {
        return Err(Error::NoValidPixels);
    }
    Ok((total, upstream))
}

/// Weighted squared excess of speed and acceleration over their limits for
/// one shot. Accumulates the gradient into `grad` when given.
pub fn kinematic_penalty(x: &[KPoint], limits: &KinematicLimits, weight: f64, mut grad: Option<&mut [KPoint]>) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let dt = limits.dt;
    let mut total = 0.0;
    for k in 0..x.len().saturating_sub(1) {
        let (dx, dy) = (x[k + 1].kx - x[k].kx, x[k + 1].ky - x[k].ky);
        let len = dx.hypot(dy);
        let excess = len / dt - limits.v_max;
        if excess > 0.0 {
            total += weight * excess * excess;
            if let Some(g) = grad.as_deref_mut() {
                let c = 2.0 * weight * excess / (dt * len);
                g[k + 1].kx += c * dx;
                g[k + 1].ky += c * dy;
                g[k].kx -= c * dx;
                g[k].ky -= c * dy;
            }
        }
    }
    for k in 1..x.len().saturating_sub(1) {
        let ax = x[k + 1].kx - 2.0 * x[k].kx + x[k - 1].kx;
        let ay = x[k + 1].ky - 2.0 * x[k].ky + x[k - 1].ky;
        let len = ax.hypot(ay);
        let excess = len / (dt * dt) - limits.a_max;
        if excess > 0.0 {
            total += weight * excess * excess;
            if let Some(g) = grad.as_deref_mut() {
                let c = 2.0 * weight * excess / (dt * dt * len);
                for (idx, f) in [(k + 1, 1.0), (k, -2.0), (k - 1, 1.0)] {
                    g[idx].kx += c * f * ax;
                    g[idx].ky += c * f * ay;
                }
            }
        }
    }
    total
}
