use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};
use crate::trajectory::{KPoint, Trajectory};

use super::nudft::{NudftPlan, Spectrum};

/// Complex samples acquired along a trajectory, one vector per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    pub height: usize,
    pub width: usize,
    pub traj: Trajectory,
    pub values: Vec<Vec<Complex64>>,
}

impl KSpaceData {
    pub fn new(height: usize, width: usize, traj: Trajectory, values: Vec<Vec<Complex64>>) -> Result<Self> {
        if values.len() != traj.n_frames() {
            return Err(Error::InvalidInput(format!(
                "{} frames of samples for a {}-frame trajectory",
                values.len(),
                traj.n_frames()
            )));
        }
        let per = traj.samples_per_frame();
        if let Some(v) = values.iter().find(|v| v.len() != per) {
            return Err(Error::InvalidInput(format!("{} samples in a frame, expected {per}", v.len())));
        }
        Ok(Self { height, width, traj, values })
    }
}

/// Samples every frame of `seq` along the matching trajectory frame.
pub fn acquire(seq: &WeightedSequence, traj: &Trajectory) -> Result<KSpaceData> {
    if seq.n_frames() != traj.n_frames() {
        return Err(Error::InvalidInput(format!(
            "sequence has {} frames, trajectory {}",
            seq.n_frames(),
            traj.n_frames()
        )));
    }
    let values = (0..traj.n_frames())
        .map(|f| {
            let plan = NudftPlan::new(seq.height, seq.width, traj.frame_samples(f))?;
            Ok(plan.forward_real(&[&seq.frames[f]], false).pop().expect("one image").values)
        })
        .collect::<Result<Vec<_>>>()?;
    KSpaceData::new(seq.height, seq.width, traj.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMethod {
    AdjointDcf,
    CgLeastSquares,
}

/// Sample weighting applied before the adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Density {
    /// `max(|k|, 1/m)`, normalized to sum to the sample count.
    Ramp,
    /// Every sample weighted 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub method: ReconMethod,
    pub cg_iterations: usize,
    pub tikhonov_lambda: f64,
    pub density: Density,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { method: ReconMethod::AdjointDcf, cg_iterations: 10, tikhonov_lambda: 0.0, density: Density::Ramp }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == ReconMethod::CgLeastSquares && self.cg_iterations == 0 {
            return Err(Error::Config("cg_iterations must be at least 1".into()));
        }
        if !(self.tikhonov_lambda >= 0.0) || !self.tikhonov_lambda.is_finite() {
            return Err(Error::Config(format!(
                "tikhonov_lambda must be a finite nonnegative number, got {}",
                self.tikhonov_lambda
            )));
        }
        Ok(())
    }
}

/// Radial ramp density compensation: `u_j = max(|k_j|, floor)` rescaled so
/// the weights sum to the number of samples.
pub fn density_weights(coords: &[KPoint], floor: f64) -> Vec<f64> {
    ramp(coords, floor).w
}

struct Ramp {
    w: Vec<f64>,
    u: Vec<f64>,
    total: f64,
    floor: f64,
}

fn ramp(coords: &[KPoint], floor: f64) -> Ramp {
    let u: Vec<f64> = coords.iter().map(|k| k.norm().max(floor)).collect();
    let total: f64 = u.iter().sum();
    let m = coords.len() as f64;
    let w = if total > 0.0 { u.iter().map(|v| v * m / total).collect() } else { vec![1.0; coords.len()] };
    Ramp { w, u, total, floor }
}

/// Reconstructed frames plus a flag raised when conjugate gradient hit a
/// zero-curvature direction and stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub frames: Vec<Vec<f64>>,
    pub cg_breakdown: bool,
}

/// Reconstructs every frame of `ksp` independently.
pub fn reconstruct(ksp: &KSpaceData, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let floor = 1.0 / ksp.traj.m_points() as f64;
    let mut out = Reconstruction { frames: Vec::new(), cg_breakdown: false };
    for (f, values) in ksp.values.iter().enumerate() {
        let plan = NudftPlan::new(ksp.height, ksp.width, ksp.traj.frame_samples(f))?;
        let (mut imgs, broke) = match cfg.method {
            ReconMethod::AdjointDcf => (adjoint_dcf(&plan, &[values.as_slice()], cfg.density, floor).0, false),
            ReconMethod::CgLeastSquares => {
                let rhs = plan.adjoint_real(&[values.as_slice()]);
                let cg = cg_normal(&plan, &rhs, cfg.tikhonov_lambda, cfg.cg_iterations, |_, _| {});
                (cg.x, cg.breakdown)
            }
        };
        out.cg_breakdown |= broke;
        out.frames.push(imgs.pop().expect("one frame"));
    }
    if out.cg_breakdown {
        log::warn!("conjugate gradient broke down; returning the last iterate");
    }
    Ok(out)
}

struct DcfState {
    weights: Vec<f64>,
    ramp: Option<Ramp>,
    scale: f64,
    /// `None` when the fallback `1/(H·W)` scale is in use.
    ones: Option<Spectrum>,
}

/// Adjoint reconstruction `c · Re Fᴴ(w ∘ s)`. The scale `c` normalizes the
/// DC gain of the weighted adjoint to one, so the center pixel of a constant
/// image keeps its value; for a full Cartesian grid with unit weights it equals
/// `1/(H·W)`.
fn adjoint_dcf(plan: &NudftPlan, samples: &[&[Complex64]], density: Density, floor: f64) -> (Vec<Vec<f64>>, DcfState) {
    let (weights, ramp_state) = match density {
        Density::Ramp => {
            let r = ramp(plan.coords(), floor);
            (r.w.clone(), Some(r))
        }
        Density::Uniform => (vec![1.0; plan.n_samples()], None),
    };
    let ones = plan.ones_spectrum();
    let gain: f64 = weights.iter().zip(&ones.values).map(|(w, d)| w * d.re).sum();
    let hw = plan.n_pixels() as f64;
    let (scale, ones) = if gain > 1e-6 * hw { (1.0 / gain, Some(ones)) } else { (1.0 / hw, None) };
    let weighted: Vec<Vec<Complex64>> =
        samples.iter().map(|s| s.iter().zip(&weights).map(|(v, w)| v * w).collect()).collect();
    let refs: Vec<&[Complex64]> = weighted.iter().map(Vec::as_slice).collect();
    let mut imgs = plan.adjoint_real(&refs);
    for img in &mut imgs {
        img.iter_mut().for_each(|v| *v *= scale);
    }
    (imgs, DcfState { weights, ramp: ramp_state, scale, ones })
}

pub(crate) struct CgOutcome {
    pub x: Vec<Vec<f64>>,
    pub breakdown: bool,
}

/// Applies `Re(FᴴF) + λI` to a batch of images.
fn normal_apply(plan: &NudftPlan, v: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
    let spec = plan.forward_real(&refs, false);
    let srefs: Vec<&[Complex64]> = spec.iter().map(|s| s.values.as_slice()).collect();
    let mut out = plan.adjoint_real(&srefs);
    for (o, x) in out.iter_mut().zip(v) {
        for (a, b) in o.iter_mut().zip(x) {
            *a += lambda * b;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batched conjugate gradient on `(Re(FᴴF) + λI) x = rhs` from zero. Each
/// system keeps its own step sizes; a system that converges exactly or meets
/// a non-positive curvature stops updating. `observe` sees the iterates after
/// every step.
pub(crate) fn cg_normal(
    plan: &NudftPlan,
    rhs: &[Vec<f64>],
    lambda: f64,
    iterations: usize,
    mut observe: impl FnMut(usize, &[Vec<f64>]),
) -> CgOutcome {
    let n = plan.n_pixels();
    let p_count = rhs.len();
    let mut x = vec![vec![0.0; n]; p_count];
    let mut r = rhs.to_vec();
    let mut d = rhs.to_vec();
    let mut rr: Vec<f64> = r.iter().map(|v| dot(v, v)).collect();
    let scale0: Vec<f64> = rr.clone();
    let mut active: Vec<bool> = rr.iter().map(|&v| v > 0.0).collect();
    let mut breakdown = false;
    for it in 0..iterations {
        if !active.iter().any(|&a| a) {
            break;
        }
        let ad = normal_apply(plan, &d, lambda);
        for p in 0..p_count {
            if !active[p] {
                continue;
            }
            let curv = dot(&d[p], &ad[p]);
            if !(curv > 1e-300) || !curv.is_finite() {
                breakdown = true;
                active[p] = false;
                continue;
            }
            let alpha = rr[p] / curv;
            for i in 0..n {
                x[p][i] += alpha * d[p][i];
                r[p][i] -= alpha * ad[p][i];
            }
            let rr_new = dot(&r[p], &r[p]);
            if rr_new <= 1e-32 * scale0[p] {
                active[p] = false;
                rr[p] = rr_new;
                continue;
            }
            let beta = rr_new / rr[p];
            for i in 0..n {
                d[p][i] = r[p][i] + beta * d[p][i];
            }
            rr[p] = rr_new;
        }
        observe(it, &x);
    }
    CgOutcome { x, breakdown }
}

/// Differentiable acquisition + reconstruction of a batch of images that
/// share one coordinate set.
pub struct BatchRecon {
    pub images: Vec<Vec<f64>>,
    pub cg_breakdown: bool,
    truth_spec: Vec<Spectrum>,
    dcf: Option<DcfState>,
}

/// Samples each image in `truth` along the plan's coordinates and
/// reconstructs it with `cfg`. Keeps what the backward pass needs.
pub fn recon_batch(plan: &NudftPlan, truth: &[&[f64]], cfg: &ReconConfig, floor: f64, with_grad: bool) -> BatchRecon {
    let truth_spec = plan.forward_real(truth, with_grad && cfg.method == ReconMethod::AdjointDcf);
    let srefs: Vec<&[Complex64]> = truth_spec.iter().map(|s| s.values.as_slice()).collect();
    match cfg.method {
        ReconMethod::AdjointDcf => {
            let (images, state) = adjoint_dcf(plan, &srefs, cfg.density, floor);
            BatchRecon { images, cg_breakdown: false, truth_spec, dcf: Some(state) }
        }
        ReconMethod::CgLeastSquares => {
            let rhs = plan.adjoint_real(&srefs);
            let cg = cg_normal(plan, &rhs, cfg.tikhonov_lambda, cfg.cg_iterations, |_, _| {});
            BatchRecon { images: cg.x, cg_breakdown: cg.breakdown, truth_spec: Vec::new(), dcf: None }
        }
    }
}

/// Gradient of a loss with respect to the plan's coordinates, summed over the
/// batch, given `upstream[p] = ∂L/∂images[p]`.
pub fn recon_batch_backward(
    plan: &NudftPlan,
    truth: &[&[f64]],
    cfg: &ReconConfig,
    fwd: &BatchRecon,
    upstream: &[Vec<f64>],
) -> Vec<KPoint> {
    match cfg.method {
        ReconMethod::AdjointDcf => dcf_backward(plan, fwd, upstream),
        ReconMethod::CgLeastSquares => cg_backward(plan, truth, cfg, fwd, upstream),
    }
}

fn dcf_backward(plan: &NudftPlan, fwd: &BatchRecon, upstream: &[Vec<f64>]) -> Vec<KPoint> {
    let st = fwd.dcf.as_ref().expect("adjoint state present");
    let m = plan.n_samples();
    let c = st.scale;
    let grefs: Vec<&[f64]> = upstream.iter().map(Vec::as_slice).collect();
    let fg = plan.forward_real(&grefs, true);

    let mut grad = vec![KPoint::default(); m];
    let mut grad_w = vec![0.0; m];
    // ∂L/∂c, with x̂ = c·y this is Σ G·x̂ / c
    let mut grad_c = 0.0;
    for (p, (s, g)) in fwd.truth_spec.iter().zip(&fg).enumerate() {
        grad_c += dot(&upstream[p], &fwd.images[p]) / c;
        for j in 0..m {
            let w = st.weights[j];
            let z = s.values[j] * w;
            // adjoint depends on k through its exponentials
            grad[j].kx += c * (z * g.d_kx[j].conj()).re;
            grad[j].ky += c * (z * g.d_ky[j].conj()).re;
            // cotangent of z is c·(FG); chain through z = w s
            let gz = g.values[j] * c;
            grad_w[j] += (gz.conj() * s.values[j]).re;
            let gs = gz * w;
            grad[j].kx += (gs.conj() * s.d_kx[j]).re;
            grad[j].ky += (gs.conj() * s.d_ky[j]).re;
        }
    }
    if let Some(ones) = &st.ones {
        // c = 1 / Σ w Re D
        let dc = -c * c * grad_c;
        for j in 0..m {
            grad_w[j] += dc * ones.values[j].re;
            grad[j].kx += dc * st.weights[j] * ones.d_kx[j].re;
            grad[j].ky += dc * st.weights[j] * ones.d_ky[j].re;
        }
    }
    if let Some(r) = &st.ramp {
        if r.total > 0.0 {
            let mf = m as f64;
            let mean_term: f64 = grad_w.iter().zip(&r.u).map(|(g, u)| g * u).sum::<f64>() / r.total;
            for (j, k) in plan.coords().iter().enumerate() {
                let norm = k.norm();
                if norm > r.floor {
                    let gu = mf / r.total * (grad_w[j] - mean_term);
                    grad[j].kx += gu * k.kx / norm;
                    grad[j].ky += gu * k.ky / norm;
                }
            }
        }
    }
    grad
}

fn cg_backward(
    plan: &NudftPlan,
    truth: &[&[f64]],
    cfg: &ReconConfig,
    fwd: &BatchRecon,
    upstream: &[Vec<f64>],
) -> Vec<KPoint> {
    let m = plan.n_samples();
    // v = A⁻¹ G; the system matrix is symmetric
    let v = cg_normal(plan, upstream, cfg.tikhonov_lambda, cfg.cg_iterations, |_, _| {}).x;
    let e: Vec<Vec<f64>> =
        truth.iter().zip(&fwd.images).map(|(t, x)| t.iter().zip(x).map(|(a, b)| a - b).collect()).collect();
    let mut refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
    refs.extend(e.iter().map(Vec::as_slice));
    let spec = plan.forward_real(&refs, true);
    let (fv, fe) = spec.split_at(v.len());
    let mut grad = vec![KPoint::default(); m];
    for (a, b) in fv.iter().zip(fe) {
        for j in 0..m {
            grad[j].kx += (a.d_kx[j].conj() * b.values[j] + a.values[j].conj() * b.d_kx[j]).re;
            grad[j].ky += (a.d_ky[j].conj() * b.values[j] + a.values[j].conj() * b.d_ky[j]).re;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cartesian(h: usize, w: usize) -> Vec<KPoint> {
        let mut out = Vec::new();
        for iy in 0..h {
            for ix in 0..w {
                out.push(KPoint::new((ix as f64 - (w / 2) as f64) / w as f64, (iy as f64 - (h / 2) as f64) / h as f64));
            }
        }
        out
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn equal_radius_equal_weights() {
        let coords: Vec<KPoint> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.5;
                KPoint::new(0.3 * t.cos(), 0.3 * t.sin())
            })
            .collect();
        let w = density_weights(&coords, 1.0 / 64.0);
        for v in &w {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords: Vec<KPoint> =
            (0..37).map(|_| KPoint::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect();
        let s: f64 = density_weights(&coords, 0.01).iter().sum();
        assert!((s - 37.0).abs() < 1e-10);
    }

    #[test]
    fn spoke_weights_are_a_ramp() {
        let m = 33;
        let coords: Vec<KPoint> = (0..m).map(|i| KPoint::new(0.0, -0.5 + i as f64 / (m - 1) as f64)).collect();
        let floor = 1.0 / m as f64;
        let w = density_weights(&coords, floor);
        let raw: Vec<f64> = coords.iter().map(|k| k.ky.abs().max(floor)).collect();
        let total: f64 = raw.iter().sum();
        for (a, r) in w.iter().zip(&raw) {
            assert!((a - r * m as f64 / total).abs() < 1e-12);
        }
    }

    #[test]
    fn cartesian_adjoint_recovers_image() {
        let (h, w) = (6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, h * w);
        let plan = NudftPlan::new(h, w, &cartesian(h, w)).unwrap();
        let cfg = ReconConfig { density: Density::Uniform, ..ReconConfig::default() };
        let out = recon_batch(&plan, &[&img], &cfg, 0.1, false);
        for (a, b) in out.images[0].iter().zip(&img) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_kspace_zero_image() {
        let traj = crate::trajectory::radial_scheme(4, 9, 3).unwrap();
        let ksp = KSpaceData::new(8, 8, traj, vec![vec![Complex64::new(0.0, 0.0); 36]; 3]).unwrap();
        for method in [ReconMethod::AdjointDcf, ReconMethod::CgLeastSquares] {
            let cfg = ReconConfig { method, ..ReconConfig::default() };
            let r = reconstruct(&ksp, &cfg).unwrap();
            assert!(r.frames.iter().flatten().all(|&v| v == 0.0));
            assert!(!r.cg_breakdown);
        }
    }

    #[test]
    fn constant_image_survives_adjoint_dcf() {
        let traj = crate::trajectory::golden_angle_scheme(6, 33, 3).unwrap();
        let seq = WeightedSequence::new(16, 16, vec![vec![2.5; 256]; 3], vec![100.0, 200.0, 300.0]).unwrap();
        let ksp = acquire(&seq, &traj).unwrap();
        let r = reconstruct(&ksp, &ReconConfig::default()).unwrap();
        // DC gain is one; the mean is exact, individual pixels are not
        for f in &r.frames {
            let mean: f64 = f.iter().sum::<f64>() / 256.0;
            assert!(mean > 0.5 && mean < 5.0, "mean {mean}");
        }
    }

    #[test]
    fn cg_residual_is_monotone() {
        let (h, w) = (12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, h * w);
        let traj = crate::trajectory::golden_angle_scheme(5, 25, 1).unwrap();
        let plan = NudftPlan::new(h, w, traj.frame_samples(0)).unwrap();
        let s = plan.forward_real(&[&img], false).pop().unwrap().values;
        let rhs = plan.adjoint_real(&[&s]);
        let mut res = Vec::new();
        cg_normal(&plan, &rhs, 0.0, 40, |_, x| {
            let fx = plan.forward_real(&[&x[0]], false).pop().unwrap().values;
            res.push(fx.iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt());
        });
        let s_norm = s.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for pair in res.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-12 * s_norm, "{pair:?}");
        }
    }

    #[test]
    fn cg_converges_on_cartesian() {
        let (h, w) = (8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, h * w);
        let plan = NudftPlan::new(h, w, &cartesian(h, w)).unwrap();
        let cfg = ReconConfig { method: ReconMethod::CgLeastSquares, cg_iterations: h * w, ..ReconConfig::default() };
        let out = recon_batch(&plan, &[&img], &cfg, 0.1, false);
        for (a, b) in out.images[0].iter().zip(&img) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn config_validation() {
        let bad = ReconConfig { method: ReconMethod::CgLeastSquares, cg_iterations: 0, ..ReconConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ReconConfig { tikhonov_lambda: -1.0, ..ReconConfig::default() };
        assert!(bad.validate().is_err());
        assert!(ReconConfig::default().validate().is_ok());
    }

    /// `L = Σ_p ⟨G_p, recon_p⟩` evaluated from scratch at perturbed coordinates.
    fn check_backward(cfg: ReconConfig, seed: u64) {
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Vec<f64>> = (0..2).map(|_| random_image(&mut rng, h * w)).collect();
        let gs: Vec<Vec<f64>> =
            (0..2).map(|_| random_image(&mut rng, h * w).iter().map(|v| v - 0.5).collect()).collect();
        let coords: Vec<KPoint> =
            (0..40).map(|_| KPoint::new(rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45))).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let floor = 0.05;
        let loss = |k: &[KPoint]| -> f64 {
            let plan = NudftPlan::new(h, w, k).unwrap();
            let out = recon_batch(&plan, &refs, &cfg, floor, false);
            out.images.iter().zip(&gs).map(|(x, g)| dot(x, g)).sum()
        };
        let plan = NudftPlan::new(h, w, &coords).unwrap();
        let fwd = recon_batch(&plan, &refs, &cfg, floor, true);
        let grad = recon_batch_backward(&plan, &refs, &cfg, &fwd, &gs);
        let eps = 1e-6;
        for j in [0, 7, 19, 39] {
            for axis in 0..2 {
                let mut p = coords.clone();
                let mut m = coords.clone();
                if axis == 0 {
                    p[j].kx += eps;
                    m[j].kx -= eps;
                } else {
                    p[j].ky += eps;
                    m[j].ky -= eps;
                }
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let an = if axis == 0 { grad[j].kx } else { grad[j].ky };
                let scale = grad.iter().map(|g| g.kx.abs().max(g.ky.abs())).fold(0.0, f64::max);
                assert!((fd - an).abs() <= 1e-4 * scale, "j={j} axis={axis}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn dcf_backward_matches_finite_differences() {
        check_backward(ReconConfig::default(), 5);
        check_backward(ReconConfig { density: Density::Uniform, ..ReconConfig::default() }, 6);
    }

    #[test]
    fn cg_backward_matches_finite_differences() {
        let cfg = ReconConfig {
            method: ReconMethod::CgLeastSquares,
            cg_iterations: 300,
            tikhonov_lambda: 5.0,
            density: Density::Ramp,
        };
        check_backward(cfg, 7);
    }
}
