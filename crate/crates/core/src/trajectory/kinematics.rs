//! Discrete kinematic limits on sampling curves and the projection onto them.
//!
//! Speed `‖x[k+1] - x[k]‖ / dt` stands in for gradient amplitude and
//! acceleration `‖x[k+1] - 2 x[k] + x[k-1]‖ / dt²` for slew rate. The
//! projection solves
//!
//! ```text
//! min ½‖ψ - z‖²  s.t.  ‖D₁ J ψ‖∞,₂ ≤ v_max,  ‖D₂ J ψ‖∞,₂ ≤ a_max,  J ψ ∈ [-½, ½]²
//! ```
//!
//! through its dual, `min_q ½‖z - Aᵀq‖² + σ_S(q)`, with accelerated proximal
//! gradient steps, where `J` is either the identity (projecting samples) or a
//! spline basis (projecting control points). A final uniform contraction about
//! the curve centroid removes the residual violation left by the iterative
//! solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{KPoint, SplineBasis, Trajectory};

/// Violations smaller than this are not reported.
pub const FEASIBILITY_TOL: f64 = 1e-6;

const MAX_DUAL_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicLimits {
    /// Speed bound in k-space units per sample interval.
    pub v_max: f64,
    /// Acceleration bound in k-space units per squared sample interval.
    pub a_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    1.0
}

impl Default for KinematicLimits {
    fn default() -> Self {
        Self { v_max: 1.0 / 32.0, a_max: 1.0 / 256.0, dt: 1.0 }
    }
}

impl KinematicLimits {
    pub fn new(v_max: f64, a_max: f64, dt: f64) -> Result<Self> {
        let l = Self { v_max, a_max, dt };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.a_max > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("kinematic limits must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Exact discrete-difference maxima of one shot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotFeasibility {
    pub frame: usize,
    pub shot: usize,
    pub max_speed: f64,
    pub max_accel: f64,
    pub speed_violation: bool,
    pub accel_violation: bool,
}

impl ShotFeasibility {
    pub fn violated(&self) -> bool {
        self.speed_violation || self.accel_violation
    }
}

fn max_speed(x: &[KPoint], dt: f64) -> f64 {
    x.windows(2).map(|w| (w[1].kx - w[0].kx).hypot(w[1].ky - w[0].ky) / dt).fold(0.0, f64::max)
}

fn max_accel(x: &[KPoint], dt: f64) -> f64 {
    x.windows(3)
        .map(|w| (w[2].kx - 2.0 * w[1].kx + w[0].kx).hypot(w[2].ky - 2.0 * w[1].ky + w[0].ky) / (dt * dt))
        .fold(0.0, f64::max)
}

fn box_excess(x: &[KPoint]) -> f64 {
    x.iter().map(|p| (p.kx.abs() - 0.5).max(p.ky.abs() - 0.5)).fold(0.0, f64::max)
}

pub fn shot_feasibility(samples: &[KPoint], limits: &KinematicLimits) -> ShotFeasibility {
    let max_speed = max_speed(samples, limits.dt);
    let max_accel = max_accel(samples, limits.dt);
    ShotFeasibility {
        frame: 0,
        shot: 0,
        max_speed,
        max_accel,
        speed_violation: max_speed > limits.v_max + FEASIBILITY_TOL,
        accel_violation: max_accel > limits.a_max + FEASIBILITY_TOL,
    }
}

/// Per-shot maxima and violation flags for every frame and shot.
pub fn feasibility_report(traj: &Trajectory, limits: &KinematicLimits) -> Vec<ShotFeasibility> {
    let mut out = Vec::with_capacity(traj.n_frames() * traj.n_shots());
    for f in 0..traj.n_frames() {
        for s in 0..traj.n_shots() {
            let mut r = shot_feasibility(traj.shot_samples(f, s), limits);
            r.frame = f;
            r.shot = s;
            out.push(r);
        }
    }
    out
}

fn strictly_feasible(x: &[KPoint], limits: &KinematicLimits) -> bool {
    max_speed(x, limits.dt) <= limits.v_max && max_accel(x, limits.dt) <= limits.a_max && box_excess(x) <= 0.0
}

/// Largest constraint excess (0 when feasible).
fn violation(x: &[KPoint], limits: &KinematicLimits) -> f64 {
    (max_speed(x, limits.dt) - limits.v_max).max(max_accel(x, limits.dt) - limits.a_max).max(box_excess(x)).max(0.0)
}

/// Linear map from the optimization variable to the curve samples.
enum CurveMap<'a> {
    Identity(usize),
    Spline(&'a SplineBasis),
}

impl CurveMap<'_> {
    fn m(&self) -> usize {
        match self {
            CurveMap::Identity(m) => *m,
            CurveMap::Spline(b) => b.m_points(),
        }
    }

    fn apply(&self, psi: &[KPoint]) -> Vec<KPoint> {
        match self {
            CurveMap::Identity(_) => psi.to_vec(),
            CurveMap::Spline(b) => b.apply_unclamped(psi),
        }
    }

    fn adjoint(&self, g: &[KPoint]) -> Vec<KPoint> {
        match self {
            CurveMap::Identity(_) => g.to_vec(),
            CurveMap::Spline(b) => b.pullback(g),
        }
    }
}

/// Dual variable: speed groups, acceleration groups, and box multipliers.
#[derive(Clone)]
struct Dual {
    speed: Vec<KPoint>,
    accel: Vec<KPoint>,
    bx: Vec<KPoint>,
}

impl Dual {
    fn zeros(m: usize) -> Self {
        Self {
            speed: vec![KPoint::default(); m.saturating_sub(1)],
            accel: vec![KPoint::default(); m.saturating_sub(2)],
            bx: vec![KPoint::default(); m],
        }
    }

    fn zip_map(&self, o: &Dual, f: impl Fn(f64, f64) -> f64) -> Dual {
        let z = |a: &[KPoint], b: &[KPoint]| -> Vec<KPoint> {
            a.iter().zip(b).map(|(p, q)| KPoint::new(f(p.kx, q.kx), f(p.ky, q.ky))).collect()
        };
        Dual { speed: z(&self.speed, &o.speed), accel: z(&self.accel, &o.accel), bx: z(&self.bx, &o.bx) }
    }

    fn dot(&self, o: &Dual) -> f64 {
        let d = |a: &[KPoint], b: &[KPoint]| a.iter().zip(b).map(|(p, q)| p.kx * q.kx + p.ky * q.ky).sum::<f64>();
        d(&self.speed, &o.speed) + d(&self.accel, &o.accel) + d(&self.bx, &o.bx)
    }
}

/// `A x` for samples `x`: scaled first and second differences and `x` itself.
fn forward_ops(x: &[KPoint], dt: f64) -> Dual {
    let speed = x.windows(2).map(|w| KPoint::new((w[1].kx - w[0].kx) / dt, (w[1].ky - w[0].ky) / dt)).collect();
    let dt2 = dt * dt;
    let accel = x
        .windows(3)
        .map(|w| KPoint::new((w[2].kx - 2.0 * w[1].kx + w[0].kx) / dt2, (w[2].ky - 2.0 * w[1].ky + w[0].ky) / dt2))
        .collect();
    Dual { speed, accel, bx: x.to_vec() }
}

/// Adjoint of [`forward_ops`], returned in sample space.
fn adjoint_ops(q: &Dual, m: usize, dt: f64) -> Vec<KPoint> {
    let mut g = q.bx.clone();
    g.resize(m, KPoint::default());
    for (k, v) in q.speed.iter().enumerate() {
        g[k].kx -= v.kx / dt;
        g[k].ky -= v.ky / dt;
        g[k + 1].kx += v.kx / dt;
        g[k + 1].ky += v.ky / dt;
    }
    let dt2 = dt * dt;
    for (k, a) in q.accel.iter().enumerate() {
        for (off, w) in [(0, 1.0), (1, -2.0), (2, 1.0)] {
            g[k + off].kx += w * a.kx / dt2;
            g[k + off].ky += w * a.ky / dt2;
        }
    }
    g
}

/// Euclidean projection of the dual-space point onto the constraint set S.
fn project_set(u: &Dual, limits: &KinematicLimits) -> Dual {
    let ball = |p: &KPoint, r: f64| {
        let n = p.norm();
        if n > r {
            KPoint::new(p.kx * r / n, p.ky * r / n)
        } else {
            *p
        }
    };
    Dual {
        speed: u.speed.iter().map(|p| ball(p, limits.v_max)).collect(),
        accel: u.accel.iter().map(|p| ball(p, limits.a_max)).collect(),
        bx: u.bx.iter().map(|p| p.clamped()).collect(),
    }
}

fn sub(a: &[KPoint], b: &[KPoint]) -> Vec<KPoint> {
    a.iter().zip(b).map(|(p, q)| KPoint::new(p.kx - q.kx, p.ky - q.ky)).collect()
}

/// Power iteration for `‖A‖²`.
fn lipschitz(map: &CurveMap, n_var: usize, dt: f64) -> f64 {
    let mut v: Vec<KPoint> =
        (0..n_var).map(|i| KPoint::new(((i * 7 + 3) % 11) as f64 - 5.0, ((i * 5 + 1) % 13) as f64 - 6.0)).collect();
    let mut est = 1.0;
    for _ in 0..60 {
        let n = v.iter().map(|p| p.kx * p.kx + p.ky * p.ky).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        v.iter_mut().for_each(|p| {
            p.kx /= n;
            p.ky /= n;
        });
        let x = map.apply(&v);
        let w = map.adjoint(&adjoint_ops(&forward_ops(&x, dt), map.m(), dt));
        est = v.iter().zip(&w).map(|(a, b)| a.kx * b.kx + a.ky * b.ky).sum::<f64>();
        v = w;
    }
    est * 1.05 + 1e-12
}

fn project_impl(z: &[KPoint], map: CurveMap, limits: &KinematicLimits) -> Result<Vec<KPoint>> {
    limits.validate()?;
    let m = map.m();
    let x0 = map.apply(z);
    if strictly_feasible(&x0, limits) {
        return Ok(z.to_vec());
    }
    let lip = lipschitz(&map, z.len(), limits.dt);
    let primal = |q: &Dual| sub(z, &map.adjoint(&adjoint_ops(q, m, limits.dt)));

    let mut q = Dual::zeros(m);
    let mut y = q.clone();
    let mut t = 1.0f64;
    let inner_tol = 1e-9 * limits.v_max.min(limits.a_max);
    let mut psi = z.to_vec();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_DUAL_ITERATIONS {
        iterations = it + 1;
        let x = map.apply(&primal(&y));
        let ax = forward_ops(&x, limits.dt);
        let u = y.zip_map(&ax, |a, b| a + b / lip);
        let scaled = u.zip_map(&u, |a, _| a * lip);
        let proj = project_set(&scaled, limits);
        let q_new = u.zip_map(&proj, |a, b| a - b / lip);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let step = q_new.zip_map(&q, |a, b| a - b);
        // gradient-based adaptive restart
        let restart = y.zip_map(&q_new, |a, b| a - b).dot(&step) > 0.0;
        if restart {
            t = 1.0;
            y = q_new.clone();
        } else {
            y = q_new.zip_map(&step, |a, s| a + (t - 1.0) / t_new * s);
            t = t_new;
        }
        q = q_new;
        if it % 20 == 19 {
            psi = primal(&q);
            let v = violation(&map.apply(&psi), limits);
            if v <= inner_tol && step.dot(&step).sqrt() <= 1e-12 * (1.0 + q.dot(&q).sqrt()) {
                converged = true;
                break;
            }
            if v <= inner_tol * 1e-3 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        psi = primal(&q);
    }
    let x = map.apply(&psi);
    let worst = violation(&x, limits);
    if !converged && worst > 1e-2 * limits.v_max.min(limits.a_max) {
        return Err(Error::ProjectionDiverged { iterations, worst });
    }
    // contract about the (clamped) centroid; rows of J sum to one, so this
    // scales every difference by `s` and keeps the curve inside the box
    let sp = max_speed(&x, limits.dt);
    let ac = max_accel(&x, limits.dt);
    let mut s = 1.0f64;
    if sp > limits.v_max {
        s = s.min(limits.v_max / sp);
    }
    if ac > limits.a_max {
        s = s.min(limits.a_max / ac);
    }
    if s < 1.0 {
        s *= 1.0 - 1e-12;
        let n = x.len() as f64;
        let c = KPoint::new(x.iter().map(|p| p.kx).sum::<f64>() / n, x.iter().map(|p| p.ky).sum::<f64>() / n).clamped();
        psi.iter_mut().for_each(|p| {
            p.kx = c.kx + s * (p.kx - c.kx);
            p.ky = c.ky + s * (p.ky - c.ky);
        });
    }
    Ok(psi)
}

/// Nearest curve (in sample space) satisfying the speed, acceleration, and
/// box constraints. Feasible curves are returned unchanged.
pub fn project_kinematic(samples: &[KPoint], limits: &KinematicLimits) -> Result<Vec<KPoint>> {
    if samples.len() < 2 {
        return Ok(samples.to_vec());
    }
    let out = project_impl(samples, CurveMap::Identity(samples.len()), limits)?;
    Ok(out.into_iter().map(KPoint::clamped).collect())
}

/// Nearest control polygon (in control-point space) whose spline image
/// satisfies the constraints. Feasible polygons are returned unchanged.
pub fn project_controls(control: &[KPoint], basis: &SplineBasis, limits: &KinematicLimits) -> Result<Vec<KPoint>> {
    if control.len() != basis.n_control() {
        return Err(Error::InvalidInput("control count does not match spline basis".into()));
    }
    project_impl(control, CurveMap::Spline(basis), limits)
}
