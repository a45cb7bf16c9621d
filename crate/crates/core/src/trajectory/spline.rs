//! Natural cubic spline through uniformly spaced control points.
//!
//! Evaluation is linear in the node values, so the whole interpolation is a
//! fixed `m × C` weight matrix. Gradients with respect to the control points
//! are the transpose of that matrix applied to the sample gradients.

use crate::error::{Error, Result};

use super::KPoint;

/// Dense `m × C` interpolation weights of a natural cubic spline with knots
/// at `0, 1, …, C-1` evaluated at `m` equispaced parameters spanning them.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    n_control: usize,
    m_points: usize,
    weights: Vec<f64>,
}

impl SplineBasis {
    pub fn new(n_control: usize, m_points: usize) -> Result<Self> {
        if n_control < 2 {
            return Err(Error::InvalidInput(format!("spline needs at least 2 control points, got {n_control}")));
        }
        if m_points < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 samples per shot, got {m_points}")));
        }
        let c = n_control;
        // Column j of `second` holds the knot second derivatives produced by
        // the unit node vector e_j.
        let mut second = vec![0.0; c * c];
        for j in 0..c {
            let mut rhs = vec![0.0; c];
            for i in 1..c - 1 {
                let e = |k: usize| if k == j { 1.0 } else { 0.0 };
                rhs[i] = 6.0 * (e(i + 1) - 2.0 * e(i) + e(i - 1));
            }
            let m = solve_natural(&rhs);
            for i in 0..c {
                second[i * c + j] = m[i];
            }
        }

        let mut weights = vec![0.0; m_points * c];
        for s in 0..m_points {
            let u = (s * (c - 1)) as f64 / (m_points - 1) as f64;
            let seg = (u.floor() as usize).min(c - 2);
            let t = u - seg as f64;
            let w0 = 1.0 - t;
            let w1 = t;
            let c0 = (w0 * w0 * w0 - w0) / 6.0;
            let c1 = (t * t * t - t) / 6.0;
            let row = &mut weights[s * c..(s + 1) * c];
            row[seg] += w0;
            row[seg + 1] += w1;
            if c0 != 0.0 || c1 != 0.0 {
                for j in 0..c {
                    row[j] += c0 * second[seg * c + j] + c1 * second[(seg + 1) * c + j];
                }
            }
        }
        Ok(Self { n_control, m_points, weights })
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn m_points(&self) -> usize {
        self.m_points
    }

    /// Row-major `m × C` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.weights[s * self.n_control..(s + 1) * self.n_control]
    }

    /// Spline image of `control` without clamping.
    pub fn apply_unclamped(&self, control: &[KPoint]) -> Vec<KPoint> {
        debug_assert_eq!(control.len(), self.n_control);
        (0..self.m_points)
            .map(|s| {
                let mut p = KPoint::new(0.0, 0.0);
                for (w, c) in self.row(s).iter().zip(control) {
                    p.kx += w * c.kx;
                    p.ky += w * c.ky;
                }
                p
            })
            .collect()
    }

    /// Spline image of `control`, clamped to the normalized k-space box.
    pub fn apply(&self, control: &[KPoint]) -> Vec<KPoint> {
        self.apply_unclamped(control).into_iter().map(KPoint::clamped).collect()
    }

    /// `Jᵀ g`: pulls per-sample gradients back to the control points.
    pub fn pullback(&self, sample_grad: &[KPoint]) -> Vec<KPoint> {
        let mut out = vec![KPoint::new(0.0, 0.0); self.n_control];
        for (s, g) in sample_grad.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(s)) {
                o.kx += w * g.kx;
                o.ky += w * g.ky;
            }
        }
        out
    }
}

/// Solves the natural-spline moment system `M[i-1] + 4 M[i] + M[i+1] = rhs[i]`
/// with `M[0] = M[C-1] = 0` (Thomas algorithm).
fn solve_natural(rhs: &[f64]) -> Vec<f64> {
    let c = rhs.len();
    let mut m = vec![0.0; c];
    if c < 3 {
        return m;
    }
    let n = c - 2;
    let mut diag = vec![4.0; n];
    let mut r: Vec<f64> = rhs[1..c - 1].to_vec();
    for i in 1..n {
        let f = 1.0 / diag[i - 1];
        diag[i] -= f;
        r[i] -= f * r[i - 1];
    }
    m[n] = r[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m[i + 1] = (r[i] - m[i + 2]) / diag[i];
    }
    m
}

/// Interpolates `m_points` samples through `control_points` (clamped to the
/// k-space box).
pub fn spline_interpolate(control_points: &[KPoint], m_points: usize) -> Result<Vec<KPoint>> {
    Ok(SplineBasis::new(control_points.len(), m_points)?.apply(control_points))
}

/// The `m × C` matrix `J` with `samples = J · control_points` (before
/// clamping), row-major.
pub fn interpolation_jacobian(control_points: &[KPoint], m_points: usize) -> Result<Vec<f64>> {
    Ok(SplineBasis::new(control_points.len(), m_points)?.weights)
}
