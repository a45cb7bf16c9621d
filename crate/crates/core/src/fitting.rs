//! Per-pixel fits of `A − B·exp(−t/T1*)` by variable projection.
//!
//! For a fixed `T1*` the model is linear in `(A, B)`, so the two amplitudes
//! have a closed form and the residual becomes a function of `T1*` alone.
//! That one-dimensional function is scanned on a log-spaced grid and the best
//! cell is polished with Gauss–Newton.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay_model::{eval_signal, molli_correct, validate_times, WeightedSequence};
use crate::error::{Error, Result};

/// Search range and grid density for `T1*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub t1_star_min: f64,
    pub t1_star_max: f64,
    pub grid_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { t1_star_min: 50.0, t1_star_max: 5000.0, grid_size: 64 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1_star_min > 0.0 && self.t1_star_max > self.t1_star_min && self.t1_star_max.is_finite()) {
            return Err(Error::Config(format!(
                "T1* range [{}, {}] must be positive and increasing",
                self.t1_star_min, self.t1_star_max
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("T1* grid needs at least 2 candidates".into()));
        }
        Ok(())
    }

    /// Log-spaced candidates, endpoints included.
    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.t1_star_min.ln(), self.t1_star_max.ln());
        let n = self.grid_size;
        (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect()
    }
}

/// Result of one pixel fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFit {
    pub a: f64,
    pub b: f64,
    pub t1_star: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub valid: bool,
    /// `T1*` ended on an edge of the search range.
    pub boundary: bool,
    /// All samples were equal, so `T1*` is not identifiable.
    pub degenerate: bool,
}

/// Closed-form `(a, b)` and residual sum of squares at fixed `tau`.
fn amplitudes(y: &[f64], t: &[f64], tau: f64) -> (f64, f64, f64) {
    let e: Vec<f64> = t.iter().map(|&ti| (-ti / tau).exp()).collect();
    amplitudes_for(y, &e)
}

/// As [`amplitudes`], with the basis `e_i = exp(-t_i/tau)` already evaluated.
fn amplitudes_for(y: &[f64], e: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let e_mean = e.iter().sum::<f64>() / n;
    let y_mean = y.iter().sum::<f64>() / n;
    let (mut see, mut sey) = (0.0, 0.0);
    for (ei, yi) in e.iter().zip(y) {
        see += (ei - e_mean) * (ei - e_mean);
        sey += (ei - e_mean) * (yi - y_mean);
    }
    let beta = if see > 0.0 { sey / see } else { 0.0 };
    let a = y_mean - beta * e_mean;
    let b = -beta;
    let rss = y.iter().zip(e).map(|(yi, ei)| (yi - a + b * ei).powi(2)).sum();
    (a, b, rss)
}

/// Grid candidates with their basis vectors, shared by all pixels of a map.
struct Grid {
    taus: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

impl Grid {
    fn new(cfg: &FitConfig, t: &[f64]) -> Self {
        let taus = cfg.grid();
        let basis = taus.iter().map(|&tau| t.iter().map(|&ti| (-ti / tau).exp()).collect()).collect();
        Self { taus, basis }
    }
}

/// Fits one signal trace. `times` must hold at least 3 strictly increasing
/// positive values.
pub fn fit_pixel(values: &[f64], times: &[f64], cfg: &FitConfig) -> Result<PixelFit> {
    validate_times(times)?;
    cfg.validate()?;
    if values.len() != times.len() {
        return Err(Error::InvalidInput(format!("{} values for {} times", values.len(), times.len())));
    }
    Ok(fit_trace(values, times, cfg, &Grid::new(cfg, times)))
}

fn fit_trace(y: &[f64], t: &[f64], cfg: &FitConfig, grid: &Grid) -> PixelFit {
    let n = y.len() as f64;
    if y.iter().all(|&v| v == y[0]) {
        return PixelFit {
            a: y[0],
            b: 0.0,
            t1_star: (cfg.t1_star_min * cfg.t1_star_max).sqrt(),
            residual: 0.0,
            valid: false,
            boundary: false,
            degenerate: true,
        };
    }

    let mut best = (f64::INFINITY, grid.taus[0]);
    for (&tau, e) in grid.taus.iter().zip(&grid.basis) {
        let (_, _, rss) = amplitudes_for(y, e);
        if rss < best.0 {
            best = (rss, tau);
        }
    }
    let (mut rss, mut tau) = best;
    let (lo, hi) = (cfg.t1_star_min, cfg.t1_star_max);

    for _ in 0..50 {
        let (a, b, _) = amplitudes(y, t, tau);
        // model derivative in tau with (a, b) held fixed, projected off span{1, e}
        let e: Vec<f64> = t.iter().map(|&ti| (-ti / tau).exp()).collect();
        let d: Vec<f64> = e.iter().zip(t).map(|(ei, ti)| -b * ei * ti / (tau * tau)).collect();
        let r: Vec<f64> = y.iter().zip(&e).map(|(yi, ei)| yi - a + b * ei).collect();
        let d_perp = project_out(&d, &e);
        let denom: f64 = d_perp.iter().map(|v| v * v).sum();
        if !(denom > 0.0) {
            break;
        }
        let step = d.iter().zip(&r).map(|(di, ri)| di * ri).sum::<f64>() / denom;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = (tau + scale * step).clamp(lo, hi);
            let (_, _, cand_rss) = amplitudes(y, t, cand);
            if cand_rss <= rss {
                accepted = Some((cand, cand_rss));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_rss)) = accepted else { break };
        let rel = (cand - tau).abs() / tau;
        tau = cand;
        rss = cand_rss;
        if rel < 1e-8 {
            break;
        }
    }

    let (a, b, rss_final) = amplitudes(y, t, tau);
    let boundary = tau <= lo * (1.0 + 1e-9) || tau >= hi * (1.0 - 1e-9);
    PixelFit {
        a,
        b,
        t1_star: tau,
        residual: (rss_final.min(rss) / n).sqrt(),
        valid: !boundary && a > 0.0 && a.is_finite() && b.is_finite(),
        boundary,
        degenerate: false,
    }
}

/// Removes the least-squares component of `d` along `{1, e}`.
fn project_out(d: &[f64], e: &[f64]) -> Vec<f64> {
    let n = d.len() as f64;
    let e_mean = e.iter().sum::<f64>() / n;
    let d_mean = d.iter().sum::<f64>() / n;
    let see: f64 = e.iter().map(|v| (v - e_mean).powi(2)).sum();
    let sed: f64 = e.iter().zip(d).map(|(ei, di)| (ei - e_mean) * (di - d_mean)).sum();
    let beta = if see > 0.0 { sed / see } else { 0.0 };
    d.iter().zip(e).map(|(di, ei)| (di - d_mean) - beta * (ei - e_mean)).collect()
}

/// Map-level fit result.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub height: usize,
    pub width: usize,
    pub a_map: Vec<f64>,
    pub b_map: Vec<f64>,
    pub t1_star_map: Vec<f64>,
    /// Corrected `T1`; zero where the fit is invalid.
    pub t1_map: Vec<f64>,
    pub residual_map: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl DecayFit {
    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Fits every pixel of `seq` independently. Pixels outside `mask` are
/// reported invalid with zero parameters.
pub fn fit_map(seq: &WeightedSequence, mask: Option<&[bool]>, cfg: &FitConfig) -> Result<DecayFit> {
    validate_times(&seq.inversion_times)?;
    cfg.validate()?;
    let n = seq.n_pixels();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidInput("mask size does not match the sequence".into()));
        }
    }
    let fits = fit_pixels(seq, mask, cfg);
    Ok(assemble(seq.height, seq.width, &fits))
}

/// Per-pixel fits (`None` outside the mask), in pixel order.
pub(crate) fn fit_pixels(seq: &WeightedSequence, mask: Option<&[bool]>, cfg: &FitConfig) -> Vec<Option<PixelFit>> {
    let times = &seq.inversion_times;
    let grid = Grid::new(cfg, times);
    (0..seq.n_pixels())
        .into_par_iter()
        .map(|p| {
            if mask.is_some_and(|m| !m[p]) {
                return None;
            }
            Some(fit_trace(&seq.trace(p), times, cfg, &grid))
        })
        .collect()
}

pub(crate) fn assemble(height: usize, width: usize, fits: &[Option<PixelFit>]) -> DecayFit {
    let n = fits.len();
    let mut out = DecayFit {
        height,
        width,
        a_map: vec![0.0; n],
        b_map: vec![0.0; n],
        t1_star_map: vec![0.0; n],
        t1_map: vec![0.0; n],
        residual_map: vec![0.0; n],
        valid_mask: vec![false; n],
    };
    for (p, f) in fits.iter().enumerate() {
        let Some(f) = f else { continue };
        out.a_map[p] = f.a;
        out.b_map[p] = f.b;
        out.t1_star_map[p] = f.t1_star;
        out.residual_map[p] = f.residual;
        if f.valid {
            if let Ok(t1) = molli_correct(f.a, f.b, f.t1_star) {
                out.t1_map[p] = t1;
                out.valid_mask[p] = true;
            }
        }
    }
    out
}

/// Evaluates the fitted model at `times`; invalid pixels are zero.
pub fn model_sequence(fit: &DecayFit, times: &[f64]) -> Result<WeightedSequence> {
    let n = fit.valid_mask.len();
    let frames = times
        .iter()
        .map(|&t| {
            (0..n)
                .map(|p| {
                    if fit.valid_mask[p] {
                        eval_signal(fit.a_map[p], fit.b_map[p], fit.t1_star_map[p], t)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let seq = WeightedSequence::new(fit.height, fit.width, frames, times.to_vec())?;
    seq.with_support(fit.valid_mask.clone())
}

/// Vector–Jacobian product of the fit map `y ↦ (a, b, T1*)`: returns
/// `∂L/∂y` given `∂L/∂(a, b, T1*)`.
///
/// At an interior minimum the parameters satisfy `∇_θ ½‖y − g(θ)‖² = 0`, so
/// by implicit differentiation `∂θ/∂y = H⁻¹ Jᵀ` with the full Hessian
/// `H = JᵀJ − Σ r_i ∇²g_i`. When `T1*` sits on the range boundary, or the
/// Hessian is singular, `T1*` is treated as locally constant and only the
/// linear amplitudes carry gradient.
pub(crate) fn fit_vjp(y: &[f64], t: &[f64], fit: &PixelFit, dtheta: [f64; 3]) -> Vec<f64> {
    let (a, b, tau) = (fit.a, fit.b, fit.t1_star);
    let n = y.len();
    let e: Vec<f64> = t.iter().map(|&ti| (-ti / tau).exp()).collect();
    let r: Vec<f64> = (0..n).map(|i| y[i] - (a - b * e[i])).collect();
    let jac: Vec<[f64; 3]> = (0..n).map(|i| [1.0, -e[i], -b * e[i] * t[i] / (tau * tau)]).collect();

    if !fit.boundary && !fit.degenerate {
        let mut h = [[0.0; 3]; 3];
        for row in &jac {
            for p in 0..3 {
                for q in 0..3 {
                    h[p][q] += row[p] * row[q];
                }
            }
        }
        for i in 0..n {
            let (ti, ei) = (t[i], e[i]);
            let g_bt = -ei * ti / (tau * tau);
            let g_tt = -b * ti * ei * (ti / tau.powi(4) - 2.0 / tau.powi(3));
            h[1][2] -= r[i] * g_bt;
            h[2][1] -= r[i] * g_bt;
            h[2][2] -= r[i] * g_tt;
        }
        if let Some(z) = solve3(h, dtheta) {
            return jac.iter().map(|row| row[0] * z[0] + row[1] * z[1] + row[2] * z[2]).collect();
        }
    }

    // amplitudes only
    let mut h = [[0.0; 2]; 2];
    for row in &jac {
        h[0][0] += row[0] * row[0];
        h[0][1] += row[0] * row[1];
        h[1][1] += row[1] * row[1];
    }
    h[1][0] = h[0][1];
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if !(det.abs() > 1e-14 * (h[0][0] * h[1][1]).abs()) {
        // e is constant across samples: only the mean is identifiable
        return vec![dtheta[0] / n as f64; n];
    }
    let z0 = (h[1][1] * dtheta[0] - h[0][1] * dtheta[1]) / det;
    let z1 = (h[0][0] * dtheta[1] - h[1][0] * dtheta[0]) / det;
    jac.iter().map(|row| row[0] * z0 + row[1] * z1).collect()
}

/// Solves a 3×3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    let scale = m.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = rhs[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}
