//! Image-quality measures and the two comparison layouts.
//!
//! *Decay* compares the model sequence rebuilt from a fitted map with the
//! original weighted images, frame by frame. *T1-Map* compares a corrected
//! `T1` map with the map fitted on fully sampled data.

use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};

/// PSNR in dB with the peak taken from the reference's dynamic range.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::InvalidInput(format!("shape mismatch: {} vs {} values", reference.len(), test.len())));
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty images".into()));
    }
    let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mse = reference.iter().zip(test).map(|(r, t)| (r - t) * (r - t)).sum::<f64>() / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = hi - lo;
    if peak <= 0.0 {
        return Err(Error::Domain("reference image is constant; PSNR peak undefined".into()));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const VIF_SCALES: usize = 4;
const VIF_WINDOW: usize = 11;
const VIF_SIGMA_NSQ: f64 = 2.0;

fn gaussian_window() -> Vec<f64> {
    let sigma = VIF_WINDOW as f64 / 5.0;
    let c = (VIF_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..VIF_WINDOW).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Symmetric reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable same-size filter with symmetric boundary handling.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * img[y * w + reflect(x as isize + i as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x]).sum();
        }
    }
    out
}

fn decimate(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(nh * nw);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(img[y * w + x]);
        }
    }
    (out, nh, nw)
}

/// Pixel-domain visual information fidelity over four dyadic scales.
pub fn vif(reference: &[f64], test: &[f64], height: usize, width: usize) -> Result<f64> {
    if reference.len() != height * width || test.len() != height * width {
        return Err(Error::InvalidInput("image sizes do not match the given shape".into()));
    }
    if height < 32 || width < 32 {
        return Err(Error::InvalidInput(format!("VIF needs at least 32×32 pixels, got {height}×{width}")));
    }
    let win = gaussian_window();
    let (mut r, mut t) = (reference.to_vec(), test.to_vec());
    let (mut h, mut w) = (height, width);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..VIF_SCALES {
        if scale > 0 {
            let (rd, nh, nw) = decimate(&filter(&r, h, w, &win), h, w);
            let (td, _, _) = decimate(&filter(&t, h, w, &win), h, w);
            r = rd;
            t = td;
            h = nh;
            w = nw;
        }
        let mu1 = filter(&r, h, w, &win);
        let mu2 = filter(&t, h, w, &win);
        let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
        let tt: Vec<f64> = t.iter().map(|v| v * v).collect();
        let rt: Vec<f64> = r.iter().zip(&t).map(|(a, b)| a * b).collect();
        let (e_rr, e_tt, e_rt) = (filter(&rr, h, w, &win), filter(&tt, h, w, &win), filter(&rt, h, w, &win));
        for i in 0..h * w {
            let (n, d) = vif_terms(e_rr[i] - mu1[i] * mu1[i], e_tt[i] - mu2[i] * mu2[i], e_rt[i] - mu1[i] * mu2[i]);
            num += n;
            den += d;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Domain("reference image has no variance; VIF undefined".into()));
    }
    Ok(num / den)
}

/// Per-location information terms of the Gaussian channel model.
fn vif_terms(s1: f64, s2: f64, s12: f64) -> (f64, f64) {
    const EPS: f64 = 1e-10;
    let mut s1 = s1.max(0.0);
    let s2 = s2.max(0.0);
    let (mut g, mut sv) = if s1 < EPS {
        s1 = 0.0;
        (0.0, s2)
    } else {
        let g = s12 / s1;
        (g, s2 - g * s12)
    };
    if s2 < EPS {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = s2;
        g = 0.0;
    }
    sv = sv.max(EPS);
    ((1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10(), (1.0 + s1 / VIF_SIGMA_NSQ).log10())
}

/// Metrics of one evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub decay_psnr_db: f64,
    pub decay_vif: f64,
    pub map_psnr_db: f64,
    pub map_vif: f64,
    pub per_frame_psnr: Vec<f64>,
    /// `(region label, T1-map PSNR)` when region labels were supplied.
    pub roi_metrics: Option<Vec<(u8, f64)>>,
}

fn masked(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect()
}

fn pick(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Decay-layout PSNR: per-frame PSNR on `mask` between `model` and
/// `original`, averaged over frames.
pub fn decay_psnr(model: &WeightedSequence, original: &WeightedSequence, mask: &[bool]) -> Result<Vec<f64>> {
    if model.n_frames() != original.n_frames() || model.n_pixels() != original.n_pixels() {
        return Err(Error::InvalidInput("model and original sequences differ in shape".into()));
    }
    if mask.len() != original.n_pixels() {
        return Err(Error::InvalidInput("mask size does not match the sequence".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("evaluation mask is empty".into()));
    }
    model.frames.iter().zip(&original.frames).map(|(m, o)| psnr(&pick(o, mask), &pick(m, mask))).collect()
}

/// Both comparison layouts for one sample. Map metrics use the corrected maps
/// restricted to `mask`; decay metrics are computed per frame and averaged.
pub fn evaluate(
    run_map: &[f64],
    oracle_map: &[f64],
    run_seq_model: &WeightedSequence,
    original_seq: &WeightedSequence,
    mask: &[bool],
) -> Result<EvalReport> {
    let (h, w) = (original_seq.height, original_seq.width);
    if run_map.len() != h * w || oracle_map.len() != h * w {
        return Err(Error::InvalidInput("map sizes do not match the sequence".into()));
    }
    let per_frame_psnr = decay_psnr(run_seq_model, original_seq, mask)?;
    let decay_vif = run_seq_model
        .frames
        .iter()
        .zip(&original_seq.frames)
        .map(|(m, o)| vif(&masked(o, mask), &masked(m, mask), h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        decay_psnr_db: mean(&per_frame_psnr),
        decay_vif: mean(&decay_vif),
        map_psnr_db: psnr(&pick(oracle_map, mask), &pick(run_map, mask))?,
        map_vif: vif(&masked(oracle_map, mask), &masked(run_map, mask), h, w)?,
        per_frame_psnr,
        roi_metrics: None,
    })
}

/// T1-map PSNR within each labelled region of `mask`.
pub fn roi_psnr(run_map: &[f64], oracle_map: &[f64], labels: &[u8], mask: &[bool]) -> Result<Vec<(u8, f64)>> {
    let mut present: Vec<u8> = labels.iter().zip(mask).filter(|(&l, &m)| m && l != 0).map(|(&l, _)| l).collect();
    present.sort_unstable();
    present.dedup();
    present
        .into_iter()
        .map(|l| {
            let region: Vec<bool> = labels.iter().zip(mask).map(|(&x, &m)| m && x == l).collect();
            let r = pick(oracle_map, &region);
            let t = pick(run_map, &region);
            // a single-valued region has no dynamic range; fall back to its magnitude
            let value = match psnr(&r, &t) {
                Err(Error::Domain(_)) => {
                    let peak = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let mse = r.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.len() as f64;
                    10.0 * (peak * peak / mse).log10()
                }
                other => other?,
            };
            Ok((l, value))
        })
        .collect()
}
