//! Direct non-uniform DFT on a centered pixel grid.
//!
//! For a grid of `H × W` pixels with integer offsets `r = (rx, ry)` measured
//! from the grid midpoint (`rx = ix - W/2`, `ry = iy - H/2`), the forward
//! operator is
//!
//! ```text
//! s_j = Σ_r x(r) · exp(-i 2π (kx_j rx + ky_j ry))
//! ```
//!
//! The exponential factorizes over the two axes, so a batch of images sharing
//! one coordinate set is transformed with one dense matrix product along `x`
//! followed by a short reduction along `y`. The cost is exactly that of the
//! direct sum; nothing is approximated.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::trajectory::KPoint;

/// `C = A · B` for strided row/column layouts (alpha = 1, beta = 0).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the debug assertions above describe the extents touched by the
    // kernel; every caller passes buffers sized from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn check_coords(coords: &[KPoint]) -> Result<()> {
    match coords.iter().find(|p| !p.in_box() || !p.kx.is_finite() || !p.ky.is_finite()) {
        Some(p) => Err(Error::CoordinateOutOfRange { kx: p.kx, ky: p.ky }),
        None => Ok(()),
    }
}

/// Integer offsets of a grid axis of length `n`, centered at `n / 2`.
pub(crate) fn offsets(n: usize) -> Vec<f64> {
    let c = (n / 2) as f64;
    (0..n).map(|i| i as f64 - c).collect()
}

/// Forward samples of one image and, optionally, their derivatives with
/// respect to each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<Complex64>,
    pub d_kx: Vec<Complex64>,
    pub d_ky: Vec<Complex64>,
}

/// Precomputed per-axis exponentials for one coordinate set.
#[derive(Debug, Clone)]
pub struct NudftPlan {
    height: usize,
    width: usize,
    coords: Vec<KPoint>,
    /// `4M × W`, rows: Re E_x, Im E_x, rx·Re E_x, rx·Im E_x.
    ex4: Vec<f64>,
    /// `H × M` (transposed), `E_y[j, iy]`.
    ey_re: Vec<f64>,
    ey_im: Vec<f64>,
    ry: Vec<f64>,
}

impl NudftPlan {
    pub fn new(height: usize, width: usize, coords: &[KPoint]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image grid must be non-empty".into()));
        }
        check_coords(coords)?;
        let m = coords.len();
        let rx = offsets(width);
        let ry = offsets(height);
        let mut ex4 = vec![0.0; 4 * m * width];
        for (j, k) in coords.iter().enumerate() {
            for (ix, &r) in rx.iter().enumerate() {
                let (s, c) = (-2.0 * PI * k.kx * r).sin_cos();
                ex4[j * width + ix] = c;
                ex4[(m + j) * width + ix] = s;
                ex4[(2 * m + j) * width + ix] = r * c;
                ex4[(3 * m + j) * width + ix] = r * s;
            }
        }
        let mut ey_re = vec![0.0; height * m];
        let mut ey_im = vec![0.0; height * m];
        for (j, k) in coords.iter().enumerate() {
            for (iy, &r) in ry.iter().enumerate() {
                let (s, c) = (-2.0 * PI * k.ky * r).sin_cos();
                ey_re[iy * m + j] = c;
                ey_im[iy * m + j] = s;
            }
        }
        Ok(Self { height, width, coords: coords.to_vec(), ex4, ey_re, ey_im, ry })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn coords(&self) -> &[KPoint] {
        &self.coords
    }

    pub fn n_samples(&self) -> usize {
        self.coords.len()
    }

    /// Forward transform of a batch of real images (each `H·W`, row-major).
    pub fn forward_real(&self, images: &[&[f64]], with_grad: bool) -> Vec<Spectrum> {
        let (h, w, m) = (self.height, self.width, self.coords.len());
        let p = images.len();
        if p == 0 {
            return Vec::new();
        }
        let mut stacked = Vec::with_capacity(p * h * w);
        for img in images {
            assert_eq!(img.len(), h * w, "image size does not match plan");
            stacked.extend_from_slice(img);
        }
        let blocks = if with_grad { 4 } else { 2 };
        let n = blocks * m;
        let mut t = vec![0.0; p * h * n];
        // T (PH × nM) = X (PH × W) · ex4ᵀ (W × nM)
        gemm(p * h, w, n, &stacked, w, 1, &self.ex4, 1, w, &mut t);

        let two_pi = 2.0 * PI;
        (0..p)
            .map(|pi| {
                let mut values = vec![Complex64::new(0.0, 0.0); m];
                let mut tx = vec![Complex64::new(0.0, 0.0); if with_grad { m } else { 0 }];
                let mut ty = vec![Complex64::new(0.0, 0.0); if with_grad { m } else { 0 }];
                for iy in 0..h {
                    let row = &t[(pi * h + iy) * n..(pi * h + iy + 1) * n];
                    let ey_re = &self.ey_re[iy * m..(iy + 1) * m];
                    let ey_im = &self.ey_im[iy * m..(iy + 1) * m];
                    let r = self.ry[iy];
                    for j in 0..m {
                        let e = Complex64::new(ey_re[j], ey_im[j]);
                        let v = e * Complex64::new(row[j], row[m + j]);
                        values[j] += v;
                        if with_grad {
                            tx[j] += e * Complex64::new(row[2 * m + j], row[3 * m + j]);
                            ty[j] += v * r;
                        }
                    }
                }
                // d/dk of exp(-i2π k r) is (-i2π r) exp(...)
                let mi = Complex64::new(0.0, -two_pi);
                Spectrum {
                    values,
                    d_kx: tx.into_iter().map(|z| z * mi).collect(),
                    d_ky: ty.into_iter().map(|z| z * mi).collect(),
                }
            })
            .collect()
    }

    /// `U[pH + iy, j] = conj(E_y[j, iy]) · s_pj`, split into real blocks
    /// `[Re U | Im U]` of width `2M`.
    fn adjoint_lift(&self, samples: &[&[Complex64]]) -> Vec<f64> {
        let (h, m) = (self.height, self.coords.len());
        let p = samples.len();
        let mut u = vec![0.0; p * h * 2 * m];
        for (pi, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), m, "sample count does not match plan");
            for iy in 0..h {
                let row = &mut u[(pi * h + iy) * 2 * m..(pi * h + iy + 1) * 2 * m];
                let ey_re = &self.ey_re[iy * m..(iy + 1) * m];
                let ey_im = &self.ey_im[iy * m..(iy + 1) * m];
                for j in 0..m {
                    let z = Complex64::new(ey_re[j], -ey_im[j]) * s[j];
                    row[j] = z.re;
                    row[m + j] = z.im;
                }
            }
        }
        u
    }

    /// Real part of the adjoint transform for a batch of sample vectors.
    pub fn adjoint_real(&self, samples: &[&[Complex64]]) -> Vec<Vec<f64>> {
        let (h, w, m) = (self.height, self.width, self.coords.len());
        let p = samples.len();
        if p == 0 {
            return Vec::new();
        }
        let u = self.adjoint_lift(samples);
        // Re X = Re U · Re E_x + Im U · Im E_x = [Re U | Im U] · [Re E_x; Im E_x]
        let mut x = vec![0.0; p * h * w];
        gemm(p * h, 2 * m, w, &u, 2 * m, 1, &self.ex4, w, 1, &mut x);
        x.chunks(h * w).map(<[f64]>::to_vec).collect()
    }

    /// Complex adjoint transform for a batch of sample vectors.
    pub fn adjoint(&self, samples: &[&[Complex64]]) -> Vec<Vec<Complex64>> {
        let (h, w, m) = (self.height, self.width, self.coords.len());
        let p = samples.len();
        if p == 0 {
            return Vec::new();
        }
        let u = self.adjoint_lift(samples);
        let re = {
            let mut x = vec![0.0; p * h * w];
            gemm(p * h, 2 * m, w, &u, 2 * m, 1, &self.ex4, w, 1, &mut x);
            x
        };
        // Im X = Im U · Re E_x - Re U · Im E_x = [Re U | Im U] · [-Im E_x; Re E_x]
        let mut rot = vec![0.0; 2 * m * w];
        for j in 0..m {
            for ix in 0..w {
                rot[j * w + ix] = -self.ex4[(m + j) * w + ix];
                rot[(m + j) * w + ix] = self.ex4[j * w + ix];
            }
        }
        let mut im = vec![0.0; p * h * w];
        gemm(p * h, 2 * m, w, &u, 2 * m, 1, &rot, w, 1, &mut im);
        (0..p).map(|pi| (0..h * w).map(|q| Complex64::new(re[pi * h * w + q], im[pi * h * w + q])).collect()).collect()
    }

    /// Transform of the all-ones image, `D_j = Σ_r exp(-i2π k_j·r)`, with its
    /// coordinate derivatives. Separable, so it costs `O(M (H + W))`.
    pub fn ones_spectrum(&self) -> Spectrum {
        let (h, w, m) = (self.height, self.width, self.coords.len());
        let two_pi = 2.0 * PI;
        let mut out =
            Spectrum { values: Vec::with_capacity(m), d_kx: Vec::with_capacity(m), d_ky: Vec::with_capacity(m) };
        for j in 0..m {
            let mut dx = Complex64::new(0.0, 0.0);
            let mut dxr = Complex64::new(0.0, 0.0);
            for ix in 0..w {
                dx += Complex64::new(self.ex4[j * w + ix], self.ex4[(m + j) * w + ix]);
                dxr += Complex64::new(self.ex4[(2 * m + j) * w + ix], self.ex4[(3 * m + j) * w + ix]);
            }
            let mut dy = Complex64::new(0.0, 0.0);
            let mut dyr = Complex64::new(0.0, 0.0);
            for iy in 0..h {
                let e = Complex64::new(self.ey_re[iy * m + j], self.ey_im[iy * m + j]);
                dy += e;
                dyr += e * self.ry[iy];
            }
            let mi = Complex64::new(0.0, -two_pi);
            out.values.push(dx * dy);
            out.d_kx.push(mi * dxr * dy);
            out.d_ky.push(mi * dx * dyr);
        }
        out
    }
}

/// Forward NUDFT of a complex image.
pub fn nudft_forward(image: &[Complex64], height: usize, width: usize, coords: &[KPoint]) -> Result<Vec<Complex64>> {
    if image.len() != height * width || image.is_empty() {
        return Err(Error::InvalidInput("image size does not match grid".into()));
    }
    let plan = NudftPlan::new(height, width, coords)?;
    let re: Vec<f64> = image.iter().map(|z| z.re).collect();
    let im: Vec<f64> = image.iter().map(|z| z.im).collect();
    let out = plan.forward_real(&[&re, &im], false);
    Ok(out[0].values.iter().zip(&out[1].values).map(|(a, b)| a + Complex64::new(0.0, 1.0) * b).collect())
}

/// Forward NUDFT of a real image.
pub fn nudft_forward_real(image: &[f64], height: usize, width: usize, coords: &[KPoint]) -> Result<Vec<Complex64>> {
    if image.len() != height * width || image.is_empty() {
        return Err(Error::InvalidInput("image size does not match grid".into()));
    }
    let plan = NudftPlan::new(height, width, coords)?;
    Ok(plan.forward_real(&[image], false).pop().expect("one image").values)
}

/// Exact adjoint: `x(r) = Σ_j s_j exp(+i2π k_j·r)`.
pub fn nudft_adjoint(samples: &[Complex64], coords: &[KPoint], height: usize, width: usize) -> Result<Vec<Complex64>> {
    if samples.len() != coords.len() {
        return Err(Error::InvalidInput(format!("{} samples for {} coordinates", samples.len(), coords.len())));
    }
    let plan = NudftPlan::new(height, width, coords)?;
    Ok(plan.adjoint(&[samples]).pop().expect("one sample vector"))
}

/// Gradient of a real loss with respect to each coordinate, given upstream
/// cotangents `u_j = ∂L/∂Re s_j + i ∂L/∂Im s_j` of the forward samples of a
/// real image: `∂L/∂k_j = Re(conj(u_j) · ∂s_j/∂k_j)`.
pub fn coord_gradient(
    image: &[f64],
    height: usize,
    width: usize,
    coords: &[KPoint],
    upstream: &[Complex64],
) -> Result<Vec<KPoint>> {
    if image.len() != height * width {
        return Err(Error::InvalidInput("image size does not match grid".into()));
    }
    if upstream.len() != coords.len() {
        return Err(Error::InvalidInput("one cotangent per coordinate required".into()));
    }
    let plan = NudftPlan::new(height, width, coords)?;
    let spec = plan.forward_real(&[image], true).pop().expect("one image");
    Ok(upstream
        .iter()
        .zip(spec.d_kx.iter().zip(&spec.d_ky))
        .map(|(u, (dx, dy))| KPoint::new((u.conj() * dx).re, (u.conj() * dy).re))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Quadratic-time direct evaluation, written independently of the plan.
    fn direct_forward(img: &[Complex64], h: usize, w: usize, coords: &[KPoint]) -> Vec<Complex64> {
        coords
            .iter()
            .map(|k| {
                let mut acc = c(0.0, 0.0);
                for iy in 0..h {
                    for ix in 0..w {
                        let rx = ix as f64 - (w / 2) as f64;
                        let ry = iy as f64 - (h / 2) as f64;
                        let ph = -2.0 * PI * (k.kx * rx + k.ky * ry);
                        acc += img[iy * w + ix] * c(ph.cos(), ph.sin());
                    }
                }
                acc
            })
            .collect()
    }

    fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<KPoint> {
        (0..n).map(|_| KPoint::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect()
    }

    #[test]
    fn centered_impulse_has_flat_spectrum() {
        let (h, w) = (8, 6);
        let mut img = vec![0.0; h * w];
        img[(h / 2) * w + w / 2] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = random_coords(&mut rng, 13);
        let s = nudft_forward_real(&img, h, w, &coords).unwrap();
        for v in s {
            assert!((v - c(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_image_zero_samples() {
        let coords = vec![KPoint::new(0.1, -0.3); 4];
        let s = nudft_forward_real(&[0.0; 16], 4, 4, &coords).unwrap();
        assert!(s.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (7, 10);
        let img: Vec<Complex64> = (0..h * w).map(|_| c(rng.random(), rng.random())).collect();
        let coords = random_coords(&mut rng, 29);
        let fast = nudft_forward(&img, h, w, &coords).unwrap();
        let slow = direct_forward(&img, h, w, &coords);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
            let m = rng.random_range(1..40);
            let coords = random_coords(&mut rng, m);
            let x: Vec<Complex64> =
                (0..h * w).map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
            let s: Vec<Complex64> = (0..m).map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
            let fx = nudft_forward(&x, h, w, &coords).unwrap();
            let fhs = nudft_adjoint(&s, &coords, h, w).unwrap();
            let lhs: Complex64 = fx.iter().zip(&s).map(|(a, b)| a * b.conj()).sum();
            let rhs: Complex64 = x.iter().zip(&fhs).map(|(a, b)| a * b.conj()).sum();
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1e-300));
        }
    }

    #[test]
    fn single_dc_sample_gives_constant_image() {
        let x = nudft_adjoint(&[c(1.0, 0.0)], &[KPoint::new(0.0, 0.0)], 5, 4).unwrap();
        assert!(x.iter().all(|v| (v - c(1.0, 0.0)).norm() == 0.0));
    }

    #[test]
    fn rejects_out_of_range() {
        let err = nudft_forward_real(&[1.0; 4], 2, 2, &[KPoint::new(0.6, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::CoordinateOutOfRange { .. }));
        assert!(nudft_adjoint(&[c(1.0, 0.0)], &[], 2, 2).is_err());
    }

    #[test]
    fn ones_spectrum_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords = random_coords(&mut rng, 11);
        let plan = NudftPlan::new(6, 9, &coords).unwrap();
        let ones = vec![1.0; 54];
        let full = plan.forward_real(&[&ones], true).pop().unwrap();
        let sep = plan.ones_spectrum();
        for j in 0..11 {
            assert!((full.values[j] - sep.values[j]).norm() < 1e-12);
            assert!((full.d_kx[j] - sep.d_kx[j]).norm() < 1e-10);
            assert!((full.d_ky[j] - sep.d_ky[j]).norm() < 1e-10);
        }
    }

    #[test]
    fn gradient_trivial_cases() {
        let coords = vec![KPoint::new(0.1, 0.2), KPoint::new(-0.3, 0.05)];
        let up = vec![c(1.0, 0.5), c(-0.2, 0.3)];
        let g = coord_gradient(&[0.0; 16], 4, 4, &coords, &up).unwrap();
        assert!(g.iter().all(|p| p.kx == 0.0 && p.ky == 0.0));
        let mut imp = vec![0.0; 16];
        imp[2 * 4 + 2] = 3.0;
        let g = coord_gradient(&imp, 4, 4, &coords, &up).unwrap();
        assert!(g.iter().all(|p| p.kx == 0.0 && p.ky == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (8, 8);
        let img: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.3).collect();
        let coords: Vec<KPoint> =
            (0..5).map(|_| KPoint::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4))).collect();
        let up: Vec<Complex64> = (0..5).map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let loss = |k: &[KPoint]| -> f64 {
            let s = direct_forward(&img.iter().map(|&v| c(v, 0.0)).collect::<Vec<_>>(), h, w, k);
            s.iter().zip(&up).map(|(a, u)| (u.conj() * a).re).sum()
        };
        let g = coord_gradient(&img, h, w, &coords, &up).unwrap();
        let eps = 1e-6;
        for j in 0..5 {
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
                let an = if axis == 0 { g[j].kx } else { g[j].ky };
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "j={j} axis={axis}: {fd} vs {an}");
            }
        }
    }
}
