//! Inversion-recovery signal model, the Look-Locker T1 correction, and
//! synthetic ground truth (ellipse phantoms rendered into weighted sequences).
//!
//! The apparent relaxation curve of a MOLLI acquisition is
//!
//! ```text
//! x(t) = A - B * exp(-t / T1*)
//! ```
//!
//! and the true longitudinal relaxation time follows from the linear
//! correction `T1 = T1* * (B / A - 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inversion times (ms) of a 5(3)3-style MOLLI schedule with nine images.
pub const DEFAULT_INVERSION_TIMES: [f64; 9] = [100.0, 180.0, 260.0, 1050.0, 1130.0, 1210.0, 2000.0, 2080.0, 2960.0];

/// Evaluates the three-parameter recovery curve at time `t` (ms).
pub fn signal(a: f64, b: f64, t1_star: f64, t: f64) -> Result<f64> {
    if !(t1_star > 0.0) {
        return Err(Error::Domain(format!("T1* must be positive, got {t1_star}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    Ok(eval_signal(a, b, t1_star, t))
}

#[inline]
pub(crate) fn eval_signal(a: f64, b: f64, t1_star: f64, t: f64) -> f64 {
    a - b * (-t / t1_star).exp()
}

/// Look-Locker correction from apparent `T1*` to `T1`.
pub fn molli_correct(a: f64, b: f64, t1_star: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::CorrectionUndefined { a });
    }
    if !(t1_star > 0.0) {
        return Err(Error::Domain(format!("T1* must be positive, got {t1_star}")));
    }
    Ok(t1_star * (b / a - 1.0))
}

/// Recovery-curve parameters of one tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub a: f64,
    pub b: f64,
    /// Apparent relaxation time in ms.
    pub t1_star: f64,
}

impl TissueParams {
    pub fn t1(&self) -> Result<f64> {
        molli_correct(self.a, self.b, self.t1_star)
    }
}

/// One ellipse of a phantom. Geometry is in normalized field-of-view units:
/// the grid spans `[-1, 1]` along both axes, `y` pointing down the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    /// Semi-axes `(x, y)` before rotation.
    pub axes: [f64; 2],
    #[serde(default)]
    pub rotation_deg: f64,
    /// Tissue id written into `region_labels`; 0 carves background.
    pub label: u8,
    #[serde(flatten)]
    pub tissue: TissueParams,
}

impl EllipseSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = (dx * c + dy * s) / self.axes[0];
        let v = (-dx * s + dy * c) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub ellipses: Vec<EllipseSpec>,
}

const CARDIAC_TOML: &str = include_str!("../configs/cardiac_phantom.toml");

impl PhantomSpec {
    /// The bundled short-axis cardiac phantom (body, liver, myocardium,
    /// blood pools) at the requested grid size.
    pub fn cardiac(height: usize, width: usize) -> Self {
        #[derive(Deserialize)]
        struct Wrapper {
            phantom: PhantomSpec,
        }
        let mut spec = toml::from_str::<Wrapper>(CARDIAC_TOML).expect("bundled cardiac phantom parses").phantom;
        spec.height = height;
        spec.width = width;
        spec
    }

    /// Returns a randomly perturbed copy: centers shift by up to `amount`
    /// field-of-view units, axes and tissue values scale by up to
    /// `1 ± amount`, rotations move by up to `± 90·amount` degrees.
    /// Polarity (`B ≥ A`) is preserved.
    pub fn perturbed(&self, seed: u64, amount: f64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let jitter = |rng: &mut ChaCha8Rng| 1.0 + amount * (2.0 * rng.random::<f64>() - 1.0);
        for e in &mut out.ellipses {
            e.center[0] += amount * (2.0 * rng.random::<f64>() - 1.0);
            e.center[1] += amount * (2.0 * rng.random::<f64>() - 1.0);
            e.axes[0] *= jitter(&mut rng);
            e.axes[1] *= jitter(&mut rng);
            e.rotation_deg += 90.0 * amount * (2.0 * rng.random::<f64>() - 1.0);
            if e.label != 0 {
                let ratio = (e.tissue.b / e.tissue.a) * jitter(&mut rng).sqrt();
                e.tissue.a *= jitter(&mut rng);
                e.tissue.b = e.tissue.a * ratio.max(1.0);
                e.tissue.t1_star *= jitter(&mut rng);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            if !(e.axes[0] > 0.0 && e.axes[1] > 0.0) {
                return Err(Error::InvalidInput(format!("ellipse {i}: axes must be positive")));
            }
            let t = &e.tissue;
            if e.label == 0 {
                if t.a != 0.0 || t.b != 0.0 || t.t1_star != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "ellipse {i}: background (label 0) must carry zero parameters"
                    )));
                }
            } else if !(t.t1_star > 0.0 && t.a >= 0.0 && t.b >= t.a) {
                return Err(Error::InvalidInput(format!(
                    "ellipse {i}: tissue needs T1* > 0 and B >= A >= 0, got {t:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth parameter maps, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct T1Phantom {
    pub width: usize,
    pub height: usize,
    pub a_map: Vec<f64>,
    pub b_map: Vec<f64>,
    pub t1_star_map: Vec<f64>,
    pub region_labels: Vec<u8>,
}

impl T1Phantom {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels carrying tissue (`label != 0`).
    pub fn tissue_mask(&self) -> Vec<bool> {
        self.region_labels.iter().map(|&l| l != 0).collect()
    }

    /// Corrected T1 map; background pixels are 0.
    pub fn t1_map(&self) -> Vec<f64> {
        (0..self.len())
            .map(|p| {
                if self.region_labels[p] == 0 {
                    0.0
                } else {
                    molli_correct(self.a_map[p], self.b_map[p], self.t1_star_map[p]).unwrap_or(0.0)
                }
            })
            .collect()
    }
}

/// Rasterizes the ellipse list; later ellipses overwrite earlier ones.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<T1Phantom> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut ph = T1Phantom {
        width: w,
        height: h,
        a_map: vec![0.0; n],
        b_map: vec![0.0; n],
        t1_star_map: vec![0.0; n],
        region_labels: vec![0; n],
    };
    for iy in 0..h {
        let y = (iy as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        for ix in 0..w {
            let x = (ix as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let p = iy * w + ix;
            for e in &spec.ellipses {
                if e.contains(x, y) {
                    ph.a_map[p] = e.tissue.a;
                    ph.b_map[p] = e.tissue.b;
                    ph.t1_star_map[p] = e.tissue.t1_star;
                    ph.region_labels[p] = e.label;
                }
            }
        }
    }
    Ok(ph)
}

/// `N` weighted images of one slice at strictly increasing inversion times.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSequence {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f64>>,
    pub inversion_times: Vec<f64>,
    /// Pixels that carry signal. Decay objectives and map metrics are
    /// restricted to it; `None` means every pixel.
    pub support: Option<Vec<bool>>,
}

impl WeightedSequence {
    pub fn new(height: usize, width: usize, frames: Vec<Vec<f64>>, inversion_times: Vec<f64>) -> Result<Self> {
        validate_times(&inversion_times)?;
        if frames.len() != inversion_times.len() {
            return Err(Error::InvalidInput(format!(
                "{} frames but {} inversion times",
                frames.len(),
                inversion_times.len()
            )));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != height * width) {
            return Err(Error::InvalidInput(format!("frame has {} pixels, expected {}", f.len(), height * width)));
        }
        Ok(Self { height, width, frames, inversion_times, support: None })
    }

    pub fn with_support(mut self, support: Vec<bool>) -> Result<Self> {
        if support.len() != self.height * self.width {
            return Err(Error::InvalidInput("support mask size mismatch".into()));
        }
        self.support = Some(support);
        Ok(self)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Signal trace of pixel `p` across frames.
    pub fn trace(&self, p: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f[p]).collect()
    }

    pub fn support_or_all(&self) -> Vec<bool> {
        self.support.clone().unwrap_or_else(|| vec![true; self.n_pixels()])
    }
}

pub(crate) fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 inversion times for three unknowns, got {}",
            times.len()
        )));
    }
    if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput("inversion times must be positive".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("inversion times must be strictly increasing".into()));
    }
    Ok(())
}

/// Renders the phantom at each inversion time, adding seeded Gaussian noise.
/// The tissue mask of the phantom becomes the sequence support.
pub fn render_sequence(
    phantom: &T1Phantom,
    inversion_times: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<WeightedSequence> {
    validate_times(inversion_times)?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = inversion_times
        .iter()
        .map(|&t| {
            (0..phantom.len())
                .map(|p| {
                    let clean = if phantom.t1_star_map[p] > 0.0 {
                        eval_signal(phantom.a_map[p], phantom.b_map[p], phantom.t1_star_map[p], t)
                    } else {
                        0.0
                    };
                    match &noise {
                        Some(n) => clean + n.sample(&mut rng),
                        None => clean,
                    }
                })
                .collect()
        })
        .collect();
    WeightedSequence::new(phantom.height, phantom.width, frames, inversion_times.to_vec())?
        .with_support(phantom.tissue_mask())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse(center: [f64; 2], axes: [f64; 2], label: u8, t1_star: f64) -> EllipseSpec {
        EllipseSpec { center, axes, rotation_deg: 0.0, label, tissue: TissueParams { a: 1.0, b: 2.0, t1_star } }
    }

    #[test]
    fn signal_examples() {
        assert_eq!(signal(1.0, 2.0, 1000.0, 0.0).unwrap(), -1.0);
        let z = signal(1.0, 2.0, 1000.0, 1000.0 * std::f64::consts::LN_2).unwrap();
        assert!(z.abs() < 1e-15);
        // e^{-0.5} to 20 digits: 0.60653065971263342360
        let expected = 1000.0 - 2000.0 * 0.606_530_659_712_633_4;
        assert!((signal(1000.0, 2000.0, 800.0, 400.0).unwrap() - expected).abs() < 1e-10);
        assert!(matches!(signal(1.0, 2.0, 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(signal(1.0, 2.0, -5.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn molli_examples() {
        assert_eq!(molli_correct(1.0, 2.0, 900.0).unwrap(), 900.0);
        assert_eq!(molli_correct(1.0, 1.0, 900.0).unwrap(), 0.0);
        assert!((molli_correct(400.0, 1000.0, 600.0).unwrap() - 900.0).abs() < 1e-12);
        assert!(matches!(molli_correct(0.0, 1.0, 900.0), Err(Error::CorrectionUndefined { .. })));
    }

    #[test]
    fn empty_phantom_is_background() {
        let ph = generate_phantom(&PhantomSpec { height: 16, width: 16, ellipses: vec![] }).unwrap();
        assert!(ph.a_map.iter().all(|&v| v == 0.0));
        assert!(ph.t1_star_map.iter().all(|&v| v == 0.0));
        assert!(ph.region_labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn full_cover_ellipse() {
        let spec = PhantomSpec { height: 16, width: 16, ellipses: vec![ellipse([0.0, 0.0], [2.0, 2.0], 1, 800.0)] };
        let ph = generate_phantom(&spec).unwrap();
        assert!(ph.t1_star_map.iter().all(|&v| v == 800.0));
    }

    #[test]
    fn overlap_takes_later_ellipse() {
        let first = ellipse([-0.2, 0.0], [0.6, 0.5], 1, 700.0);
        let second = ellipse([0.3, 0.1], [0.5, 0.6], 2, 1100.0);
        let spec = PhantomSpec { height: 32, width: 24, ellipses: vec![first.clone(), second.clone()] };
        let ph = generate_phantom(&spec).unwrap();
        // brute-force point-in-ellipse oracle
        let mut overlap = 0;
        for iy in 0..32 {
            for ix in 0..24 {
                let x = (ix as f64 + 0.5) / 24.0 * 2.0 - 1.0;
                let y = (iy as f64 + 0.5) / 32.0 * 2.0 - 1.0;
                let in1 = ((x + 0.2) / 0.6).powi(2) + (y / 0.5).powi(2) <= 1.0;
                let in2 = ((x - 0.3) / 0.5).powi(2) + ((y - 0.1) / 0.6).powi(2) <= 1.0;
                let p = iy * 24 + ix;
                let expected = if in2 {
                    1100.0
                } else if in1 {
                    700.0
                } else {
                    0.0
                };
                assert_eq!(ph.t1_star_map[p], expected, "pixel ({iy},{ix})");
                if in1 && in2 {
                    overlap += 1;
                    assert_eq!(ph.region_labels[p], 2);
                }
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn rotated_ellipse_and_clipping() {
        let mut e = ellipse([0.9, 0.9], [0.5, 0.1], 3, 500.0);
        e.rotation_deg = 90.0;
        let ph = generate_phantom(&PhantomSpec { height: 20, width: 20, ellipses: vec![e] }).unwrap();
        // rotated by 90 degrees the long axis runs along y
        let tall = (0..20).filter(|iy| ph.region_labels[iy * 20 + 19] == 3).count();
        let wide = (0..20).filter(|ix| ph.region_labels[19 * 20 + ix] == 3).count();
        assert!(tall > wide);
    }

    #[test]
    fn invalid_tissue_rejected() {
        let mut e = ellipse([0.0, 0.0], [0.5, 0.5], 1, 700.0);
        e.tissue.b = 0.5;
        assert!(generate_phantom(&PhantomSpec { height: 8, width: 8, ellipses: vec![e] }).is_err());
    }

    #[test]
    fn render_noise_free_follows_model() {
        let ph = generate_phantom(&PhantomSpec::cardiac(24, 24)).unwrap();
        let seq = render_sequence(&ph, &DEFAULT_INVERSION_TIMES, 0.0, 0).unwrap();
        assert_eq!(seq.n_frames(), 9);
        for (i, &t) in DEFAULT_INVERSION_TIMES.iter().enumerate() {
            for p in 0..ph.len() {
                let expected = if ph.t1_star_map[p] > 0.0 {
                    signal(ph.a_map[p], ph.b_map[p], ph.t1_star_map[p], t).unwrap()
                } else {
                    0.0
                };
                assert_eq!(seq.frames[i][p], expected);
            }
        }
    }

    #[test]
    fn render_is_seed_deterministic() {
        let ph = generate_phantom(&PhantomSpec::cardiac(16, 16)).unwrap();
        let a = render_sequence(&ph, &DEFAULT_INVERSION_TIMES, 5.0, 42).unwrap();
        let b = render_sequence(&ph, &DEFAULT_INVERSION_TIMES, 5.0, 42).unwrap();
        let c = render_sequence(&ph, &DEFAULT_INVERSION_TIMES, 5.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn render_zero_crossing() {
        let spec = PhantomSpec { height: 8, width: 8, ellipses: vec![ellipse([0.0, 0.0], [3.0, 3.0], 1, 1000.0)] };
        let ph = generate_phantom(&spec).unwrap();
        let seq = render_sequence(&ph, &[100.0, 693.1, 1500.0], 0.0, 0).unwrap();
        // 1 - 2 exp(-0.6931) = 1 - 2 * 0.500024...
        assert!(seq.frames[1].iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn render_rejects_short_schedules() {
        let ph = generate_phantom(&PhantomSpec::cardiac(8, 8)).unwrap();
        assert!(render_sequence(&ph, &[100.0, 200.0], 0.0, 0).is_err());
        assert!(render_sequence(&ph, &[100.0, 100.0, 200.0], 0.0, 0).is_err());
        assert!(render_sequence(&ph, &[100.0, 200.0, 300.0], -1.0, 0).is_err());
    }

    #[test]
    fn cardiac_defaults_are_tissue() {
        let spec = PhantomSpec::cardiac(64, 64);
        assert!(spec.ellipses.len() >= 4);
        let ph = generate_phantom(&spec).unwrap();
        for p in 0..ph.len() {
            if ph.region_labels[p] != 0 {
                assert!(ph.b_map[p] >= ph.a_map[p] && ph.a_map[p] > 0.0);
                assert!(ph.t1_star_map[p] > 0.0);
            }
        }
        let perturbed = generate_phantom(&spec.perturbed(3, 0.05)).unwrap();
        assert_ne!(perturbed.t1_star_map, ph.t1_star_map);
    }
}
