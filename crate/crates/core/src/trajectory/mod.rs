//! Per-frame non-Cartesian acquisition sets.
//!
//! A [`Trajectory`] holds, for every frame and shot, a short list of control
//! points and the `m` k-space samples interpolated through them by a natural
//! cubic spline. Coordinates are normalized: the sampled region is the box
//! `[-0.5, 0.5]²` in cycles per pixel.

mod io;
mod kinematics;
mod spline;

pub use io::{read_trajectory_csv, write_trajectory_csv, TRAJECTORY_CSV_HEADER};
pub use kinematics::{
    feasibility_report, project_controls, project_kinematic, shot_feasibility, KinematicLimits, ShotFeasibility,
};
pub use spline::{interpolation_jacobian, spline_interpolate, SplineBasis};

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A point in normalized k-space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KPoint {
    pub kx: f64,
    pub ky: f64,
}

impl KPoint {
    pub const fn new(kx: f64, ky: f64) -> Self {
        Self { kx, ky }
    }

    pub fn norm(&self) -> f64 {
        self.kx.hypot(self.ky)
    }

    pub fn clamped(self) -> Self {
        Self { kx: self.kx.clamp(-0.5, 0.5), ky: self.ky.clamp(-0.5, 0.5) }
    }

    pub fn in_box(&self) -> bool {
        (-0.5..=0.5).contains(&self.kx) && (-0.5..=0.5).contains(&self.ky)
    }
}

/// Golden-angle increment `π / φ` in radians.
pub fn golden_angle() -> f64 {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    PI / phi
}

/// Acquisition set: `n_frames × n_shots` curves of `m_points` samples, each
/// the spline image of `n_control` control points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_frames: usize,
    n_shots: usize,
    m_points: usize,
    n_control: usize,
    control_points: Vec<KPoint>,
    samples: Vec<KPoint>,
    shared_across_frames: bool,
}

impl Trajectory {
    /// Builds a trajectory from frame-major control points
    /// (`[frame][shot][control]`). With `shared_across_frames` every frame
    /// must carry the same control points.
    pub fn from_control_points(
        n_frames: usize,
        n_shots: usize,
        m_points: usize,
        n_control: usize,
        control_points: Vec<KPoint>,
        shared_across_frames: bool,
    ) -> Result<Self> {
        if n_frames == 0 || n_shots == 0 {
            return Err(Error::InvalidInput("trajectory needs at least one frame and one shot".into()));
        }
        if control_points.len() != n_frames * n_shots * n_control {
            return Err(Error::InvalidInput(format!(
                "expected {} control points, got {}",
                n_frames * n_shots * n_control,
                control_points.len()
            )));
        }
        if shared_across_frames {
            let per = n_shots * n_control;
            if control_points.chunks(per).any(|f| f != &control_points[..per]) {
                return Err(Error::InvalidInput("shared trajectory has differing frames".into()));
            }
        }
        let basis = SplineBasis::new(n_control, m_points)?;
        let samples = control_points.chunks(n_control).flat_map(|c| basis.apply(c)).collect();
        Ok(Self { n_frames, n_shots, m_points, n_control, control_points, samples, shared_across_frames })
    }

    /// Builds a trajectory whose control points are its samples (`C = m`);
    /// this is how trajectories read from sample files are represented.
    pub fn from_samples(n_frames: usize, n_shots: usize, m_points: usize, samples: Vec<KPoint>) -> Result<Self> {
        if samples.iter().any(|p| !p.in_box()) {
            return Err(Error::InvalidInput("samples must lie in [-0.5, 0.5]^2".into()));
        }
        let per = n_shots * m_points;
        let shared = samples.len() == n_frames * per && per > 0 && samples.chunks(per).all(|f| f == &samples[..per]);
        Self::from_control_points(n_frames, n_shots, m_points, m_points, samples, shared)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_shots(&self) -> usize {
        self.n_shots
    }

    pub fn m_points(&self) -> usize {
        self.m_points
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn shared_across_frames(&self) -> bool {
        self.shared_across_frames
    }

    pub fn control_points(&self) -> &[KPoint] {
        &self.control_points
    }

    pub fn samples(&self) -> &[KPoint] {
        &self.samples
    }

    /// Samples per frame, `n_shots · m_points`.
    pub fn samples_per_frame(&self) -> usize {
        self.n_shots * self.m_points
    }

    pub fn frame_samples(&self, frame: usize) -> &[KPoint] {
        let per = self.samples_per_frame();
        &self.samples[frame * per..(frame + 1) * per]
    }

    pub fn shot_samples(&self, frame: usize, shot: usize) -> &[KPoint] {
        let start = (frame * self.n_shots + shot) * self.m_points;
        &self.samples[start..start + self.m_points]
    }

    pub fn shot_controls(&self, frame: usize, shot: usize) -> &[KPoint] {
        let start = (frame * self.n_shots + shot) * self.n_control;
        &self.control_points[start..start + self.n_control]
    }

    pub fn basis(&self) -> SplineBasis {
        SplineBasis::new(self.n_control, self.m_points).expect("validated at construction")
    }

    /// Replaces the control points (same layout), re-interpolating samples.
    pub fn with_control_points(&self, control_points: Vec<KPoint>) -> Result<Self> {
        Self::from_control_points(
            self.n_frames,
            self.n_shots,
            self.m_points,
            self.n_control,
            control_points,
            self.shared_across_frames,
        )
    }

    /// Re-parametrizes every shot with `n_control` control points taken from
    /// the current curve at equispaced parameters. Exact for straight shots.
    pub fn with_n_control(&self, n_control: usize) -> Result<Self> {
        let basis = SplineBasis::new(self.n_control, n_control)?;
        let ctrl = self.control_points.chunks(self.n_control).flat_map(|c| basis.apply(c)).collect();
        Self::from_control_points(
            self.n_frames,
            self.n_shots,
            self.m_points,
            n_control,
            ctrl,
            self.shared_across_frames,
        )
    }

    /// Copy of this trajectory with all frames replaced by frame 0 and
    /// marked shared.
    pub fn tied_to_first_frame(&self) -> Result<Self> {
        let per = self.n_shots * self.n_control;
        let first = &self.control_points[..per];
        let ctrl = (0..self.n_frames).flat_map(|_| first.iter().copied()).collect();
        Self::from_control_points(self.n_frames, self.n_shots, self.m_points, self.n_control, ctrl, true)
    }

    /// Acceleration factor `(H·W) / (n·m)` for one frame.
    pub fn acceleration(&self, height: usize, width: usize) -> f64 {
        acceleration_factor(height, width, self.n_shots, self.m_points)
    }
}

/// `(H·W) / (n·m)`.
pub fn acceleration_factor(height: usize, width: usize, n_shots: usize, m_points: usize) -> f64 {
    (height * width) as f64 / (n_shots * m_points) as f64
}

fn check_scheme(n_shots: usize, m_points: usize, n_frames: usize) -> Result<()> {
    if n_shots < 1 || m_points < 2 || n_frames < 1 {
        return Err(Error::InvalidInput(format!(
            "scheme needs n_shots >= 1, m_points >= 2, n_frames >= 1 (got {n_shots}, {m_points}, {n_frames})"
        )));
    }
    Ok(())
}

/// Diameter through the origin at `angle`, from radius -0.5 to +0.5, as a
/// two-point (straight) control polygon.
fn spoke(angle: f64) -> [KPoint; 2] {
    let (s, c) = angle.sin_cos();
    [KPoint::new(-0.5 * c, -0.5 * s), KPoint::new(0.5 * c, 0.5 * s)]
}

/// Spoke angles of the radial scheme, `j·π/n`.
pub fn radial_angles(n_shots: usize) -> Vec<f64> {
    (0..n_shots).map(|j| j as f64 * PI / n_shots as f64).collect()
}

/// Spoke angles of frame `frame` in the golden-angle scheme: one global
/// progression `(f·n + j)·Δθ` folded into `[0, π)`.
pub fn golden_angles(n_shots: usize, frame: usize) -> Vec<f64> {
    let d = golden_angle();
    (0..n_shots).map(|j| (((frame * n_shots + j) as f64) * d).rem_euclid(PI)).collect()
}

/// One radial mask (`n` equiangular diameters) shared by all frames.
pub fn radial_scheme(n_shots: usize, m_points: usize, n_frames: usize) -> Result<Trajectory> {
    check_scheme(n_shots, m_points, n_frames)?;
    let angles = radial_angles(n_shots);
    let ctrl = (0..n_frames).flat_map(|_| angles.iter().flat_map(|&a| spoke(a))).collect();
    Trajectory::from_control_points(n_frames, n_shots, m_points, 2, ctrl, true)
}

/// Radial spokes continuing a single golden-angle progression across frames.
pub fn golden_angle_scheme(n_shots: usize, m_points: usize, n_frames: usize) -> Result<Trajectory> {
    check_scheme(n_shots, m_points, n_frames)?;
    let ctrl = (0..n_frames).flat_map(|f| golden_angles(n_shots, f).into_iter().flat_map(spoke)).collect();
    Trajectory::from_control_points(n_frames, n_shots, m_points, 2, ctrl, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_two_shots() {
        assert_eq!(radial_angles(2), vec![0.0, PI / 2.0]);
        let t = radial_scheme(2, 5, 3).unwrap();
        let s1 = t.shot_samples(0, 1);
        assert!(s1[0].kx.abs() < 1e-16 && (s1[0].ky + 0.5).abs() < 1e-16);
    }

    #[test]
    fn radial_spoke_geometry() {
        let t = radial_scheme(7, 33, 2).unwrap();
        for j in 0..7 {
            let s = t.shot_samples(1, j);
            assert!((s[0].norm() - 0.5).abs() < 1e-15);
            assert!((s[32].norm() - 0.5).abs() < 1e-15);
            assert_eq!(s[16], KPoint::new(0.0, 0.0));
            let (sn, cs) = radial_angles(7)[j].sin_cos();
            for (i, p) in s.iter().enumerate() {
                let r = -0.5 + i as f64 / 32.0;
                assert!((p.kx - r * cs).abs() < 1e-15 && (p.ky - r * sn).abs() < 1e-15);
            }
        }
        assert!(t.shared_across_frames());
        assert_eq!(t.frame_samples(0), t.frame_samples(1));
    }

    #[test]
    fn large_grid_acceleration() {
        let t = radial_scheme(16, 513, 1).unwrap();
        assert_eq!(t.samples_per_frame(), 16 * 513);
        assert_eq!(t.acceleration(144, 384), 55296.0 / 8208.0);
        assert!((t.acceleration(144, 384) - 6.737).abs() < 5e-4);
    }

    #[test]
    fn golden_angle_value() {
        let expected = PI * 2.0 / (1.0 + 5f64.sqrt());
        assert_eq!(golden_angle(), expected);
        assert!((golden_angle() - 1.941_61).abs() < 1e-5);
        assert!((golden_angle().to_degrees() - 111.246).abs() < 1e-3);
    }

    #[test]
    fn golden_angle_progression() {
        let n = 5;
        assert_eq!(golden_angles(n, 0)[0], 0.0);
        // brute-force enumeration of the global progression
        let all: Vec<f64> = (0..4).flat_map(|f| golden_angles(n, f)).collect();
        for w in all.windows(2) {
            let diff = (w[1] - w[0]).rem_euclid(PI);
            assert!((diff - golden_angle().rem_euclid(PI)).abs() < 1e-12);
        }
        let t = golden_angle_scheme(n, 9, 4).unwrap();
        assert!(!t.shared_across_frames());
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(t.frame_samples(a), t.frame_samples(b));
            }
        }
    }

    #[test]
    fn with_n_control_is_exact_on_spokes() {
        let t = golden_angle_scheme(3, 17, 2).unwrap();
        let r = t.with_n_control(5).unwrap();
        for (a, b) in t.samples().iter().zip(r.samples()) {
            assert!((a.kx - b.kx).abs() < 1e-15 && (a.ky - b.ky).abs() < 1e-15);
        }
    }

    #[test]
    fn samples_in_box_and_idempotent() {
        let t = golden_angle_scheme(4, 21, 3).unwrap().with_n_control(6).unwrap();
        assert!(t.samples().iter().all(KPoint::in_box));
        let again = t.with_control_points(t.control_points().to_vec()).unwrap();
        assert_eq!(again.samples(), t.samples());
    }

    #[test]
    fn rejects_bad_schemes() {
        assert!(radial_scheme(0, 10, 1).is_err());
        assert!(golden_angle_scheme(3, 1, 1).is_err());
    }
}
