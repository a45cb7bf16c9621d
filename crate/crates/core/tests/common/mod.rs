#![allow(dead_code)]

use t1map::decay_model::{generate_phantom, render_sequence, PhantomSpec, WeightedSequence};
use t1map::trajectory::{KPoint, Trajectory};

pub const TIMES3: [f64; 3] = [100.0, 1000.0, 3000.0];

/// Every grid frequency `(j - n/2) / n` on both axes, one row per shot.
pub fn cartesian(height: usize, width: usize, frames: usize) -> Trajectory {
    let row: Vec<KPoint> = (0..height)
        .flat_map(|r| {
            (0..width).map(move |c| {
                KPoint::new(
                    (c as f64 - (width / 2) as f64) / width as f64,
                    (r as f64 - (height / 2) as f64) / height as f64,
                )
            })
        })
        .collect();
    let samples = (0..frames).flat_map(|_| row.iter().copied()).collect();
    Trajectory::from_samples(frames, height, width, samples).unwrap()
}

/// Noise-free cardiac sequence on an `n × n` grid, perturbed by `seed`.
pub fn cardiac(n: usize, times: &[f64], seed: u64, noise: f64) -> WeightedSequence {
    let spec = PhantomSpec::cardiac(n, n).perturbed(seed, 0.05);
    render_sequence(&generate_phantom(&spec).unwrap(), times, noise, seed).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
