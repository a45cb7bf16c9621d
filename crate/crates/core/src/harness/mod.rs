//! Command-line workflows: phantom generation, benchmark runs, reports,
//! standalone fitting and baseline trajectories.

mod config;
mod experiment;
mod report;
mod tensor;

pub use config::{DataSection, ExperimentConfig, ExperimentSection, Method, PhantomSection, TrainingSection};
pub use experiment::{
    cell_dir, generate_dataset, phantom_seed, read_results, run_experiment, CellMetrics, Dataset, ResultRow,
    RunOptions, RESULTS_HEADER,
};
pub use report::{aggregate, format_table, write_report, MISSING};
pub use tensor::{DType, RawTensor, TensorData, MAGIC, VERSION};

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::decay_model::WeightedSequence;
use crate::error::{Error, Result};
use crate::fitting::{fit_map, DecayFit, FitConfig};
use crate::trajectory::{golden_angle_scheme, radial_scheme, write_trajectory_csv};

/// Process exit status for a command result: 0 on success, 2 for
/// configuration errors, 3 for everything else.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 3,
    }
}

fn write_provenance(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let text = format!(
        "config_sha256 = \"{}\"\nseeds = {:?}\ngenerator = \"{} {}\"\n",
        cfg.digest(),
        seeds,
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    );
    fs::write(out.join("provenance.toml"), text)?;
    Ok(())
}

fn write_sequence(seq: &WeightedSequence, dir: &Path) -> Result<()> {
    let (h, w) = (seq.height as u32, seq.width as u32);
    let flat: Vec<f64> = seq.frames.iter().flatten().copied().collect();
    RawTensor::from_f64(vec![seq.n_frames() as u32, h, w], &flat)?.write(&dir.join("sequence.t1pt"))?;
    RawTensor::from_f64(vec![seq.n_frames() as u32], &seq.inversion_times)?.write(&dir.join("times.t1pt"))?;
    RawTensor::from_mask(vec![h, w], &seq.support_or_all())?.write(&dir.join("support.t1pt"))?;
    Ok(())
}

/// Writes every phantom of every seed as raw tensors under
/// `out/seed_<s>/phantom_<k>/`, plus `out/provenance.toml`.
pub fn cli_phantom(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for &seed in &cfg.experiment.seeds {
        let data = generate_dataset(cfg, seed)?;
        for (k, (ph, seq)) in data.phantoms.iter().zip(&data.sequences).enumerate() {
            let dir = out.join(format!("seed_{seed}")).join(format!("phantom_{k}"));
            fs::create_dir_all(&dir)?;
            let dims = vec![ph.height as u32, ph.width as u32];
            RawTensor::from_f64(dims.clone(), &ph.a_map)?.write(&dir.join("a.t1pt"))?;
            RawTensor::from_f64(dims.clone(), &ph.b_map)?.write(&dir.join("b.t1pt"))?;
            RawTensor::from_f64(dims.clone(), &ph.t1_star_map)?.write(&dir.join("t1_star.t1pt"))?;
            RawTensor::from_f64(dims.clone(), &ph.t1_map())?.write(&dir.join("t1.t1pt"))?;
            RawTensor::new(dims, TensorData::U8(ph.region_labels.clone()))?.write(&dir.join("labels.t1pt"))?;
            write_sequence(seq, &dir)?;
        }
    }
    write_provenance(cfg, &cfg.experiment.seeds, out)
}

/// Loads `sequence.t1pt`, `times.t1pt` and, if present, `support.t1pt`
/// from `dir`.
pub fn read_sequence(dir: &Path) -> Result<WeightedSequence> {
    let seq = RawTensor::read(&dir.join("sequence.t1pt"))?;
    let times = RawTensor::read(&dir.join("times.t1pt"))?.to_f64()?;
    let [n, h, w] = seq.dims[..] else {
        return Err(Error::Format("sequence tensor must have rank 3".into()));
    };
    let (n, h, w) = (n as usize, h as usize, w as usize);
    let flat = seq.to_f64()?;
    let frames = flat.chunks(h * w).map(<[f64]>::to_vec).collect::<Vec<_>>();
    if frames.len() != n {
        return Err(Error::Format("sequence tensor is empty".into()));
    }
    let mut out = WeightedSequence::new(h, w, frames, times)?;
    let support = dir.join("support.t1pt");
    if support.exists() {
        match RawTensor::read(&support)?.data {
            TensorData::U8(m) => out = out.with_support(m.iter().map(|&v| v != 0).collect())?,
            _ => return Err(Error::Format("support tensor must be u8".into())),
        }
    }
    Ok(out)
}

/// Writes a map fit as `a`, `b`, `t1_star`, `t1` (f32) and `valid` (u8).
pub fn write_fit(fit: &DecayFit, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let dims = vec![fit.height as u32, fit.width as u32];
    RawTensor::from_f64(dims.clone(), &fit.a_map)?.write(&out.join("a.t1pt"))?;
    RawTensor::from_f64(dims.clone(), &fit.b_map)?.write(&out.join("b.t1pt"))?;
    RawTensor::from_f64(dims.clone(), &fit.t1_star_map)?.write(&out.join("t1_star.t1pt"))?;
    RawTensor::from_f64(dims.clone(), &fit.t1_map)?.write(&out.join("t1.t1pt"))?;
    RawTensor::from_mask(dims, &fit.valid_mask)?.write(&out.join("valid.t1pt"))
}

/// Fits the sequence stored in `input` and writes the maps to `out`.
pub fn cli_fit(input: &Path, fit: &FitConfig, out: &Path) -> Result<DecayFit> {
    let seq = read_sequence(input)?;
    let result = fit_map(&seq, seq.support.as_deref(), fit)?;
    write_fit(&result, out)?;
    Ok(result)
}

/// Writes `radial_<n>.csv` and `gar_<n>.csv` for every configured shot
/// count, one frame per inversion time.
pub fn cli_traj(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let frames = cfg.data.inversion_times.len();
    for &n in &cfg.experiment.shots {
        let m = cfg.experiment.m_points;
        for (name, traj) in [("radial", radial_scheme(n, m, frames)?), ("gar", golden_angle_scheme(n, m, frames)?)] {
            write_trajectory_csv(BufWriter::new(File::create(out.join(format!("{name}_{n}.csv")))?), &traj)?;
        }
    }
    Ok(())
}
