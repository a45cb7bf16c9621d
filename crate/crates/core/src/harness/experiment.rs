//! Benchmark orchestration: data generation, the fully sampled oracle, and
//! one cell per (seed, shots, method).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::decay_model::{generate_phantom, render_sequence, T1Phantom, WeightedSequence};
use crate::error::{Error, Result};
use crate::fitting::{fit_map, model_sequence, DecayFit};
use crate::metrics::{evaluate, EvalReport};
use crate::optimizer::{refine_sample, run_schedule, write_run_artifacts, ScheduleConfig};
use crate::sampling::{acquire, reconstruct};
use crate::trajectory::{acceleration_factor, golden_angle_scheme, radial_scheme, Trajectory};

use super::config::{ExperimentConfig, Method};
use super::tensor::RawTensor;

pub const RESULTS_HEADER: &str =
    "seed,method,shots,finetuned,acceleration,decay_psnr_db,decay_vif,map_psnr_db,map_vif,status";

/// Phantoms and rendered sequences for one seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub phantoms: Vec<T1Phantom>,
    pub sequences: Vec<WeightedSequence>,
}

/// Seed of phantom `k` under experiment seed `seed`.
pub fn phantom_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(k as u64)
}

pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let base = cfg.base_phantom();
    let times = &cfg.data.inversion_times;
    let mut phantoms = Vec::with_capacity(cfg.data.count);
    let mut sequences = Vec::with_capacity(cfg.data.count);
    for k in 0..cfg.data.count {
        let s = phantom_seed(seed, k);
        let ph = generate_phantom(&base.perturbed(s, cfg.data.perturbation))?;
        let sigma = if cfg.data.noise_relative {
            let clean = render_sequence(&ph, times, 0.0, 0)?;
            let (lo, hi) = clean
                .frames
                .iter()
                .flatten()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            cfg.data.noise_sigma * (hi - lo)
        } else {
            cfg.data.noise_sigma
        };
        sequences.push(render_sequence(&ph, times, sigma, s)?);
        phantoms.push(ph);
    }
    Ok(Dataset { phantoms, sequences })
}

/// Averages of the four table metrics over the evaluation samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub decay_psnr_db: f64,
    pub decay_vif: f64,
    pub map_psnr_db: f64,
    pub map_vif: f64,
}

impl CellMetrics {
    fn mean(reports: &[EvalReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            decay_psnr_db: avg(|r| r.decay_psnr_db),
            decay_vif: avg(|r| r.decay_vif),
            map_psnr_db: avg(|r| r.map_psnr_db),
            map_vif: avg(|r| r.map_vif),
        }
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub method: Method,
    pub shots: usize,
    pub finetuned: bool,
    pub acceleration: f64,
    /// Metrics, or the reason the cell failed.
    pub outcome: std::result::Result<CellMetrics, String>,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{},{},{},{}", self.seed, self.method, self.shots, self.finetuned, self.acceleration);
        match &self.outcome {
            Ok(m) => {
                let _ = write!(line, ",{},{},{},{},ok", m.decay_psnr_db, m.decay_vif, m.map_psnr_db, m.map_vif);
            }
            Err(msg) => {
                let clean: String = msg.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
                let _ = write!(line, ",,,,,failed: {clean}");
            }
        }
        line
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.splitn(10, ',').collect();
        let bad = || Error::Format(format!("malformed results row {line:?}"));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let outcome = if f[9] == "ok" {
            Ok(CellMetrics {
                decay_psnr_db: num(f[5])?,
                decay_vif: num(f[6])?,
                map_psnr_db: num(f[7])?,
                map_vif: num(f[8])?,
            })
        } else {
            Err(f[9].strip_prefix("failed: ").unwrap_or(f[9]).to_string())
        };
        Ok(Self {
            seed: f[0].parse().map_err(|_| bad())?,
            method: f[1].parse()?,
            shots: f[2].parse().map_err(|_| bad())?,
            finetuned: f[3].parse().map_err(|_| bad())?,
            acceleration: num(f[4])?,
            outcome,
        })
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RESULTS_HEADER) {
        return Err(Error::Format(format!("{} lacks the results header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(ResultRow::parse_csv).collect()
}

/// Thread budget for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Cells evaluated concurrently.
    pub jobs: usize,
    /// Worker threads shared by the numerical kernels inside cells.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, threads: std::thread::available_parallelism().map_or(1, |n| n.get()) }
    }
}

/// Eval-side inputs shared by every cell of one seed.
struct SeedData {
    seed: u64,
    train: Vec<WeightedSequence>,
    eval: Vec<WeightedSequence>,
    oracles: Vec<DecayFit>,
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedData> {
    let data = generate_dataset(cfg, seed)?;
    let n_train = cfg.n_train();
    let mut sequences = data.sequences;
    let eval = sequences.split_off(n_train);
    let oracle_dir = dir.join("oracle");
    fs::create_dir_all(&oracle_dir)?;
    let mut oracles = Vec::with_capacity(eval.len());
    for (i, seq) in eval.iter().enumerate() {
        let fit = fit_map(seq, seq.support.as_deref(), &cfg.objective.fit)?;
        if fit.n_valid() == 0 {
            return Err(Error::NoValidPixels);
        }
        let dims = vec![seq.height as u32, seq.width as u32];
        RawTensor::from_f64(dims.clone(), &fit.t1_map)?.write(&oracle_dir.join(format!("sample_{i}_t1.t1pt")))?;
        RawTensor::from_mask(dims, &fit.valid_mask)?.write(&oracle_dir.join(format!("sample_{i}_valid.t1pt")))?;
        oracles.push(fit);
    }
    Ok(SeedData { seed, train: sequences, eval, oracles })
}

fn initial_trajectory(method: Method, shots: usize, m: usize, frames: usize, n_control: usize) -> Result<Trajectory> {
    let t = match method {
        Method::Radial | Method::Single => radial_scheme(shots, m, frames)?,
        Method::Gar | Method::ReconOnly | Method::T1Pilot => golden_angle_scheme(shots, m, frames)?,
    };
    t.with_n_control(n_control)
}

fn sequence_tensor(frames: &[Vec<f64>], h: usize, w: usize) -> Result<RawTensor> {
    let flat: Vec<f64> = frames.iter().flatten().copied().collect();
    RawTensor::from_f64(vec![frames.len() as u32, h as u32, w as u32], &flat)
}

struct EvalOutcome {
    report: EvalReport,
    frames: Vec<Vec<f64>>,
    fit: DecayFit,
}

fn evaluate_fit(
    frames: Vec<Vec<f64>>,
    fit: DecayFit,
    seq: &WeightedSequence,
    oracle: &DecayFit,
) -> Result<EvalOutcome> {
    let model = model_sequence(&fit, &seq.inversion_times)?;
    let report = evaluate(&fit.t1_map, &oracle.t1_map, &model, seq, &oracle.valid_mask)?;
    Ok(EvalOutcome { report, frames, fit })
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &SeedData,
    shots: usize,
    method: Method,
    dir: &Path,
) -> Result<Vec<CellMetrics>> {
    let e = &cfg.experiment;
    let obj = cfg.objective;
    let times = &cfg.data.inversion_times;
    fs::create_dir_all(dir)?;

    let traj = if e.full_sampling {
        None
    } else {
        let init = initial_trajectory(method, shots, e.m_points, times.len(), e.n_control)?;
        let offset = |mut s: crate::optimizer::StageConfig| {
            s.seed = s.seed.wrapping_add(data.seed);
            s
        };
        let schedule = ScheduleConfig {
            mode: method.mode(),
            recon_pretrain: offset(cfg.training.recon_pretrain),
            decay: offset(cfg.training.decay),
            per_sample: cfg.training.per_sample,
            objective: obj,
        };
        let run = run_schedule(&data.train, &init, &schedule)?;
        write_run_artifacts(&run, dir)?;
        Some(run.trajectory)
    };

    let want_base = e.finetune.contains(&false);
    let want_ft = e.finetune.contains(&true);
    let mut base_reports = Vec::new();
    let mut ft_reports = Vec::new();
    let mut ft_log = String::from("sample,lambda,decay_psnr_before,decay_psnr_after\n");
    for (i, (seq, oracle)) in data.eval.iter().zip(&data.oracles).enumerate() {
        let (h, w) = (seq.height, seq.width);
        let frames = match &traj {
            Some(t) => reconstruct(&acquire(seq, t)?, &obj.recon)?.frames,
            None => seq.frames.clone(),
        };
        let rseq = WeightedSequence::new(h, w, frames, times.clone())?;
        let fit = fit_map(&rseq, seq.support.as_deref(), &obj.fit)?;
        let base = evaluate_fit(rseq.frames, fit, seq, oracle)?;
        sequence_tensor(&base.frames, h, w)?.write(&dir.join(format!("sample_{i}_recon.t1pt")))?;
        RawTensor::from_f64(vec![h as u32, w as u32], &base.fit.t1_map)?
            .write(&dir.join(format!("sample_{i}_t1.t1pt")))?;

        if want_ft {
            let refined = match &traj {
                Some(t) => {
                    let r = refine_sample(t, seq, &obj, cfg.training.per_sample.iterations, Some(&oracle.valid_mask))?;
                    let lambda = r.lambda.map_or_else(|| "none".to_string(), |l| l.to_string());
                    let _ = writeln!(ft_log, "{i},{lambda},{},{}", r.psnr_before, r.psnr_after);
                    evaluate_fit(r.reconstruction, r.fit, seq, oracle)?
                }
                None => EvalOutcome { report: base.report.clone(), frames: base.frames.clone(), fit: base.fit.clone() },
            };
            sequence_tensor(&refined.frames, h, w)?.write(&dir.join(format!("sample_{i}_recon_finetuned.t1pt")))?;
            RawTensor::from_f64(vec![h as u32, w as u32], &refined.fit.t1_map)?
                .write(&dir.join(format!("sample_{i}_t1_finetuned.t1pt")))?;
            ft_reports.push(refined.report);
        }
        base_reports.push(base.report);
    }
    if want_ft {
        fs::write(dir.join("finetune.csv"), ft_log)?;
    }
    let mut out = Vec::new();
    if want_base {
        out.push(CellMetrics::mean(&base_reports));
    }
    if want_ft {
        out.push(CellMetrics::mean(&ft_reports));
    }
    Ok(out)
}

/// Directory holding the artifacts of one cell.
pub fn cell_dir(out: &Path, seed: u64, method: Method, shots: usize) -> PathBuf {
    out.join(format!("seed_{seed}")).join(format!("{method}_{shots}"))
}

/// Runs every cell of the experiment and writes `results.csv` under the
/// output directory. Failed cells are recorded in the CSV and do not stop
/// the run; only I/O failures on the output directory itself are errors.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let out = &cfg.experiment.output;
    fs::create_dir_all(out)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let e = &cfg.experiment;
    let ph = cfg.base_phantom();
    let (h, w) = (ph.height, ph.width);
    let seeds: Vec<(u64, std::result::Result<SeedData, String>)> = e
        .seeds
        .iter()
        .map(|&s| {
            log::info!("seed {s}: generating data and oracle fits");
            let d = threads.install(|| prepare_seed(cfg, s, &out.join(format!("seed_{s}"))));
            (s, d.map_err(|err| err.to_string()))
        })
        .collect();

    let mut cells = Vec::new();
    for (seed, data) in &seeds {
        for &shots in &e.shots {
            for &method in &e.methods {
                cells.push((*seed, data, shots, method));
            }
        }
    }
    let flags: Vec<bool> = [false, true].into_iter().filter(|f| e.finetune.contains(f)).collect();
    let evaluate_cell =
        |&(seed, data, shots, method): &(u64, &std::result::Result<SeedData, String>, usize, Method)| {
            let acceleration = if e.full_sampling { 1.0 } else { acceleration_factor(h, w, shots, e.m_points) };
            let outcome: std::result::Result<Vec<CellMetrics>, String> = match data {
                Ok(d) => {
                    log::info!("seed {seed}: {method} with {shots} shots");
                    threads
                        .install(|| run_cell(cfg, d, shots, method, &cell_dir(out, seed, method, shots)))
                        .map_err(|err| err.to_string())
                }
                Err(msg) => Err(format!("data generation failed: {msg}")),
            };
            if let Err(msg) = &outcome {
                log::warn!("cell seed {seed} {method} {shots} failed: {msg}");
            }
            flags
                .iter()
                .enumerate()
                .map(|(k, &finetuned)| ResultRow {
                    seed,
                    method,
                    shots,
                    finetuned,
                    acceleration,
                    outcome: outcome.as_ref().map(|m| m[k]).map_err(Clone::clone),
                })
                .collect::<Vec<_>>()
        };

    // plain threads pulling from a shared counter keep at most `jobs` cells in flight
    let next = AtomicUsize::new(0);
    let mut rows: Vec<ResultRow> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..opts.jobs.clamp(1, cells.len().max(1)))
            .map(|_| {
                scope.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(cell) = cells.get(i) else { break };
                        mine.extend(evaluate_cell(cell));
                    }
                    mine
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("cell worker panicked")).collect()
    });
    rows.sort_by_key(|r| (r.seed, r.shots, r.method, r.finetuned));

    let mut file = BufWriter::new(File::create(out.join("results.csv"))?);
    writeln!(file, "{RESULTS_HEADER}")?;
    for r in &rows {
        writeln!(file, "{}", r.to_csv())?;
    }
    file.flush()?;
    Ok(rows)
}
