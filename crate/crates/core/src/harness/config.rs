//! Experiment configuration, read from TOML.
//!
//! Units: inversion times and T1* bounds in ms; k-space coordinates in
//! cycles per pixel, `[-0.5, 0.5]`; noise in signal units unless
//! `noise_relative` is set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decay_model::{EllipseSpec, PhantomSpec, DEFAULT_INVERSION_TIMES};
use crate::error::{Error, Result};
use crate::optimizer::{Mode, Objective, Stage, StageConfig};

/// Acquisition strategies compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Evenly spaced spokes, identical in every frame.
    Radial,
    /// Golden-angle spokes advancing through the frames.
    Gar,
    /// One learned mask shared by every frame.
    Single,
    /// Per-frame masks learned with the reconstruction objective only.
    ReconOnly,
    /// Per-frame masks learned with reconstruction pre-training followed by
    /// the decay objective.
    T1Pilot,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Radial, Method::Gar, Method::Single, Method::ReconOnly, Method::T1Pilot];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Radial => "radial",
            Method::Gar => "gar",
            Method::Single => "single",
            Method::ReconOnly => "recon_only",
            Method::T1Pilot => "t1_pilot",
        }
    }

    /// Schedule mode used to train this method's trajectory.
    pub fn mode(&self) -> Mode {
        match self {
            Method::Radial | Method::Gar => Mode::Fixed,
            Method::Single => Mode::SingleMask,
            Method::ReconOnly => Mode::ReconOnly,
            Method::T1Pilot => Mode::Full,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run directory; relative paths resolve against the working directory.
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Shot budgets per frame.
    pub shots: Vec<usize>,
    /// Samples per shot.
    pub m_points: usize,
    /// Spline control points per shot.
    #[serde(default = "default_n_control")]
    pub n_control: usize,
    pub methods: Vec<Method>,
    /// Which rows to report: `false` for the trained trajectory alone,
    /// `true` for the per-sample refined result.
    #[serde(default = "default_finetune")]
    pub finetune: Vec<bool>,
    /// Fraction of the phantoms used for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Skip undersampling altogether: every method sees the fully sampled
    /// frames. Used to sanity-check the evaluation path.
    #[serde(default)]
    pub full_sampling: bool,
}

fn default_n_control() -> usize {
    9
}

fn default_finetune() -> Vec<bool> {
    vec![false, true]
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_times() -> Vec<f64> {
    DEFAULT_INVERSION_TIMES.to_vec()
}

fn default_count() -> usize {
    8
}

fn default_perturbation() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Phantoms generated per seed.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Random perturbation of the base phantom, see [`PhantomSpec::perturbed`].
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    /// Inversion times in ms.
    #[serde(default = "default_times")]
    pub inversion_times: Vec<f64>,
    pub noise_sigma: f64,
    /// Interpret `noise_sigma` as a fraction of each clean sequence's
    /// signal range.
    #[serde(default)]
    pub noise_relative: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: default_count(),
            perturbation: default_perturbation(),
            inversion_times: default_times(),
            noise_sigma: 0.01,
            noise_relative: true,
        }
    }
}

/// Base phantom geometry. Without `ellipses` the bundled cardiac phantom is
/// used at the given grid size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub ellipses: Option<Vec<EllipseSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub recon_pretrain: StageConfig,
    pub decay: StageConfig,
    pub per_sample: StageConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            recon_pretrain: StageConfig::new(Stage::ReconPretrain, 300, 1e-3),
            decay: StageConfig::new(Stage::Decay, 400, 5e-4),
            per_sample: StageConfig::new(Stage::PerSample, 50, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    /// Base phantom; the bundled cardiac phantom at 64×64 when absent.
    #[serde(default)]
    pub phantom: Option<PhantomSection>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub objective: Objective,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical re-serialization, hex encoded.
    /// SHA-256 of the configuration with the output location left out, so
    /// the same experiment written to two places has one digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.experiment.output = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_phantom(&self) -> PhantomSpec {
        match &self.phantom {
            None => PhantomSpec::cardiac(64, 64),
            Some(p) => {
                let mut spec = PhantomSpec::cardiac(p.height, p.width);
                if let Some(e) = &p.ellipses {
                    spec.ellipses = e.clone();
                }
                spec
            }
        }
    }

    /// Phantoms used for training; the rest are evaluated.
    pub fn n_train(&self) -> usize {
        let n = self.data.count;
        ((n as f64 * self.experiment.train_fraction).round() as usize).clamp(1, n.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field `{field}`: {why}")));
        if e.seeds.is_empty() {
            return bad("experiment.seeds", "needs at least one seed");
        }
        if e.shots.is_empty() || e.shots.contains(&0) {
            return bad("experiment.shots", "needs at least one positive shot count");
        }
        if e.m_points < 2 {
            return bad("experiment.m_points", "must be at least 2");
        }
        if e.n_control < 4 || e.n_control > e.m_points {
            return bad("experiment.n_control", "must lie in [4, m_points]");
        }
        if e.methods.is_empty() {
            return bad("experiment.methods", "needs at least one method");
        }
        if e.finetune.is_empty() {
            return bad("experiment.finetune", "needs at least one of false, true");
        }
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return bad("experiment.train_fraction", "must lie strictly between 0 and 1");
        }
        let d = &self.data;
        if d.count < 2 {
            return bad("data.count", "needs at least two phantoms for a train/eval split");
        }
        if !(d.perturbation >= 0.0) {
            return bad("data.perturbation", "must be nonnegative");
        }
        if !(d.noise_sigma >= 0.0) || !d.noise_sigma.is_finite() {
            return bad("data.noise_sigma", "must be finite and nonnegative");
        }
        if d.inversion_times.is_empty() || d.inversion_times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return bad("data.inversion_times", "must be a nonempty list of nonnegative times");
        }
        let ph = self.base_phantom();
        if ph.height == 0 || ph.width == 0 {
            return bad("phantom.height", "grid must be nonempty");
        }
        if !e.full_sampling {
            for &n in &e.shots {
                if n * e.m_points >= ph.height * ph.width {
                    return Err(Error::Config(format!(
                        "field `experiment.shots`: {n} shots × {} points do not undersample a {}×{} grid",
                        e.m_points, ph.height, ph.width
                    )));
                }
            }
        }
        for (name, s, want) in [
            ("training.recon_pretrain", &self.training.recon_pretrain, Stage::ReconPretrain),
            ("training.decay", &self.training.decay, Stage::Decay),
            ("training.per_sample", &self.training.per_sample, Stage::PerSample),
        ] {
            if s.stage != want {
                return Err(Error::Config(format!("field `{name}.stage`: expected `{}`", want.name())));
            }
            s.validate().map_err(|err| Error::Config(format!("field `{name}`: {err}")))?;
        }
        self.objective.recon.validate().map_err(|err| Error::Config(format!("field `objective.recon`: {err}")))?;
        self.objective.fit.validate().map_err(|err| Error::Config(format!("field `objective.fit`: {err}")))?;
        self.objective.limits.validate().map_err(|err| Error::Config(format!("field `objective.limits`: {err}")))?;
        Ok(())
    }
}
