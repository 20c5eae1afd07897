use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::oracle::{Convention, DenoiserOracle, MixtureComponent};
use crate::scene::SceneSpec;
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;
use crate::trajectory::TrajectorySpec;
use crate::warp::EmbedConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    /// Linear flow grid `t_k = k / steps`, flow-Euler sampler.
    Flow,
    /// DDIM with `alpha_bar = (1 - t)^2` on the same grid.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleChoice,
    pub steps: usize,
    pub alpha_bar_floor: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleChoice::Flow,
            steps: 50,
            alpha_bar_floor: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = match self.kind {
            ScheduleChoice::Flow => NoiseSchedule::uniform_flow(self.steps)?,
            ScheduleChoice::Ddim => NoiseSchedule::ddim_matching_flow(self.steps)?,
        };
        match self.alpha_bar_floor {
            Some(f) => s.with_alpha_bar_floor(f),
            None => Ok(s),
        }
    }

    pub fn default_convention(&self) -> Convention {
        match self.kind {
            ScheduleChoice::Flow => Convention::Velocity,
            ScheduleChoice::Ddim => Convention::Epsilon,
        }
    }
}

/// A prior mean: a number, or `"truth"` for the clean latent of the target
/// views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Value(f64),
    Named(NamedMean),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedMean {
    Truth,
}

impl MeanSpec {
    fn resolve(&self, truth: &LatentTensor) -> crate::oracle::Mean {
        match self {
            MeanSpec::Value(v) => (*v).into(),
            MeanSpec::Named(NamedMean::Truth) => truth.clone().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: MeanSpec,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// Always predicts the clean target-view latent.
    Perfect,
    Constant { value: f64 },
    Gaussian { mean: MeanSpec, variance: f64 },
    Mixture { components: Vec<ComponentSpec> },
}

impl OracleSpec {
    pub fn build(&self, truth: &LatentTensor, convention: Convention) -> Result<DenoiserOracle> {
        match self {
            OracleSpec::Perfect => Ok(DenoiserOracle::perfect(truth.clone(), convention)),
            OracleSpec::Constant { value } => DenoiserOracle::constant(*value, convention),
            OracleSpec::Gaussian { mean, variance } => DenoiserOracle::gaussian(mean.resolve(truth), *variance, convention),
            OracleSpec::Mixture { components } => DenoiserOracle::mixture(
                components
                    .iter()
                    .map(|c| MixtureComponent {
                        weight: c.weight,
                        mean: c.mean.resolve(truth),
                        variance: c.variance,
                    })
                    .collect(),
                convention,
            ),
        }
    }
}

/// Corruption added to the warped guidance video, standing in for warping
/// artefacts. Zero strength leaves the video untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    /// Standard deviation of keyed Gaussian noise added to observed pixels.
    pub noise_std: f64,
    /// Channels that receive the noise; empty means all.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            channels: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Irr,
    Flf,
    Dsg,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Irr => "irr",
            Mechanism::Flf => "flf",
            Mechanism::Dsg => "dsg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "irr" => Ok(Mechanism::Irr),
            "flf" => Ok(Mechanism::Flf),
            "dsg" => Ok(Mechanism::Dsg),
            other => Err(Error::InvalidConfig(format!("unknown mechanism {other:?} (expected irr, flf or dsg)"))),
        }
    }

    /// Parses a comma-separated list such as `irr,flf,dsg`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

/// One mechanism setting of the guided sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub irr: bool,
    pub flf: bool,
    pub dsg: bool,
}

impl Cell {
    /// `irr+flf+dsg`, `irr+dsg`, ... or `base` with nothing on.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.irr, "irr"), (self.flf, "flf"), (self.dsg, "dsg")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "base".into()
        } else {
            on.join("+")
        }
    }

    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            irr_enabled: self.irr,
            flf_enabled: self.flf,
            dsg_enabled: self.dsg,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    /// The camera path the output should follow.
    pub trajectory: TrajectorySpec,
    /// Camera that filmed the source video; defaults to the first pose of
    /// the trajectory.
    #[serde(default)]
    pub source_pose: Option<CameraPose>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub convention: Option<Convention>,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Mechanisms swept on and off; the others keep their `guidance` value.
    #[serde(default)]
    pub ablate: Vec<Mechanism>,
    /// Parent of the per-run directory; not part of the config hash.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write per-frame image previews.
    #[serde(default = "yes")]
    pub write_frames: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Checks everything that can be checked without rendering.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.guidance.validate()?;
        self.schedule.build()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        let [h, w] = self.trajectory.resolution;
        let f = self.embed.downsample;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::InvalidConfig(format!("downsample {f} must divide the resolution {h}x{w}")));
        }
        if !(self.artifacts.noise_std >= 0.0 && self.artifacts.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("artifact noise_std must be finite and non-negative".into()));
        }
        if let Some(c) = self.artifacts.channels.iter().find(|c| **c >= self.scene.channels) {
            return Err(Error::InvalidConfig(format!("artifact channel {c} out of {}", self.scene.channels)));
        }
        let mut ablate = self.ablate.clone();
        ablate.sort();
        ablate.dedup();
        if ablate.len() != self.ablate.len() {
            return Err(Error::InvalidConfig("ablate lists a mechanism twice".into()));
        }
        Ok(())
    }

    pub fn convention(&self) -> Convention {
        self.convention.unwrap_or_else(|| self.schedule.default_convention())
    }

    /// Hex SHA-256 of the config with `output_dir` blanked.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }

    /// First 16 hex digits of [`Self::hash`], used as the run directory name.
    pub fn short_hash(&self) -> Result<String> {
        Ok(self.hash()?[..16].to_string())
    }

    /// Cells of the ablation grid in a fixed order (all-on first).
    pub fn cells(&self) -> Vec<Cell> {
        let base = Cell {
            irr: self.guidance.irr_enabled,
            flf: self.guidance.flf_enabled,
            dsg: self.guidance.dsg_enabled,
        };
        let mut cells = vec![base];
        for m in &self.ablate {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    [true, false].map(|on| match m {
                        Mechanism::Irr => Cell { irr: on, ..c },
                        Mechanism::Flf => Cell { flf: on, ..c },
                        Mechanism::Dsg => Cell { dsg: on, ..c },
                    })
                })
                .collect();
        }
        cells
    }
}
