use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use di4c_core::denoisers::{fit_product_to_oracle, AnalyticalDenoiser, Checkpoint, Denoiser, ExactPosteriorDenoiser, TimeGrid};
use di4c_core::dist::{JointDistribution, StateSpace};
use di4c_core::forward::{ForwardConfig, MaskSchedule};
use di4c_core::posterior::PosteriorContext;
use di4c_core::theory::{random_distribution, VerifyConfig};
use di4c_core::trainer::TrainConfig;
use di4c_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "ForwardConfig::uniform2")]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub converge: ConvergeSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub sample: SampleSpec,
    /// Overrides the per-command seeds when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Data distribution `q_0`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// `½δ_aa + ½δ_bb` on two bits.
    #[default]
    TwoBitCorrelated,
    Random {
        states: usize,
        dims: usize,
        #[serde(default)]
        seed: u64,
        /// Logit spread; larger is more peaked.
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Explicit { states: usize, dims: usize, probs: Vec<f64> },
}

fn default_scale() -> f64 {
    2.0
}

impl DataSpec {
    pub fn build(&self) -> Result<JointDistribution> {
        match self {
            DataSpec::TwoBitCorrelated => JointDistribution::new(StateSpace::new(2, 2)?, vec![0.5, 0.0, 0.0, 0.5]),
            DataSpec::Random { states, dims, seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(random_distribution(&mut rng, StateSpace::new(*states, *dims)?, *scale))
            }
            DataSpec::Explicit { states, dims, probs } => JointDistribution::new(StateSpace::new(*states, *dims)?, probs.clone()),
        }
    }
}

/// `t_i = δ + i(T − δ)/N`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub steps: usize,
    pub delta: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { steps: 8, delta: 0.0 }
    }
}

impl GridSpec {
    pub fn build(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::offset(self.delta, horizon, self.steps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Student mixture size `K`.
    pub components: usize,
    /// Start from this mixture checkpoint instead of copying the teacher.
    pub init: Option<PathBuf>,
    /// Product teacher checkpoint; the oracle-fitted product model when absent.
    pub teacher: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            components: 4,
            init: None,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSpec {
    /// Start time `δ`; the grid spec's `delta` when absent.
    pub delta: Option<f64>,
    /// Step counts; `4, 8, …, 256` when empty.
    pub steps: Vec<usize>,
    /// Fails the run unless the fitted slope lies in `[lo, hi]`.
    pub expect_slope: Option<[f64; 2]>,
    /// Fails the run unless every TV is at most this.
    pub expect_max_tv: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    pub suite: VerifyConfig,
    /// Student checkpoint audited against the teacher on the grid.
    pub student: Option<PathBuf>,
    /// Explicit student kernels `p_{0|t_n}`, one list of columns per grid step.
    pub student_kernels: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ancestral,
    TauLeap,
    Confidence,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", untagged)]
pub enum ModelSource {
    Named(NamedModel),
    Checkpoint { checkpoint: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedModel {
    Analytical,
    Exact,
    Teacher,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub sampler: SamplerKind,
    pub model: ModelSource,
    pub count: usize,
    /// Emit the exact output law instead of samples.
    pub dense: bool,
    pub mask_schedule: MaskSchedule,
    /// Classifier-free guidance against this unconditional model.
    pub guidance: Option<GuidanceSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub model: ModelSource,
    pub w_cfg: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ancestral,
            model: ModelSource::Named(NamedModel::Analytical),
            count: 1000,
            dense: false,
            mask_schedule: MaskSchedule::Linear,
            guidance: None,
        }
    }
}

/// Resolved experiment: context, grid and output paths.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub ctx: PosteriorContext,
    pub grid: TimeGrid,
    pub base: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, config_path: &Path) -> Result<Self> {
        let q0 = config.data.build()?;
        let fwd = config.forward.build(q0.space())?;
        let grid = config.grid.build(fwd.horizon())?;
        let ctx = PosteriorContext::new(fwd, q0)?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, ctx, grid, base })
    }

    /// Relative paths in the config resolve against the config's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let path = self.resolve(path);
        if path.extension().is_some_and(|e| e == "json") {
            Checkpoint::from_json(&std::fs::read_to_string(path)?)
        } else {
            Checkpoint::load_binary(&path)
        }
    }

    pub fn teacher(&self) -> Result<di4c_core::denoisers::TabularProductDenoiser> {
        match &self.config.model.teacher {
            None => fit_product_to_oracle(&self.ctx, &self.grid),
            Some(p) => match self.load_checkpoint(p)? {
                Checkpoint::Product(t) => Ok(t),
                Checkpoint::Mixture(_) => Err(Error::Argument("teacher checkpoint must be a product model".into())),
            },
        }
    }

    pub fn model(&self, source: &ModelSource) -> Result<Box<dyn Denoiser>> {
        let space = self.ctx.space();
        Ok(match source {
            ModelSource::Named(NamedModel::Analytical) => Box::new(AnalyticalDenoiser::new(space, self.grid.clone())),
            ModelSource::Named(NamedModel::Exact) => Box::new(ExactPosteriorDenoiser::new(space, self.grid.clone())),
            ModelSource::Named(NamedModel::Teacher) => Box::new(self.teacher()?),
            ModelSource::Checkpoint { checkpoint } => match self.load_checkpoint(checkpoint)? {
                Checkpoint::Product(m) => Box::new(m),
                Checkpoint::Mixture(m) => Box::new(m),
            },
        })
    }
}
