use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::WorldSpec;
use crate::error::{Error, Result};
use crate::replay::{DEFAULT_REPLAY_PER_CLASS, DEFAULT_RIDGE};
use crate::router::ScoringConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceKind {
    /// Generate features with the synthetic hierarchical world in `[world]`.
    World,
    /// Load precomputed features from `data.bank_path` (NDJSON).
    Bank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSourceKind,
    pub bank_path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSourceKind::World,
            bank_path: PathBuf::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorSourceKind {
    /// The generated world's own descriptor bank.
    World,
    /// A descriptor bank JSON file, optionally embedded through a text-embedding map.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorConfig {
    pub source: DescriptorSourceKind,
    pub bank_path: PathBuf,
    /// JSON map from text to embedding, used when the bank lacks embeddings.
    pub encoder_path: PathBuf,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            source: DescriptorSourceKind::World,
            bank_path: PathBuf::new(),
            encoder_path: PathBuf::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learned routing, trained adapter, projected router updates, replay.
    Herman,
    /// Frozen template matching: λ = 0, identity adapter, no training.
    ZsBaseline,
    /// Uniform layer weights instead of a router.
    #[serde(alias = "w_descriptors")]
    NoRouter,
    /// Learned routing without the projected update between tasks.
    #[serde(alias = "w_router")]
    NoProjection,
    /// Trained adapter on the final layer against template embeddings only.
    FinalLayerOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Herman,
        Variant::ZsBaseline,
        Variant::NoRouter,
        Variant::NoProjection,
        Variant::FinalLayerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Herman => "herman",
            Variant::ZsBaseline => "zs_baseline",
            Variant::NoRouter => "no_router",
            Variant::NoProjection => "no_projection",
            Variant::FinalLayerOnly => "final_layer_only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "herman" => Ok(Variant::Herman),
            "zs_baseline" => Ok(Variant::ZsBaseline),
            "no_router" | "w_descriptors" => Ok(Variant::NoRouter),
            "no_projection" | "w_router" => Ok(Variant::NoProjection),
            "final_layer_only" => Ok(Variant::FinalLayerOnly),
            other => Err(Error::Config(format!("unknown method variant `{other}`"))),
        }
    }

    pub fn trains(self) -> bool {
        self != Variant::ZsBaseline
    }

    pub fn learns_router(self) -> bool {
        matches!(self, Variant::Herman | Variant::NoProjection)
    }

    pub fn projects(self) -> bool {
        self == Variant::Herman
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub variant: Variant,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            variant: Variant::Herman,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine decay from `lr` to 0 over each task's optimization steps.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Global gradient-norm threshold; `inf` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 64,
            schedule: Schedule::Cosine,
            grad_clip: 5.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at step `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine if total == 0 => self.lr,
            Schedule::Cosine => {
                let t = step as f64 / total as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub rho: f64,
    pub delta: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { rho: 0.9, delta: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Pseudo-features drawn per past class for every optimization step.
    pub per_class: usize,
    /// Relative ridge added to the final-layer covariance.
    pub ridge: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            enabled: true,
            per_class: DEFAULT_REPLAY_PER_CLASS,
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Size of the first task; 0 means the first task also has `n` classes.
    pub m: usize,
    pub n: usize,
    pub shuffle_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            m: 0,
            n: 4,
            shuffle_seed: 1993,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub root_seed: u64,
    pub data: DataConfig,
    pub world: WorldSpec,
    pub descriptors: DescriptorConfig,
    pub method: MethodConfig,
    pub scoring: ScoringConfig,
    pub optimizer: OptimizerConfig,
    pub projection: ProjectionConfig,
    pub replay: ReplayConfig,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            root_seed: 1993,
            data: DataConfig::default(),
            world: WorldSpec::default(),
            descriptors: DescriptorConfig::default(),
            method: MethodConfig::default(),
            scoring: ScoringConfig::default(),
            optimizer: OptimizerConfig::default(),
            projection: ProjectionConfig::default(),
            replay: ReplayConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        match (self.data.source, self.descriptors.source) {
            (DataSourceKind::World, _) => self.world.validate().map_err(|e| Error::Config(format!("[world]: {e}")))?,
            (DataSourceKind::Bank, DescriptorSourceKind::World) => {
                return Err(Error::Config(
                    "descriptors.source = \"world\" requires data.source = \"world\"".into(),
                ))
            }
            (DataSourceKind::Bank, DescriptorSourceKind::File) => {}
        }
        if self.data.source == DataSourceKind::Bank && self.data.bank_path.as_os_str().is_empty() {
            return Err(Error::Config("data.source = \"bank\" needs data.bank_path".into()));
        }
        if self.descriptors.source == DescriptorSourceKind::File && self.descriptors.bank_path.as_os_str().is_empty() {
            return Err(Error::Config("descriptors.source = \"file\" needs descriptors.bank_path".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be at least 1".into()));
        }
        if !(o.grad_clip > 0.0) {
            return Err(Error::Config("optimizer.grad_clip must be positive".into()));
        }
        let p = &self.projection;
        if !(0.0..=1.0).contains(&p.rho) {
            return Err(Error::Config(format!("projection.rho must lie in [0, 1], got {}", p.rho)));
        }
        if !(p.delta > 0.0 && p.delta <= 1.0) {
            return Err(Error::Config(format!("projection.delta must lie in (0, 1], got {}", p.delta)));
        }
        if !(self.replay.ridge >= 0.0 && self.replay.ridge.is_finite()) {
            return Err(Error::Config("replay.ridge must be non-negative".into()));
        }
        if self.stream.n == 0 {
            return Err(Error::Config("stream.n must be at least 1".into()));
        }
        Ok(())
    }
}
