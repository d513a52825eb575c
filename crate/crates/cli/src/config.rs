//! Run configuration: one TOML file, every section optional, flags win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use skedit_core::edit::EditOptions;
use skedit_core::eval::ConditionTag;
use skedit_core::ldm::LdmConfig;
use skedit_core::pipeline::ConditionOptions;
use skedit_core::refiner::RefinerConfig;
use skedit_core::sketch::DeformationParams;
use skedit_core::vae::VaeConfig;

use crate::CliError;

pub const DEVICE_ENV: &str = "SKEDIT_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 50, size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchConfig {
    pub per_slice: usize,
    pub deformation: DeformationParams,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            per_slice: 1,
            deformation: DeformationParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conditions: Vec<ConditionTag>,
    /// Cap on evaluated slices; `None` evaluates the whole test split.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: ConditionTag::ALL.to_vec(),
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the train/test split; kept apart from `seed` so every stage
    /// sees the same partition.
    pub split_seed: u64,
    pub device: String,
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Training stages save their checkpoint this often (0 = only at the end).
    pub checkpoint_every: usize,
    pub synth: SynthConfig,
    pub sketches: SketchConfig,
    pub refiner: RefinerConfig,
    pub vae: VaeConfig,
    pub ldm: LdmConfig,
    pub conditions: ConditionOptions,
    pub edit: EditOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split_seed: 0,
            device: "cpu".into(),
            data_root: None,
            output_dir: None,
            checkpoint_every: 500,
            synth: SynthConfig::default(),
            sketches: SketchConfig::default(),
            refiner: RefinerConfig::default(),
            vae: VaeConfig::default(),
            ldm: LdmConfig::default(),
            conditions: ConditionOptions::default(),
            edit: EditOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Push the run seed into every stage so all randomness follows it.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.refiner.seed = s;
        self.vae.seed = s;
        self.ldm.seed = s;
        self.conditions.seed = s;
        self.edit.seed = s;
    }

    /// Device from the environment if set, else the config; only `cpu` exists.
    pub fn resolve_device(&mut self) -> Result<(), CliError> {
        if let Ok(d) = std::env::var(DEVICE_ENV) {
            if !d.is_empty() {
                self.device = d;
            }
        }
        if self.device.eq_ignore_ascii_case("cpu") {
            self.device = "cpu".into();
            Ok(())
        } else {
            Err(CliError::Runtime(format!("device {:?} is not available; this build runs on cpu", self.device)))
        }
    }
}
