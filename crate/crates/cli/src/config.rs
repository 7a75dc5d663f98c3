use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use moscard_core::datamodel::{Horizon, Modality, Split, HORIZONS};
use moscard_core::deconfound::Stage1Config;
use moscard_core::encoder::EncoderConfig;
use moscard_core::fusion::FusionConfig;
use moscard_core::synthgen::GeneratorParams;

use crate::error::{PipelineError, Result};

pub const WORKDIR_ENV: &str = "MOSCARD_WORKDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderPair {
    pub cxr: EncoderConfig,
    pub ecg: EncoderConfig,
}

impl Default for EncoderPair {
    fn default() -> Self {
        EncoderPair { cxr: EncoderConfig::default(), ecg: EncoderConfig::default() }
    }
}

impl EncoderPair {
    pub fn get(&self, m: Modality) -> &EncoderConfig {
        match m {
            Modality::Cxr => &self.cxr,
            Modality::Ecg => &self.ecg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    /// Number of positive holdout samples mapped.
    pub samples: usize,
    pub mask_side: usize,
    pub stride: usize,
    pub fill: f32,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig { samples: 10, mask_side: 8, stride: 8, fill: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bootstrap_b: usize,
    pub horizons: Vec<Horizon>,
    /// Confounder variables used for subgroup tables: `sex`, `age_bin`.
    pub subgroup_variables: Vec<String>,
    /// Split whose frozen features feed the confounder probes.
    pub probe_split: Split,
    pub saliency: SaliencyConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_b: 1000,
            horizons: HORIZONS.to_vec(),
            subgroup_variables: vec!["sex".into(), "age_bin".into()],
            probe_split: Split::Shift,
            saliency: SaliencyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { workdir: PathBuf::from("moscard-work") }
    }
}

/// The single JSON document governing a pipeline run. The top-level seed
/// overrides the seeds of every sub-configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorParams,
    pub encoder: EncoderPair,
    pub stage1: Stage1Config,
    pub stage2: FusionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            generator: GeneratorParams { n_holdout: 2000, ..GeneratorParams::default() },
            encoder: EncoderPair::default(),
            stage1: Stage1Config { epochs: 8, ..Stage1Config::default() },
            stage2: FusionConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
        .resolved()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the top-level seed into every sub-configuration.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.generator.seed = s;
        self.encoder.cxr.seed = s;
        self.encoder.ecg.seed = s.wrapping_add(1);
        self.stage1.seed = s;
        self.stage2.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        for m in Modality::ALL {
            let e = self.encoder.get(m);
            e.validate()?;
            if e.image_side != self.generator.image_side {
                return Err(PipelineError::Config(format!(
                    "encoder.{m}.image_side {} differs from generator.image_side {}",
                    e.image_side, self.generator.image_side
                )));
            }
        }
        if self.encoder.cxr.embed_dim != self.encoder.ecg.embed_dim {
            return Err(PipelineError::Config("encoder.cxr and encoder.ecg need the same embed_dim".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.eval.bootstrap_b == 0 || self.eval.horizons.is_empty() {
            return Err(PipelineError::Config("eval needs bootstrap_b >= 1 and at least one horizon".into()));
        }
        for v in &self.eval.subgroup_variables {
            if v != "sex" && v != "age_bin" {
                return Err(PipelineError::Config(format!("unknown subgroup variable {v:?}")));
            }
        }
        let s = &self.eval.saliency;
        if s.mask_side == 0 || s.stride == 0 || s.mask_side > self.generator.image_side {
            return Err(PipelineError::Config("eval.saliency mask_side/stride invalid".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (key-sorted) JSON of everything except
    /// `paths`, so relocating a workdir keeps the hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Fixed workdir layout.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    /// `override_dir`, then the environment variable, then the config value.
    pub fn resolve(config: &RunConfig, override_dir: Option<&Path>) -> Self {
        let root = override_dir
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(WORKDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.paths.workdir.clone());
        Workdir { root }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn stage1_checkpoint(&self, variant: &str, m: Modality) -> PathBuf {
        self.checkpoints().join(format!("stage1-{variant}-{m}.json"))
    }

    pub fn fusion_checkpoint(&self, variant: &str) -> PathBuf {
        self.checkpoints().join(format!("fusion-{variant}.json"))
    }
}
