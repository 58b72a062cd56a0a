use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tdvit::backbone::ModelConfig;
use tdvit::synthtask::{experiment_data, ExperimentConfig, GenParams, TrainConfig};
use tdvit::tdtb::StreamMode;

/// Inference streaming mode selectable from the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cache reference keys/values for `dilation` frames.
    #[default]
    Reuse,
    /// Project reference keys/values on every frame (no cache).
    Refresh,
}

impl Mode {
    pub fn stream_mode(self) -> StreamMode {
        match self {
            Mode::Reuse => StreamMode::Reuse,
            Mode::Refresh => StreamMode::Recompute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub frames: usize,
    pub size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 64, size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrfConfig {
    /// Frame side of the probe videos.
    pub size: usize,
    /// Frames beyond the closed-form reach in each probe video.
    pub margin: usize,
}

impl Default for TrfConfig {
    fn default() -> Self {
        Self { size: 32, margin: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Case whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
    pub corrupt_by: Option<f64>,
}

/// One schema shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub data: GenParams,
    pub train: TrainConfig,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Paired seeds run by `train`, starting at `seed`.
    pub seeds: u64,
    pub bench: BenchConfig,
    pub trf: TrfConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            seed: 1,
            mode: Mode::Reuse,
            model: exp.model,
            data: experiment_data(),
            train: exp.train,
            train_videos: exp.train_videos,
            test_videos: exp.test_videos,
            seeds: 5,
            bench: BenchConfig::default(),
            trf: TrfConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub variant: Option<String>,
    pub toy_scale: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.is_file() {
                    bail!("config file {} does not exist", p.display());
                }
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(m) = o.mode {
            cfg.mode = m;
        }
        if let Some(v) = &o.variant {
            cfg.model.variant = v.clone();
            cfg.model.stages = None;
        }
        if let Some(s) = o.toy_scale {
            cfg.model.toy_scale = s;
        }
        cfg.model.resolve()?;
        cfg.data.validate()?;
        if cfg.seeds == 0 {
            bail!("seeds must be at least 1");
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            data: self.data.clone(),
            train: self.train.clone(),
            train_videos: self.train_videos,
            test_videos: self.test_videos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nvariantt = \"S\"").is_err());
        assert!(toml::from_str::<RunConfig>("[bench]\nframe = 3").is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let o = Overrides {
            seed: Some(9),
            mode: Some(Mode::Refresh),
            variant: Some("S".into()),
            toy_scale: Some(4),
        };
        let cfg = RunConfig::load(None, &o).unwrap();
        assert_eq!((cfg.seed, cfg.mode, cfg.model.variant.as_str(), cfg.model.toy_scale), (9, Mode::Refresh, "S", 4));
    }

    #[test]
    fn missing_file_and_bad_values_fail() {
        assert!(RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &Overrides::default()).is_err());
        let o = Overrides {
            variant: Some("XL".into()),
            ..Overrides::default()
        };
        assert!(RunConfig::load(None, &o).is_err());
    }
}
