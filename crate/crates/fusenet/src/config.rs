//! Run configuration: a preset, optionally overlaid by a TOML or JSON file,
//! then by command-line flags. The resolved value is written next to every
//! run's outputs.

use std::path::Path;

use fusenet_core::clf3d::{ClassifierConfig, TrainConfig};
use fusenet_core::evalkit::DEFAULT_FRACTIONS;
use fusenet_core::fusion::DEFAULT_K;
use fusenet_core::patcher::{PatchSpec, INFERENCE_PATCHES};
use fusenet_core::preproc::PreprocConfig;
use fusenet_core::segnet::{PretrainConfig, SegNetConfig};
use fusenet_core::synthlab::{DatasetSpec, PhantomSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 32³ volumes and patches, reduced widths; minutes on one CPU.
    Desk,
    /// 112³ volumes and patches at full width.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub preproc: PreprocConfig,
    pub segnet: SegNetConfig,
    pub pretrain: PretrainConfig,
    /// Upper bound on training scans used to pre-train the segnet.
    pub pretrain_scans: usize,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub patch: PatchSpec,
    pub synth: DatasetSpec,
    pub selection_k: usize,
    pub inference_patches: usize,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                preproc: PreprocConfig { target_dims: [32; 3], ..PreprocConfig::default() },
                segnet: SegNetConfig::default(),
                pretrain: PretrainConfig::default(),
                pretrain_scans: 20,
                classifier: ClassifierConfig::desk(),
                train: TrainConfig::default(),
                patch: PatchSpec::desk(),
                synth: DatasetSpec::default(),
                selection_k: DEFAULT_K,
                inference_patches: INFERENCE_PATCHES,
                split_fractions: DEFAULT_FRACTIONS,
                split_seed: 0,
            },
            Preset::Paper => Self {
                preset,
                preproc: PreprocConfig::default(),
                classifier: ClassifierConfig::default(),
                patch: PatchSpec::default(),
                synth: DatasetSpec { phantom: PhantomSpec::paper(), ..DatasetSpec::default() },
                pretrain_scans: 100,
                ..Self::preset(Preset::Desk)
            },
        }
    }

    /// Preset values overlaid key by key with the file's contents.
    pub fn load(preset: Preset, file: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: Value = match path.extension().and_then(|e| e.to_str()) {
                Some("json") => serde_json::from_str(&text)?,
                _ => {
                    let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    serde_json::to_value(t)?
                }
            };
            if let Some(p) = overlay.get("preset") {
                let named: Preset = serde_json::from_value(p.clone())?;
                if named != preset {
                    base = serde_json::to_value(Self::preset(named))?;
                }
            }
            merge(&mut base, overlay);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preproc.validate()?;
        self.segnet.validate()?;
        self.classifier.validate()?;
        self.train.validate()?;
        self.patch.validate()?;
        if self.selection_k == 0 || self.selection_k > self.segnet.tap_channels() {
            return Err(Error::Config(format!("selection_k must lie in 1..={}", self.segnet.tap_channels())));
        }
        if self.inference_patches == 0 {
            return Err(Error::Config("inference_patches must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_slice(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(RunConfig::preset(Preset::Paper).patch.patch_dims, [112; 3]);
        assert_eq!(RunConfig::preset(Preset::Desk).classifier.base_channels, 8);
    }

    #[test]
    fn file_overlays_single_fields() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "seed = 5\n[train]\nepochs = 3\n[train.schedule]\nlr_max = 0.01\n").unwrap();
        let c = RunConfig::load(Preset::Desk, Some(&toml_path)).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.schedule.lr_max), (5, 3, 0.01));
        assert_eq!(c.train.batch_size, 16);
        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"preset": "paper", "selection_k": 61}"#).unwrap();
        assert!(matches!(RunConfig::load(Preset::Desk, Some(&json_path)), Err(Error::Config(_))));
    }
}
