//! Run configuration: a sectioned TOML file with command-line overrides.
//! Every resolved run embeds the configuration it actually used, so any
//! artifact can be reproduced from its directory alone.

use anyhow::{bail, Context, Result};
use equijet_core::{GenConfig, ModelClass, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_n_train() -> usize {
    50_000
}
fn default_n_val() -> usize {
    5_000
}
fn default_n_test() -> usize {
    10_000
}

/// Generator section: event counts per split plus the physics knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub signal_fraction: f64,
    pub mean_tracks: f64,
    pub displaced_mean: f64,
    pub pt_min: f64,
    pub pt_max: f64,
    pub eta_max: f64,
    pub flight_scale_mm: f64,
    pub smear_mm: f64,
    pub fake_rate: f64,
    pub fake_scale_mm: f64,
    pub dir_sigma: f64,
    pub type_probs: [f64; 3],
}

impl Default for GenSection {
    fn default() -> Self {
        let g = GenConfig::default();
        GenSection {
            n_train: default_n_train(),
            n_val: default_n_val(),
            n_test: default_n_test(),
            signal_fraction: g.signal_fraction,
            mean_tracks: g.mean_tracks,
            displaced_mean: g.displaced_mean,
            pt_min: g.pt_min,
            pt_max: g.pt_max,
            eta_max: g.eta_max,
            flight_scale_mm: g.flight_scale_mm,
            smear_mm: g.smear_mm,
            fake_rate: g.fake_rate,
            fake_scale_mm: g.fake_scale_mm,
            dir_sigma: g.dir_sigma,
            type_probs: g.type_probs,
        }
    }
}

impl GenSection {
    /// Generator config for one split, seeded with a split-specific stream.
    pub fn to_gen_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            signal_fraction: self.signal_fraction,
            mean_tracks: self.mean_tracks,
            displaced_mean: self.displaced_mean,
            pt_min: self.pt_min,
            pt_max: self.pt_max,
            eta_max: self.eta_max,
            flight_scale_mm: self.flight_scale_mm,
            smear_mm: self.smear_mm,
            fake_rate: self.fake_rate,
            fake_scale_mm: self.fake_scale_mm,
            dir_sigma: self.dir_sigma,
            type_probs: self.type_probs,
            seed,
        }
    }
}

/// Model section: architecture family, feature switches, widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// One of "baseline", "vector", "tensor".
    pub class: String,
    pub bilinear: bool,
    pub so2: bool,
    pub latent: usize,
    pub hidden: usize,
    pub rep_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            class: "tensor".into(),
            bilinear: true,
            so2: true,
            latent: 8,
            hidden: 32,
            rep_width: 4,
        }
    }
}

pub fn parse_class(name: &str) -> Result<ModelClass> {
    Ok(match name {
        "baseline" => ModelClass::BaselinePfn,
        "vector" => ModelClass::Vector,
        "tensor" => ModelClass::Tensor,
        other => bail!("unknown model class '{other}' (expected baseline, vector, or tensor)"),
    })
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> Result<ModelConfig> {
        Ok(ModelConfig {
            class: parse_class(&self.class)?,
            enable_bilinear: self.bilinear,
            enable_so2: self.so2,
            latent: self.latent,
            hidden: self.hidden,
            rep_width: self.rep_width,
            seed,
        })
    }
}

/// Training section: optimizer and schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early stopping: epochs without validation-loss improvement.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Random beam-axis rotation of each training batch.
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 8,
            batch_size: 128,
            lr: 3e-3,
            patience: 10,
            clip_norm: 5.0,
            augment: false,
        }
    }
}

/// Ablation section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Training runs per ladder row.
    pub seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: 5 }
    }
}

/// The full sectioned configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration next to a run's artifacts.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())
            .with_context(|| format!("writing resolved config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = FileConfig::default();
        let text = cfg.to_toml();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.gen.n_train, cfg.gen.n_train);
        assert_eq!(back.model.class, cfg.model.class);
        assert_eq!(back.train.epochs, cfg.train.epochs);
        assert_eq!(back.ablate.seeds, cfg.ablate.seeds);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: FileConfig =
            toml::from_str("[train]\nepochs = 3\n\n[model]\nclass = \"vector\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.class, "vector");
        assert_eq!(cfg.gen.n_train, 50_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<FileConfig, _> = toml::from_str("[train]\nepcohs = 3\n");
        assert!(r.is_err());
    }

    #[test]
    fn class_names_parse() {
        assert!(parse_class("baseline").is_ok());
        assert!(parse_class("vector").is_ok());
        assert!(parse_class("tensor").is_ok());
        assert!(parse_class("Tensor").is_err());
    }
}
