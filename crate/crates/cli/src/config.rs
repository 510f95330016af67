//! The run configuration: one TOML file with `[model]`, `[train]`, `[data]`,
//! `[eval]` and `[paths]` sections. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use equipatch::data::SynthSpec;
use equipatch::trainer::TrainConfig;
use equipatch::vit::{Activation, EmbedStage, EmbedVariant, PatchEmbedConfig, StageKind, ViTConfig};
use equipatch::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Stage geometry; the kernel kind follows the model variant.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub img_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub variant: EmbedVariant,
    /// Named stack geometry, used when `stages` is empty.
    pub embed_preset: String,
    pub c_mid: usize,
    pub stages: Vec<StageSection>,
    /// Linear variant only.
    pub patch: usize,
    pub inter_stage_activation: Activation,
    pub sigma_ratio: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            img_size: 64,
            in_channels: 3,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            n_classes: 9,
            variant: EmbedVariant::GmrStack,
            embed_preset: "6-11".into(),
            c_mid: 32,
            stages: Vec::new(),
            patch: 16,
            inter_stage_activation: Activation::Gelu,
            sigma_ratio: equipatch::gmr::DEFAULT_SIGMA_RATIO,
        }
    }
}

impl ModelSection {
    pub fn vit_config(&self) -> Result<ViTConfig> {
        let embed = match self.variant {
            EmbedVariant::Linear => PatchEmbedConfig::linear(self.patch),
            v => {
                let kind = if v == EmbedVariant::GmrStack {
                    StageKind::Gmr
                } else {
                    StageKind::Dense
                };
                let mut e = if self.stages.is_empty() {
                    PatchEmbedConfig::ablation(&self.embed_preset, kind, self.c_mid, self.embed_dim)?
                } else {
                    PatchEmbedConfig {
                        variant: v,
                        stages: self
                            .stages
                            .iter()
                            .map(|s| EmbedStage {
                                kind,
                                k: s.k,
                                stride: s.stride,
                                pad: s.pad,
                                c_out: s.c_out,
                            })
                            .collect(),
                        patch: 0,
                        inter_stage_activation: self.inter_stage_activation,
                        sigma_ratio: self.sigma_ratio,
                    }
                };
                e.inter_stage_activation = self.inter_stage_activation;
                e.sigma_ratio = self.sigma_ratio;
                e
            }
        };
        let cfg = ViTConfig {
            img_size: self.img_size,
            in_channels: self.in_channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            n_classes: self.n_classes,
            embed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_classes: usize,
    pub img_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub n_per_class: usize,
    /// Image folder to use instead of `--data`.
    pub folder: Option<PathBuf>,
    /// Per-class share held out for evaluation.
    pub test_frac: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_classes: 9,
            img_size: 64,
            channels: 3,
            seed: 0,
            n_per_class: 600,
            folder: None,
            test_frac: 1.0 / 6.0,
            split_seed: 0,
        }
    }
}

impl DataSection {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.n_classes,
            img_size: self.img_size,
            channels: self.channels,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Per-channel mean of the training split.
    TrainMean,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSubset {
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub angles: Vec<i64>,
    pub fill: FillPolicy,
    pub fill_value: f32,
    pub subset: EvalSubset,
    pub n_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            angles: equipatch::evalsuite::default_angles(),
            fill: FillPolicy::TrainMean,
            fill_value: 0.0,
            subset: EvalSubset::Test,
            n_images: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub checkpoint: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: PathBuf::from("runs"),
            checkpoint: "model.eqvt".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_tiny_gmr_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model.vit_config().unwrap(), ViTConfig::tiny(StageKind::Gmr));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval.angles.len(), 36);
        assert_eq!(cfg.data.synth_spec(), SynthSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[extra]\n").is_err());
        assert!(RunConfig::parse("[train]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn explicit_stages_and_variants() {
        let cfg = RunConfig::parse(
            r#"
[model]
variant = "conv_stack"
embed_dim = 64
heads = 2
stages = [{ k = 6, stride = 4, pad = 1, c_out = 8 }, { k = 6, stride = 2, pad = 2, c_out = 8 }, { k = 6, stride = 2, pad = 2, c_out = 64 }]
[train]
lr0 = 0.001
epochs = 2
"#,
        )
        .unwrap();
        let v = cfg.model.vit_config().unwrap();
        assert_eq!(v.embed.variant, EmbedVariant::ConvStack);
        assert!(v.embed.stages.iter().all(|s| s.kind == StageKind::Dense));
        assert_eq!(v.grid().unwrap(), 4);
        assert_eq!(cfg.train.epochs, 2);
        let lin = RunConfig::parse("[model]\nvariant = \"linear\"\n").unwrap();
        assert_eq!(lin.model.vit_config().unwrap(), ViTConfig::tiny_linear());
        let bad = RunConfig::parse("[model]\nembed_preset = \"7-7\"\n").unwrap();
        assert!(bad.model.vit_config().is_err());
    }
}
