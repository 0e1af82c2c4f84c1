//! Flat run configuration shared by every command.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::Fusion;
use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub text_width: usize,
    pub max_text_len: usize,
    pub dec_layers: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_ff_width: usize,
    pub max_gen_len: usize,
    pub beam: usize,
    pub multi_stage_fusion: bool,
    pub dfam_enabled: bool,
    pub ddam_enabled: bool,
    pub dynamic_fusion_enabled: bool,
    /// Build the prior branch at all; off gives a current-image-only model.
    pub use_prior: bool,
    pub shared_backbone: bool,
    /// Prompts from gold labels during training instead of predictions.
    pub teacher_forcing: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weight: f64,
    pub augment: bool,
    pub train_data: String,
    pub test_data: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let d = DecoderConfig::default();
        Self {
            seed: 0,
            in_channels: b.in_channels,
            image_size: b.image_size,
            widths: b.widths,
            text_width: 64,
            max_text_len: 100,
            dec_layers: d.layers,
            dec_width: d.width,
            dec_heads: d.heads,
            dec_ff_width: d.ff_width,
            max_gen_len: d.max_len,
            beam: d.beam,
            multi_stage_fusion: true,
            dfam_enabled: true,
            ddam_enabled: true,
            dynamic_fusion_enabled: true,
            use_prior: true,
            shared_backbone: false,
            teacher_forcing: false,
            lr: 5e-5,
            weight_decay: 0.05,
            epochs: 10,
            batch_size: 16,
            loss_weight: 4.0,
            augment: false,
            train_data: "data/train".into(),
            test_data: "data/test".into(),
            out_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            widths: self.widths.clone(),
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.dec_layers,
            width: self.dec_width,
            heads: self.dec_heads,
            ff_width: self.dec_ff_width,
            max_len: self.max_gen_len,
            beam: self.beam,
        }
    }

    pub fn fusion(&self) -> Fusion {
        Fusion {
            multi_stage: self.multi_stage_fusion,
            dfam: self.dfam_enabled,
            ddam: self.ddam_enabled,
            dynamic: self.dynamic_fusion_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.decoder().validate()?;
        if self.text_width == 0 || self.max_text_len == 0 {
            return Err(ModelError::Config("text width and length must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(ModelError::Config("learning rate and batch size must be positive".into()));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(ModelError::Config("loss weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::None => {}
            Ablation::NoMsf => self.multi_stage_fusion = false,
            Ablation::NoDam => self.ddam_enabled = false,
            Ablation::NoFam => self.dfam_enabled = false,
            Ablation::NoDf => self.dynamic_fusion_enabled = false,
        }
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    None,
    NoMsf,
    NoDam,
    NoFam,
    NoDf,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::None, Ablation::NoMsf, Ablation::NoDam, Ablation::NoFam, Ablation::NoDf];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoMsf => "no-msf",
            Ablation::NoDam => "no-dam",
            Ablation::NoFam => "no-fam",
            Ablation::NoDf => "no-df",
        }
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown ablation {s:?}")))
    }
}
