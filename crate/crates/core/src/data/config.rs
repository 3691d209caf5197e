//! Run configuration: a flat JSON object; missing keys take defaults and
//! unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synth::SceneSpec;
use crate::losses::FgLossConfig;
use crate::neck::NeckConfig;
use crate::{CoreError, Level, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub image_size: usize,
    pub boxes_per_scene: usize,
    pub num_classes: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub noise_amp: f64,

    pub channels: usize,
    pub fgfm_levels: BTreeSet<Level>,
    pub aamha_levels: BTreeSet<Level>,
    pub maskbias_levels: BTreeSet<Level>,
    pub gamma: f64,
    pub beta: f64,
    pub heads: usize,
    pub attn_dim: Option<usize>,
    pub dropout: f64,
    pub head_level: Level,

    pub lambda_d: f64,
    pub lambda_fg: f64,
    pub dice_smooth: f64,
    pub bce_eps: f64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    /// Cosine decay to zero over the post-warmup steps.
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,

    pub eval_scenes: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let neck = NeckConfig::default();
        let loss = FgLossConfig::default();
        RunConfig {
            seed: 7,
            image_size: 64,
            boxes_per_scene: 3,
            num_classes: 1,
            box_min: 12.0,
            box_max: 28.0,
            noise_amp: 0.3,
            channels: neck.channels,
            fgfm_levels: neck.fgfm_levels,
            aamha_levels: neck.aamha_levels,
            maskbias_levels: neck.maskbias_levels,
            gamma: neck.gamma,
            beta: neck.beta,
            heads: neck.heads,
            attn_dim: neck.attn_dim,
            dropout: neck.dropout,
            head_level: Level::P3,
            lambda_d: loss.lambda_d,
            lambda_fg: loss.lambda_fg,
            dice_smooth: loss.dice_smooth,
            bce_eps: loss.bce_eps,
            lr: 0.0075,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 300,
            warmup_steps: 20,
            cosine_decay: true,
            batch_size: 4,
            grad_clip: Some(10.0),
            eval_scenes: 32,
            score_thresh: 0.05,
            nms_iou: 0.3,
        }
    }
}

impl RunConfig {
    pub fn neck(&self) -> NeckConfig {
        NeckConfig {
            channels: self.channels,
            fgfm_levels: self.fgfm_levels.clone(),
            aamha_levels: self.aamha_levels.clone(),
            maskbias_levels: self.maskbias_levels.clone(),
            gamma: self.gamma,
            beta: self.beta,
            heads: self.heads,
            attn_dim: self.attn_dim,
            dropout: self.dropout,
        }
    }

    pub fn loss(&self) -> FgLossConfig {
        FgLossConfig {
            lambda_d: self.lambda_d,
            lambda_fg: self.lambda_fg,
            dice_smooth: self.dice_smooth,
            bce_eps: self.bce_eps,
        }
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            boxes: self.boxes_per_scene,
            num_classes: self.num_classes,
            box_min: self.box_min,
            box_max: self.box_max,
            noise_amp: self.noise_amp,
        }
    }

    /// Same run with FGFM and AAMHA disabled.
    pub fn baseline(&self) -> Self {
        RunConfig {
            fgfm_levels: BTreeSet::new(),
            aamha_levels: BTreeSet::new(),
            maskbias_levels: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_thresh and nms_iou must lie in [0, 1]".into());
        }
        self.scene().validate()?;
        self.neck().validate()?;
        self.loss().validate()
    }

    /// Parse, apply defaults and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CoreError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}
