//! Backbone, neck and head wired into one trainable detector.

use std::collections::BTreeMap;

use fgaa_tensor::nn::join;
use fgaa_tensor::{Graph, Init, Module, Param, Tensor, Var};

use crate::data::RunConfig;
use crate::head::{HeadOutput, ToyHead};
use crate::neck::{FgaaNeck, NeckConfig, Pyramid, ToyBackbone};
use crate::{Level, Result};

/// Initial objectness logit, σ(−2) ≈ 0.12.
pub const OBJ_PRIOR: f64 = -2.0;

/// Backbone, FPN and head draw from `Init(seed)` in that order; FGFM and
/// AAMHA use a stream derived from the same seed. A baseline and a full
/// detector with equal seeds therefore start from identical shared weights.
#[derive(Clone, Debug)]
pub struct Detector {
    pub backbone: ToyBackbone,
    pub neck: FgaaNeck,
    pub head: ToyHead,
    pub head_level: Level,
}

#[derive(Clone, Debug)]
pub struct DetectorOutput<'g> {
    pub head: HeadOutput<'g>,
    pub pyramid: Pyramid<'g>,
    pub fg_maps: BTreeMap<Level, Var<'g>>,
}

pub fn module_seed(seed: u64) -> u64 {
    seed ^ 0x6D0D_u64.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Detector {
    pub fn new(neck: &NeckConfig, head_level: Level, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let backbone = ToyBackbone::new(neck.channels, &mut init);
        let neck_mod = FgaaNeck::new(neck, backbone.out_widths(), &mut init, module_seed(seed))?;
        let head = ToyHead::new(neck.channels, OBJ_PRIOR, &mut init);
        Ok(Detector {
            backbone,
            neck: neck_mod,
            head,
            head_level,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(&cfg.neck(), cfg.head_level, cfg.seed)
    }

    /// Attention dropout is active only when `rng` is given.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        image: Var<'g>,
        rng: Option<&mut (dyn rand::RngCore + '_)>,
    ) -> Result<DetectorOutput<'g>> {
        let feats = self.backbone.forward(g, image)?;
        let neck = self.neck.forward(g, feats, rng)?;
        let head = self.head.forward(g, neck.pyramid[&self.head_level])?;
        Ok(DetectorOutput {
            head,
            pyramid: neck.pyramid,
            fg_maps: neck.fg_maps,
        })
    }

    /// Inference-mode head output as plain tensors.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Tensor, BTreeMap<Level, Tensor>)> {
        let g = Graph::new();
        let out = self.forward(&g, g.constant(image.clone()), None)?;
        let maps = out
            .fg_maps
            .iter()
            .map(|(&l, v)| (l, (*v.value()).clone()))
            .collect();
        Ok((
            (*out.head.obj.value()).clone(),
            (*out.head.reg.value()).clone(),
            maps,
        ))
    }
}

impl Module for Detector {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.neck.visit_params(&join(prefix, "neck"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.backbone.visit_params_mut(&join(prefix, "backbone"), f);
        self.neck.visit_params_mut(&join(prefix, "neck"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(channels: usize) -> NeckConfig {
        NeckConfig {
            channels,
            heads: 2,
            ..NeckConfig::default()
        }
    }

    #[test]
    fn baseline_shares_weights_with_full() {
        let full = Detector::new(&cfg(8), Level::P3, 3).unwrap();
        let base = Detector::new(&cfg(8).baseline(), Level::P3, 3).unwrap();
        let collect = |m: &dyn Fn(&mut dyn FnMut(String, &Param))| {
            let mut v = BTreeMap::new();
            m(&mut |n, p| {
                v.insert(n, p.value().clone());
            });
            v
        };
        let a = collect(&|f| full.visit_params("", f));
        let b = collect(&|f| base.visit_params("", f));
        assert!(b.len() < a.len());
        for (name, t) in &b {
            assert_eq!(a[name], *t, "{name}");
        }
    }

    #[test]
    fn head_shape_follows_level() {
        let m = Detector::new(&cfg(8), Level::P4, 1).unwrap();
        let (obj, reg, maps) = m.predict(&Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        assert_eq!(obj.shape(), &[1, 4, 4]);
        assert_eq!(reg.shape(), &[6, 4, 4]);
        assert_eq!(maps.len(), 3);
    }
}
