//! Toy backbone, baseline FPN and the FGAA neck.
//!
//! FGFM modulates lateral features before top-down fusion; AAMHA refines
//! fused features. At mask-bias levels the same level's detached FGFM map
//! feeds the attention foreground bias.

use std::collections::{BTreeMap, BTreeSet};

use fgaa_tensor::nn::join;
use fgaa_tensor::{Conv2d, Graph, GroupNorm, Init, Module, Param, Var};
use serde::{Deserialize, Serialize};

use crate::aamha::{Aamha, DEFAULT_BETA, DEFAULT_DROPOUT, DEFAULT_GAMMA, DEFAULT_HEADS};
use crate::fgfm::Fgfm;
use crate::{CoreError, Level, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckConfig {
    pub channels: usize,
    pub fgfm_levels: BTreeSet<Level>,
    pub aamha_levels: BTreeSet<Level>,
    pub maskbias_levels: BTreeSet<Level>,
    pub gamma: f64,
    pub beta: f64,
    pub heads: usize,
    /// Attention width `D`; `None` means `D = channels`.
    pub attn_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            channels: 64,
            fgfm_levels: [Level::P3, Level::P4, Level::P5].into(),
            aamha_levels: [Level::P5, Level::P6, Level::P7].into(),
            maskbias_levels: [Level::P5].into(),
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            heads: DEFAULT_HEADS,
            attn_dim: None,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl NeckConfig {
    /// Reference-scale widths: `C = 256` with full placement.
    pub fn reference() -> Self {
        NeckConfig {
            channels: 256,
            ..Self::default()
        }
    }

    /// Same widths with both modules disabled.
    pub fn baseline(&self) -> Self {
        NeckConfig {
            fgfm_levels: BTreeSet::new(),
            aamha_levels: BTreeSet::new(),
            maskbias_levels: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim.unwrap_or(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.channels == 0 {
            return err("neck.channels must be positive".into());
        }
        if self.heads == 0 || self.attn_dim() == 0 || self.attn_dim() % self.heads != 0 {
            return err(format!(
                "neck.attn_dim {} must be a positive multiple of neck.heads {}",
                self.attn_dim(),
                self.heads
            ));
        }
        for l in &self.maskbias_levels {
            if !self.aamha_levels.contains(l) || !self.fgfm_levels.contains(l) {
                return err(format!(
                    "neck.maskbias_levels: {l} needs both FGFM and AAMHA"
                ));
            }
        }
        if !(self.gamma.is_finite() && self.beta.is_finite()) {
            return err("neck.gamma and neck.beta must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("neck.dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

fn check_channels(x: Var<'_>, expected: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != expected {
        return Err(CoreError::Config(format!(
            "{what}: expected [{expected}, H, W], got {s:?}"
        )));
    }
    Ok(())
}

/// Strided conv stack: strides 2, 4 (stem), then 8, 16, 32 with widths
/// `2C`, `4C`, `8C`. Every conv is followed by GroupNorm and ReLU.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub stages: Vec<(Conv2d, GroupNorm)>,
}

impl ToyBackbone {
    pub fn new(base: usize, init: &mut Init) -> Self {
        let widths = [3, base, base, 2 * base, 4 * base, 8 * base];
        let stages = widths
            .windows(2)
            .map(|w| (Conv2d::new(w[0], w[1], 3, 2, init), GroupNorm::new(w[1])))
            .collect();
        ToyBackbone { stages }
    }

    pub fn out_widths(&self) -> [usize; 3] {
        let c = |i: usize| self.stages[i].0.c_out();
        [c(2), c(3), c(4)]
    }

    /// `(C3, C4, C5)` for a `[3, H, W]` image with `H, W` divisible by 32.
    pub fn forward<'g>(&self, g: &'g Graph, image: Var<'g>) -> Result<[Var<'g>; 3]> {
        check_channels(image, 3, "backbone input")?;
        let s = image.shape();
        if s[1] % 32 != 0 || s[2] % 32 != 0 {
            return Err(CoreError::Config(format!(
                "image extent {}x{} is not divisible by 32",
                s[1], s[2]
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(3);
        for (i, (conv, gn)) in self.stages.iter().enumerate() {
            x = gn.forward(g, conv.forward(g, x)?)?.relu();
            if i >= 2 {
                outs.push(x);
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}

impl Module for ToyBackbone {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, (conv, gn)) in self.stages.iter().enumerate() {
            conv.visit_params(&join(prefix, &format!("stage{i}.conv")), f);
            gn.visit_params(&join(prefix, &format!("stage{i}.gn")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, (conv, gn)) in self.stages.iter_mut().enumerate() {
            conv.visit_params_mut(&join(prefix, &format!("stage{i}.conv")), f);
            gn.visit_params_mut(&join(prefix, &format!("stage{i}.gn")), f);
        }
    }
}

/// Level → feature map.
pub type Pyramid<'g> = BTreeMap<Level, Var<'g>>;

#[derive(Clone, Debug)]
pub struct Fpn {
    /// 1×1 lateral convs for C3, C4, C5.
    pub lateral: [Conv2d; 3],
    /// 3×3 output convs for P3, P4, P5.
    pub smooth: [Conv2d; 3],
    pub p6: Conv2d,
    pub p7: Conv2d,
}

const BACKBONE_LEVELS: [Level; 3] = [Level::P3, Level::P4, Level::P5];

impl Fpn {
    pub fn new(in_widths: [usize; 3], channels: usize, init: &mut Init) -> Self {
        Fpn {
            lateral: in_widths.map(|c| Conv2d::new(c, channels, 1, 1, init)),
            smooth: [0; 3].map(|_| Conv2d::new(channels, channels, 3, 1, init)),
            p6: Conv2d::new(channels, channels, 3, 2, init),
            p7: Conv2d::new(channels, channels, 3, 2, init),
        }
    }

    pub fn laterals<'g>(&self, g: &'g Graph, feats: [Var<'g>; 3]) -> Result<[Var<'g>; 3]> {
        let mut out = Vec::with_capacity(3);
        for (conv, x) in self.lateral.iter().zip(feats) {
            check_channels(x, conv.c_in(), "lateral input")?;
            out.push(conv.forward(g, x)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Top-down fusion `P_l = smooth(lat_l + up(P_{l+1}))`, returning P3–P5.
    pub fn fuse<'g>(&self, g: &'g Graph, laterals: [Var<'g>; 3]) -> Result<[Var<'g>; 3]> {
        let p5 = self.smooth[2].forward(g, laterals[2])?;
        let mut out = [p5; 3];
        for i in (0..2).rev() {
            let s = laterals[i].shape();
            let up = out[i + 1].bilinear_resize(s[1], s[2])?;
            out[i] = self.smooth[i].forward(g, laterals[i].add(up)?)?;
        }
        Ok(out)
    }

    /// Plain FPN pyramid P3–P7.
    pub fn forward<'g>(&self, g: &'g Graph, feats: [Var<'g>; 3]) -> Result<Pyramid<'g>> {
        let fused = self.fuse(g, self.laterals(g, feats)?)?;
        let mut pyr: Pyramid<'g> = BACKBONE_LEVELS.into_iter().zip(fused).collect();
        let p6 = self.p6.forward(g, fused[2])?;
        pyr.insert(Level::P6, p6);
        pyr.insert(Level::P7, self.p7.forward(g, p6.relu())?);
        Ok(pyr)
    }
}

impl Module for Fpn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (l, conv) in BACKBONE_LEVELS.iter().zip(&self.lateral) {
            conv.visit_params(&join(prefix, &format!("lateral.{l}")), f);
        }
        for (l, conv) in BACKBONE_LEVELS.iter().zip(&self.smooth) {
            conv.visit_params(&join(prefix, &format!("smooth.{l}")), f);
        }
        self.p6.visit_params(&join(prefix, "p6"), f);
        self.p7.visit_params(&join(prefix, "p7"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (l, conv) in BACKBONE_LEVELS.iter().zip(&mut self.lateral) {
            conv.visit_params_mut(&join(prefix, &format!("lateral.{l}")), f);
        }
        for (l, conv) in BACKBONE_LEVELS.iter().zip(&mut self.smooth) {
            conv.visit_params_mut(&join(prefix, &format!("smooth.{l}")), f);
        }
        self.p6.visit_params_mut(&join(prefix, "p6"), f);
        self.p7.visit_params_mut(&join(prefix, "p7"), f);
    }
}

/// FPN plus per-level FGFM and AAMHA modules.
#[derive(Clone, Debug)]
pub struct FgaaNeck {
    pub config: NeckConfig,
    pub fpn: Fpn,
    pub fgfm: BTreeMap<Level, Fgfm>,
    pub aamha: BTreeMap<Level, Aamha>,
}

#[derive(Clone, Debug)]
pub struct NeckOutput<'g> {
    pub pyramid: Pyramid<'g>,
    /// Un-detached foreground maps, one per FGFM level.
    pub fg_maps: BTreeMap<Level, Var<'g>>,
    /// Attention maps, one per AAMHA level.
    pub attn: BTreeMap<Level, Var<'g>>,
}

impl FgaaNeck {
    /// FPN weights come from `init`; FGFM and AAMHA draw from a separate
    /// stream seeded by `module_seed`, so baseline and full necks built from
    /// the same seeds share their FPN weights.
    pub fn new(
        config: &NeckConfig,
        in_widths: [usize; 3],
        init: &mut Init,
        module_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let fpn = Fpn::new(in_widths, c, init);
        let mut minit = Init::new(module_seed);
        let fgfm = config
            .fgfm_levels
            .iter()
            .map(|&l| (l, Fgfm::new(c, &mut minit)))
            .collect();
        let mut aamha = BTreeMap::new();
        for &l in &config.aamha_levels {
            let mut a = Aamha::new(c, config.attn_dim(), config.heads, &mut minit)?;
            a.gamma = config.gamma;
            a.beta = config.beta;
            a.dropout = config.dropout;
            aamha.insert(l, a);
        }
        Ok(FgaaNeck {
            config: config.clone(),
            fpn,
            fgfm,
            aamha,
        })
    }

    fn apply_fgfm<'g>(
        &self,
        g: &'g Graph,
        level: Level,
        x: Var<'g>,
        fg_maps: &mut BTreeMap<Level, Var<'g>>,
    ) -> Result<Var<'g>> {
        match self.fgfm.get(&level) {
            Some(m) => {
                let out = m.forward(g, x)?;
                fg_maps.insert(level, out.fg_map);
                Ok(out.modulated)
            }
            None => Ok(x),
        }
    }

    /// Dropout in attention is active only when `rng` is given.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        feats: [Var<'g>; 3],
        mut rng: Option<&mut (dyn rand::RngCore + '_)>,
    ) -> Result<NeckOutput<'g>> {
        let mut fg_maps = BTreeMap::new();
        let mut lat = self.fpn.laterals(g, feats)?;
        for (i, &l) in BACKBONE_LEVELS.iter().enumerate() {
            lat[i] = self.apply_fgfm(g, l, lat[i], &mut fg_maps)?;
        }
        let fused = self.fpn.fuse(g, lat)?;
        let mut pyramid: Pyramid<'g> = BACKBONE_LEVELS.into_iter().zip(fused).collect();
        // P6/P7 have no lateral; FGFM there acts on the extension output.
        let p6 = self.fpn.p6.forward(g, fused[2])?;
        let p6 = self.apply_fgfm(g, Level::P6, p6, &mut fg_maps)?;
        let p7 = self.fpn.p7.forward(g, p6.relu())?;
        let p7 = self.apply_fgfm(g, Level::P7, p7, &mut fg_maps)?;
        pyramid.insert(Level::P6, p6);
        pyramid.insert(Level::P7, p7);

        let mut attn = BTreeMap::new();
        for (&l, module) in &self.aamha {
            let mask = if self.config.maskbias_levels.contains(&l) {
                fg_maps.get(&l).map(|m| m.stop_gradient())
            } else {
                None
            };
            let out = module.forward(g, pyramid[&l], mask, rng.as_deref_mut())?;
            pyramid.insert(l, out.out);
            attn.insert(l, out.attn);
        }
        Ok(NeckOutput {
            pyramid,
            fg_maps,
            attn,
        })
    }
}

impl Module for FgaaNeck {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.fpn.visit_params(&join(prefix, "fpn"), f);
        for (l, m) in &self.fgfm {
            m.visit_params(&join(prefix, &format!("fgfm.{l}")), f);
        }
        for (l, m) in &self.aamha {
            m.visit_params(&join(prefix, &format!("aamha.{l}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fpn.visit_params_mut(&join(prefix, "fpn"), f);
        for (l, m) in &mut self.fgfm {
            m.visit_params_mut(&join(prefix, &format!("fgfm.{l}")), f);
        }
        for (l, m) in &mut self.aamha {
            m.visit_params_mut(&join(prefix, &format!("aamha.{l}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fgaa_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor {
        Tensor::rand_uniform(&[3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn backbone_shapes_and_divisibility() {
        let bb = ToyBackbone::new(8, &mut Init::new(0));
        let g = Graph::new();
        let [c3, c4, c5] = bb.forward(&g, g.constant(image(1))).unwrap();
        assert_eq!(c3.shape(), vec![16, 8, 8]);
        assert_eq!(c4.shape(), vec![32, 4, 4]);
        assert_eq!(c5.shape(), vec![64, 2, 2]);
        let bad = g.constant(Tensor::zeros(&[3, 48, 64]));
        assert!(matches!(bb.forward(&g, bad), Err(CoreError::Config(_))));
    }

    #[test]
    fn pyramid_extents_follow_ceil() {
        let bb = ToyBackbone::new(8, &mut Init::new(0));
        let mut init = Init::new(1);
        let neck = FgaaNeck::new(
            &NeckConfig {
                channels: 8,
                ..Default::default()
            },
            bb.out_widths(),
            &mut init,
            2,
        )
        .unwrap();
        for n in [64, 96] {
            let g = Graph::new();
            let img = Tensor::rand_uniform(&[3, n, n], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            let feats = bb.forward(&g, g.constant(img)).unwrap();
            let out = neck.forward(&g, feats, None).unwrap();
            for (l, v) in &out.pyramid {
                assert_eq!(v.shape(), vec![8, l.extent(n), l.extent(n)], "{l} at {n}");
            }
            assert_eq!(out.fg_maps.len(), 3);
            assert_eq!(out.attn.len(), 3);
        }
    }

    #[test]
    fn baseline_reduction_is_bitwise() {
        let cfg = NeckConfig {
            channels: 8,
            ..Default::default()
        };
        let bb = ToyBackbone::new(8, &mut Init::new(0));
        let full = FgaaNeck::new(&cfg.baseline(), bb.out_widths(), &mut Init::new(5), 6).unwrap();
        let g = Graph::new();
        let feats = bb.forward(&g, g.constant(image(2))).unwrap();
        let a = full.forward(&g, feats, None).unwrap();
        let b = full.fpn.forward(&g, feats).unwrap();
        assert!(a.fg_maps.is_empty());
        for l in Level::ALL {
            assert_eq!(a.pyramid[&l].value().data(), b[&l].value().data());
        }
    }

    #[test]
    fn zero_upper_pathway_leaves_smoothed_lateral() {
        let mut fpn = Fpn::new([4, 4, 4], 4, &mut Init::new(0));
        fpn.smooth[1] = Conv2d::zeroed(4, 4, 3, 1);
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats =
            [8, 4, 2].map(|n| g.constant(Tensor::rand_uniform(&[4, n, n], -1.0, 1.0, &mut rng)));
        let pyr = fpn.forward(&g, feats).unwrap();
        let manual = fpn.smooth[0]
            .forward(&g, fpn.lateral[0].forward(&g, feats[0]).unwrap())
            .unwrap();
        assert_eq!(pyr[&Level::P3].value().data(), manual.value().data());
    }

    #[test]
    fn config_validation() {
        assert!(NeckConfig::default().validate().is_ok());
        let bad = NeckConfig {
            maskbias_levels: [Level::P4].into(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NeckConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
