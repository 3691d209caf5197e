//! Foreground supervision, toy detection loss and the total objective.

use fgaa_geometry::{canonical_angle, GridSpec, OrientedBox};
use fgaa_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgLossConfig {
    pub lambda_d: f64,
    pub lambda_fg: f64,
    pub dice_smooth: f64,
    pub bce_eps: f64,
}

impl Default for FgLossConfig {
    fn default() -> Self {
        FgLossConfig {
            lambda_d: 1.0,
            lambda_fg: 0.5,
            dice_smooth: 1.0,
            bce_eps: 1e-7,
        }
    }
}

impl FgLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_fg >= 0.0 && self.dice_smooth >= 0.0) {
            return Err(CoreError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(CoreError::Config(format!(
                "loss.bce_eps {} outside (0, 0.5)",
                self.bce_eps
            )));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, pred: Var<'_>, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(CoreError::Tensor(fgaa_tensor::TensorError::ShapeMismatch {
            op,
            lhs: pred.shape(),
            rhs: gt.shape().to_vec(),
        }));
    }
    Ok(())
}

/// Class-balanced BCE with `w_fg = N/(2·max(N_fg,1))`, `w_bg = N/(2·max(N_bg,1))`.
pub fn weighted_bce<'g>(pred: Var<'g>, gt: &Tensor, eps: f64) -> Result<Var<'g>> {
    check_same("weighted_bce", pred, gt)?;
    let g = pred.graph();
    let n = gt.len() as f64;
    let n_fg = gt.data().iter().filter(|&&v| v > 0.5).count() as f64;
    let n_bg = n - n_fg;
    let (w_fg, w_bg) = (n / (2.0 * n_fg.max(1.0)), n / (2.0 * n_bg.max(1.0)));
    let pos = g.constant(gt.map(|v| w_fg * v / n));
    let neg = g.constant(gt.map(|v| w_bg * (1.0 - v) / n));
    let p = pred.clamp(eps, 1.0 - eps);
    let lp = p.log()?.mul(pos)?.sum();
    let ln = p.neg().add_scalar(1.0).log()?.mul(neg)?.sum();
    Ok(lp.add(ln)?.neg())
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)`.
pub fn dice_loss<'g>(pred: Var<'g>, gt: &Tensor, smooth: f64) -> Result<Var<'g>> {
    check_same("dice_loss", pred, gt)?;
    let g = pred.graph();
    let inter = pred
        .mul(g.constant(gt.clone()))?
        .sum()
        .scale(2.0)
        .add_scalar(smooth);
    let denom = pred.sum().add_scalar(gt.sum() + smooth);
    Ok(inter.div(denom)?.neg().add_scalar(1.0))
}

/// Predicted map, its box-derived mask, and whether the level counts.
#[derive(Clone, Debug)]
pub struct LevelSupervision<'g> {
    pub pred: Var<'g>,
    pub gt: Tensor,
    pub valid: bool,
}

impl<'g> LevelSupervision<'g> {
    /// Valid iff the mask has at least one foreground cell.
    pub fn new(pred: Var<'g>, gt: Tensor) -> Self {
        let valid = gt.data().iter().any(|&v| v > 0.5);
        LevelSupervision { pred, gt, valid }
    }
}

/// `λ_fg · mean over valid levels of (BCE + λ_d·Dice)`; zero without valid levels.
pub fn foreground_loss<'g>(
    g: &'g Graph,
    levels: &[LevelSupervision<'g>],
    cfg: &FgLossConfig,
) -> Result<Var<'g>> {
    let valid: Vec<&LevelSupervision<'g>> = levels.iter().filter(|l| l.valid).collect();
    if valid.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let mut acc: Option<Var<'g>> = None;
    for l in &valid {
        let term = weighted_bce(l.pred, &l.gt, cfg.bce_eps)?
            .add(dice_loss(l.pred, &l.gt, cfg.dice_smooth)?.scale(cfg.lambda_d))?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let total = acc.expect("non-empty");
    Ok(total.scale(cfg.lambda_fg / valid.len() as f64))
}

/// Regression target `(dx, dy, ln w/s, ln h/s, sin θ, cos θ)` relative to a cell centre.
pub fn encode_box(b: &OrientedBox, cell: (f64, f64), stride: f64) -> [f64; 6] {
    let (s, c) = b.theta.sin_cos();
    [
        (b.cx - cell.0) / stride,
        (b.cy - cell.1) / stride,
        (b.w / stride).ln(),
        (b.h / stride).ln(),
        s,
        c,
    ]
}

pub fn decode_box(t: &[f64; 6], cell: (f64, f64), stride: f64) -> OrientedBox {
    OrientedBox {
        cx: cell.0 + t[0] * stride,
        cy: cell.1 + t[1] * stride,
        w: t[2].exp() * stride,
        h: t[3].exp() * stride,
        theta: canonical_angle(t[4].atan2(t[5])),
    }
}

/// Positive cells of one head level: `(cell index, box index)` in box order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub grid: GridSpec,
    pub positives: Vec<(usize, usize)>,
}

/// Centre-cell assignment; when two centres share a cell the first box wins.
pub fn assign_targets(
    boxes: &[OrientedBox],
    grid: &GridSpec,
    image: (usize, usize),
) -> Result<Assignment> {
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if !(b.cx >= 0.0 && b.cx < iw && b.cy >= 0.0 && b.cy < ih) {
            return Err(CoreError::Assignment(format!(
                "box {i} centre ({}, {}) outside the {}x{} image",
                b.cx, b.cy, image.1, image.0
            )));
        }
        let c = ((b.cx / grid.stride) as usize).min(grid.width - 1);
        let r = ((b.cy / grid.stride) as usize).min(grid.height - 1);
        let cell = r * grid.width + c;
        if positives.iter().all(|&(p, _)| p != cell) {
            positives.push((cell, i));
        }
    }
    Ok(Assignment {
        grid: *grid,
        positives,
    })
}

/// Objectness BCE over all cells plus smooth-L1 regression at positives,
/// both divided by `max(#positives, 1)`.
pub fn toy_det_loss<'g>(
    obj: Var<'g>,
    reg: Var<'g>,
    boxes: &[OrientedBox],
    assignment: &Assignment,
) -> Result<Var<'g>> {
    let g = obj.graph();
    let grid = &assignment.grid;
    let hw = grid.height * grid.width;
    let mut labels = Tensor::zeros(&[1, grid.height, grid.width]);
    let mut target = Tensor::zeros(&[6, grid.height, grid.width]);
    for &(cell, bi) in &assignment.positives {
        labels.data_mut()[cell] = 1.0;
        let centre = grid.cell_center(cell / grid.width, cell % grid.width);
        for (k, v) in encode_box(&boxes[bi], (centre.x, centre.y), grid.stride)
            .into_iter()
            .enumerate()
        {
            target.data_mut()[k * hw + cell] = v;
        }
    }
    let norm = 1.0 / (assignment.positives.len().max(1) as f64);
    let y = g.constant(labels.clone());
    let bce = obj.softplus().sub(obj.mul(y)?)?.sum();
    let diff = reg.sub(g.constant(target))?.mul(y)?;
    let l1 = diff.smooth_l1().sum();
    Ok(bce.add(l1)?.scale(norm))
}

/// `det + fg`; `λ_fg` is already folded into `fg`.
pub fn total_loss<'g>(det: Var<'g>, fg: Var<'g>) -> Result<Var<'g>> {
    if !det.item().is_finite() || !fg.item().is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss component (det {}, fg {})",
            det.item(),
            fg.item()
        )));
    }
    Ok(det.add(fg)?)
}
