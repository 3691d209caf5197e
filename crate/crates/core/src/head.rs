//! Dense single-level oriented head: objectness plus box regression per cell.

use fgaa_geometry::{rotated_iou, GridSpec, OrientedBox};
use fgaa_tensor::nn::join;
use fgaa_tensor::{Conv2d, Graph, Init, Module, Param, Tensor, Var};

use crate::eval::Detection;
use crate::losses::decode_box;
use crate::Result;

pub const REG_CHANNELS: usize = 6;

#[derive(Clone, Debug)]
pub struct ToyHead {
    pub shared: Conv2d,
    pub objectness: Conv2d,
    pub regression: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'g> {
    /// Logits `[1, H, W]`.
    pub obj: Var<'g>,
    /// `(dx, dy, ln w, ln h, sin θ, cos θ)` per cell, `[6, H, W]`.
    pub reg: Var<'g>,
}

impl ToyHead {
    /// Objectness bias starts at `obj_prior`.
    pub fn new(channels: usize, obj_prior: f64, init: &mut Init) -> Self {
        let mut objectness = Conv2d::new(channels, 1, 1, 1, init).scaled(0.1);
        objectness
            .bias
            .set(Tensor::full(&[1], obj_prior))
            .expect("bias shape");
        ToyHead {
            shared: Conv2d::new(channels, channels, 3, 1, init),
            objectness,
            regression: Conv2d::new(channels, REG_CHANNELS, 1, 1, init).scaled(0.1),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<HeadOutput<'g>> {
        let h = self.shared.forward(g, x)?.relu();
        Ok(HeadOutput {
            obj: self.objectness.forward(g, h)?,
            reg: self.regression.forward(g, h)?,
        })
    }
}

impl Module for ToyHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.shared.visit_params(&join(prefix, "shared"), f);
        self.objectness.visit_params(&join(prefix, "objectness"), f);
        self.regression.visit_params(&join(prefix, "regression"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.shared.visit_params_mut(&join(prefix, "shared"), f);
        self.objectness
            .visit_params_mut(&join(prefix, "objectness"), f);
        self.regression
            .visit_params_mut(&join(prefix, "regression"), f);
    }
}

/// Greedy rotated NMS over boxes already sorted by descending score.
/// Returns the indices kept.
pub fn rotated_nms(boxes: &[OrientedBox], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[k], b) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept
}

/// Cells with `σ(obj) > score_thresh` decoded around their centres, then
/// rotated NMS; sorted by descending score.
pub fn decode_detections(
    obj: &Tensor,
    reg: &Tensor,
    grid: &GridSpec,
    image_id: &str,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let hw = grid.height * grid.width;
    let mut cands: Vec<(f64, OrientedBox)> = Vec::new();
    for cell in 0..hw {
        let score = 1.0 / (1.0 + (-obj.data()[cell]).exp());
        if score <= score_thresh {
            continue;
        }
        let t: [f64; 6] = std::array::from_fn(|k| reg.data()[k * hw + cell]);
        let c = grid.cell_center(cell / grid.width, cell % grid.width);
        let b = decode_box(&t, (c.x, c.y), grid.stride);
        if b.w.is_finite() && b.h.is_finite() && b.w > 0.0 && b.h > 0.0 {
            cands.push((score, b));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let boxes: Vec<OrientedBox> = cands.iter().map(|c| c.1).collect();
    rotated_nms(&boxes, nms_iou)
        .into_iter()
        .map(|i| Detection {
            image_id: image_id.to_string(),
            class_id: 0,
            score: cands[i].0,
            bbox: cands[i].1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_zero_objectness() {
        let mut head = ToyHead::new(8, -2.0, &mut Init::new(0));
        head.objectness = Conv2d::zeroed(8, 1, 1, 1);
        let g = Graph::new();
        let x = g.constant(Tensor::rand_uniform(
            &[8, 5, 7],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let out = head.forward(&g, x).unwrap();
        assert_eq!(out.obj.shape(), vec![1, 5, 7]);
        assert_eq!(out.reg.shape(), vec![6, 5, 7]);
        let grid = GridSpec::new(5, 7, 8.0).unwrap();
        let dets = decode_detections(&out.obj.value(), &out.reg.value(), &grid, "x", 0.0, 1.0);
        assert_eq!(dets.len(), 35);
        assert!(dets.iter().all(|d| d.score == 0.5));
        assert!(
            decode_detections(&out.obj.value(), &out.reg.value(), &grid, "x", 0.6, 0.5).is_empty()
        );
    }

    #[test]
    fn identical_boxes_suppressed() {
        let b = OrientedBox::new(10.0, 10.0, 8.0, 4.0, 0.3).unwrap();
        assert_eq!(rotated_nms(&[b, b], 0.5), vec![0]);
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let boxes: Vec<OrientedBox> = (0..20)
                .map(|_| {
                    OrientedBox::new(
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(4.0..14.0),
                        rng.gen_range(2.0..8.0),
                        rng.gen_range(-1.5..1.5),
                    )
                    .unwrap()
                })
                .collect();
            // suppression matrix first, then a single sweep
            let n = boxes.len();
            let over: Vec<Vec<bool>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| rotated_iou(&boxes[i], &boxes[j]) > 0.3)
                        .collect()
                })
                .collect();
            let mut alive = vec![true; n];
            for i in 0..n {
                if alive[i] {
                    for j in i + 1..n {
                        if over[i][j] {
                            alive[j] = false;
                        }
                    }
                }
            }
            let expected: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
            assert_eq!(rotated_nms(&boxes, 0.3), expected);
        }
    }
}
