//! Oriented-detection evaluation: greedy rotated-IoU matching and AP.

use std::fmt::Write as _;
use std::str::FromStr;

use fgaa_geometry::{rotated_iou, OrientedBox};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: OrientedBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: OrientedBox,
    pub difficult: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of the interpolated precision at recalls 0, 0.1, …, 1.
    Voc07,
    /// Area under the monotonized precision-recall curve.
    AllPoints,
}

impl FromStr for ApMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "voc07" => Ok(ApMode::Voc07),
            "all_points" => Ok(ApMode::AllPoints),
            other => Err(format!(
                "unknown AP mode `{other}` (expected voc07 or all_points)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Overlaps only a difficult object; neither TP nor FP.
    Ignored,
}

/// Greedy matching in the given order, which must be descending score.
///
/// A detection takes the unmatched non-difficult ground truth with the
/// highest IoU ≥ `thresh` (first in input order on ties). Failing that, a
/// difficult ground truth with IoU ≥ `thresh` makes it [`MatchFlag::Ignored`].
pub fn match_detections(
    dets: &[OrientedBox],
    gts: &[(OrientedBox, bool)],
    thresh: f64,
) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            let mut hits_difficult = false;
            for (j, (g, difficult)) in gts.iter().enumerate() {
                let iou = rotated_iou(d, g);
                if iou < thresh {
                    continue;
                }
                if *difficult {
                    hits_difficult = true;
                } else if !taken[j] && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    MatchFlag::Tp
                }
                None if hits_difficult => MatchFlag::Ignored,
                None => MatchFlag::Fp,
            }
        })
        .collect()
}

/// AP of a score-ordered TP/FP sequence; `None` when `num_gt == 0`.
pub fn average_precision(tp: &[bool], num_gt: usize, mode: ApMode) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        prec.push(ntp as f64 / (ntp + nfp) as f64);
        rec.push(ntp as f64 / num_gt as f64);
    }
    Some(match mode {
        ApMode::Voc07 => {
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    rec.iter()
                        .zip(&prec)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMode::AllPoints => {
            let mut mrec = vec![0.0];
            mrec.extend(&rec);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&prec);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub iou: f64,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    /// Non-difficult ground truths.
    pub num_gt: usize,
    pub per_threshold: Vec<ThresholdStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub iou: f64,
    /// Unweighted mean AP over classes with at least one ground truth.
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ApMode,
    pub classes: Vec<ClassReport>,
    pub map_per_threshold: Vec<ThresholdMap>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    /// Mean of the per-threshold mAP values.
    pub map_over_thresholds: f64,
    /// Detections whose class id is outside the vocabulary; all are FP.
    pub unknown_fp: usize,
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.map_per_threshold
            .iter()
            .find(|m| (m.iou - iou).abs() < 1e-12)
            .map(|m| m.map)
    }

    pub fn ap(&self, class_id: usize, iou: f64) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.class_id == class_id)?
            .per_threshold
            .iter()
            .find(|t| (t.iou - iou).abs() < 1e-12)?
            .ap
    }

    /// Aligned plain-text table, one row per class and a final mAP row.
    pub fn to_table(&self) -> String {
        let ious: Vec<f64> = self.map_per_threshold.iter().map(|m| m.iou).collect();
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(7);
        let mut s = format!("{:<width$} {:>6}", "class", "num_gt");
        for t in &ious {
            let _ = write!(s, " {:>7}", format!("AP{}", (t * 100.0).round() as u32));
        }
        s.push('\n');
        for c in &self.classes {
            let _ = write!(s, "{:<width$} {:>6}", c.name, c.num_gt);
            for t in &c.per_threshold {
                let cell = t.ap.map_or("-".to_string(), |a| format!("{:.4}", a));
                let _ = write!(s, " {:>7}", cell);
            }
            s.push('\n');
        }
        if self.unknown_fp > 0 {
            let _ = writeln!(
                s,
                "{:<width$} {:>6} (FP: {})",
                "unknown", 0, self.unknown_fp
            );
        }
        let _ = write!(s, "{:<width$} {:>6}", "mAP", "");
        for m in &self.map_per_threshold {
            let _ = write!(s, " {:>7}", format!("{:.4}", m.map));
        }
        let _ = write!(
            s,
            "\nmean over thresholds: {:.4} ({:?})\n",
            self.map_over_thresholds, self.mode
        );
        s
    }
}

fn class_stats(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    thresholds: &[f64],
    mode: ApMode,
) -> Vec<ThresholdStats> {
    let num_gt = gts.iter().filter(|g| !g.difficult).count();
    let mut images: Vec<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(gts.iter().map(|g| g.image_id.as_str()))
        .collect();
    images.sort_unstable();
    images.dedup();
    thresholds
        .iter()
        .map(|&t| {
            // flags indexed by position in the globally sorted list
            let mut flags = vec![MatchFlag::Fp; dets.len()];
            for img in &images {
                let idx: Vec<usize> = (0..dets.len())
                    .filter(|&i| dets[i].image_id == *img)
                    .collect();
                let boxes: Vec<OrientedBox> = idx.iter().map(|&i| dets[i].bbox).collect();
                let g: Vec<(OrientedBox, bool)> = gts
                    .iter()
                    .filter(|g| g.image_id == *img)
                    .map(|g| (g.bbox, g.difficult))
                    .collect();
                for (k, f) in match_detections(&boxes, &g, t).into_iter().enumerate() {
                    flags[idx[k]] = f;
                }
            }
            let seq: Vec<bool> = flags
                .iter()
                .filter(|f| **f != MatchFlag::Ignored)
                .map(|f| *f == MatchFlag::Tp)
                .collect();
            let tp = seq.iter().filter(|&&b| b).count();
            ThresholdStats {
                iou: t,
                ap: average_precision(&seq, num_gt, mode),
                tp,
                fp: seq.len() - tp,
                fn_: num_gt - tp,
            }
        })
        .collect()
}

/// Per-class AP at each threshold, pooled over images.
///
/// Detections are ordered by descending score with ties kept in input order.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_names: &[String],
    thresholds: &[f64],
    mode: ApMode,
) -> EvalReport {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let unknown_fp = order
        .iter()
        .filter(|d| d.class_id >= class_names.len())
        .count();

    let classes: Vec<ClassReport> = (0..class_names.len())
        .into_par_iter()
        .map(|c| {
            let cd: Vec<&Detection> = order.iter().copied().filter(|d| d.class_id == c).collect();
            let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
            ClassReport {
                class_id: c,
                name: class_names[c].clone(),
                num_gt: cg.iter().filter(|g| !g.difficult).count(),
                per_threshold: class_stats(&cd, &cg, thresholds, mode),
            }
        })
        .filter(|r| r.num_gt > 0 || r.per_threshold.iter().any(|t| t.fp > 0))
        .collect();

    let map_per_threshold: Vec<ThresholdMap> = thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let aps: Vec<f64> = classes
                .iter()
                .filter_map(|c| c.per_threshold[k].ap)
                .collect();
            let map = if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            };
            ThresholdMap { iou: t, map }
        })
        .collect();
    let pick = |iou: f64| {
        map_per_threshold
            .iter()
            .find(|m| (m.iou - iou).abs() < 1e-12)
            .map(|m| m.map)
    };
    let map_over_thresholds = if map_per_threshold.is_empty() {
        0.0
    } else {
        map_per_threshold.iter().map(|m| m.map).sum::<f64>() / map_per_threshold.len() as f64
    };
    EvalReport {
        mode,
        map50: pick(0.5),
        map75: pick(0.75),
        classes,
        map_per_threshold,
        map_over_thresholds,
        unknown_fp,
    }
}
