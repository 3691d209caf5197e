//! DOTA annotation text: optional `imagesource:` / `gsd:` header lines, then
//! one object per line as eight coordinates, a category and a difficulty flag.

use std::fmt::Write as _;

use fgaa_geometry::{quad_to_obb, Point};

use crate::eval::{Detection, GroundTruth};
use crate::{CoreError, Result};

pub const DOTA_V1_0: [&str; 15] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
];

/// v1.5 adds one category to v1.0.
pub const DOTA_V1_5: [&str; 16] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
    "container-crane",
];

/// Case-insensitive index into a category vocabulary.
pub fn class_index(vocab: &[&str], category: &str) -> Option<usize> {
    vocab.iter().position(|v| v.eq_ignore_ascii_case(category))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DotaObject {
    pub quad: [f64; 8],
    pub category: String,
    pub difficult: bool,
}

impl DotaObject {
    pub fn points(&self) -> [Point; 4] {
        std::array::from_fn(|i| Point::new(self.quad[2 * i], self.quad[2 * i + 1]))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub objects: Vec<DotaObject>,
    pub imagesource: Option<String>,
    pub gsd: Option<String>,
}

fn parse_error(line: usize, token: &str, message: impl Into<String>) -> CoreError {
    CoreError::Parse {
        line,
        token: token.to_string(),
        message: message.into(),
    }
}

/// Parse annotation text; line numbers in errors are 1-based.
pub fn parse_dota(text: &str) -> Result<Annotation> {
    let mut ann = Annotation::default();
    let mut in_header = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if in_header {
            if let Some(v) = line.strip_prefix("imagesource:") {
                ann.imagesource = Some(v.trim().to_string());
                continue;
            }
            if let Some(v) = line.strip_prefix("gsd:") {
                ann.gsd = Some(v.trim().to_string());
                continue;
            }
            in_header = false;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(parse_error(
                line_no,
                line,
                format!(
                    "expected 10 tokens (8 coordinates, category, difficulty), found {}",
                    tokens.len()
                ),
            ));
        }
        let mut quad = [0.0; 8];
        for (k, tok) in tokens[..8].iter().enumerate() {
            quad[k] = match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    return Err(parse_error(
                        line_no,
                        tok,
                        "coordinate is not a finite number",
                    ))
                }
            };
        }
        let difficult = match tokens[9] {
            "0" => false,
            "1" => true,
            other => return Err(parse_error(line_no, other, "difficulty must be 0 or 1")),
        };
        ann.objects.push(DotaObject {
            quad,
            category: tokens[8].to_string(),
            difficult,
        });
    }
    Ok(ann)
}

/// Inverse of [`parse_dota`]; coordinates use the shortest exact decimal form.
pub fn format_dota(ann: &Annotation) -> String {
    let mut s = String::new();
    if let Some(v) = &ann.imagesource {
        let _ = writeln!(s, "imagesource:{v}");
    }
    if let Some(v) = &ann.gsd {
        let _ = writeln!(s, "gsd:{v}");
    }
    for o in &ann.objects {
        for c in o.quad {
            let _ = write!(s, "{c} ");
        }
        let _ = writeln!(s, "{} {}", o.category, u8::from(o.difficult));
    }
    s
}

impl Annotation {
    /// Minimum-area boxes with vocabulary class ids.
    pub fn ground_truths(&self, vocab: &[&str]) -> Result<Vec<GroundTruth>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let class_id = class_index(vocab, &o.category).ok_or_else(|| {
                    parse_error(i + 1, &o.category, "category not in the vocabulary")
                })?;
                Ok(GroundTruth {
                    image_id: self.image_id.clone(),
                    class_id,
                    bbox: quad_to_obb(&o.points())?,
                    difficult: o.difficult,
                })
            })
            .collect()
    }
}

/// Detection list, one per line: `image_id category score x1 y1 … x4 y4`.
/// Categories outside `vocab` get class id `vocab.len()` and count as false
/// positives during evaluation.
pub fn parse_detections(text: &str, vocab: &[&str]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 11 {
            return Err(parse_error(
                line_no,
                line,
                format!(
                    "expected 11 tokens (image id, category, score, 8 coordinates), found {}",
                    tokens.len()
                ),
            ));
        }
        let score = match tokens[2].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                return Err(parse_error(
                    line_no,
                    tokens[2],
                    "score is not a finite number",
                ))
            }
        };
        let mut pts = [Point::new(0.0, 0.0); 4];
        for k in 0..4 {
            let mut xy = [0.0; 2];
            for (j, v) in xy.iter_mut().enumerate() {
                let tok = tokens[3 + 2 * k + j];
                *v = match tok.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(parse_error(
                            line_no,
                            tok,
                            "coordinate is not a finite number",
                        ))
                    }
                };
            }
            pts[k] = Point::new(xy[0], xy[1]);
        }
        let bbox = quad_to_obb(&pts).map_err(|e| parse_error(line_no, line, e.to_string()))?;
        out.push(Detection {
            image_id: tokens[0].to_string(),
            class_id: class_index(vocab, tokens[1]).unwrap_or(vocab.len()),
            score,
            bbox,
        });
    }
    Ok(out)
}
