use crate::obb::OrientedBox;
use crate::polygon::Point;
use crate::GeometryError;

/// Feature grid: cell `(r, c)` samples image point `((c+0.5)·stride, (r+0.5)·stride)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: f64) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 || !(stride > 0.0) || !stride.is_finite() {
            return Err(GeometryError::InvalidGrid(format!(
                "{height}x{width} at stride {stride}"
            )));
        }
        Ok(GridSpec {
            height,
            width,
            stride,
        })
    }

    /// Grid covering an image of `h × w` pixels at `stride`, with ceil extents.
    pub fn for_image(h: usize, w: usize, stride: usize) -> Result<Self, GeometryError> {
        if stride == 0 {
            return Err(GeometryError::InvalidGrid("zero stride".into()));
        }
        Self::new(h.div_ceil(stride), w.div_ceil(stride), stride as f64)
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        Point::new(
            (c as f64 + 0.5) * self.stride,
            (r as f64 + 0.5) * self.stride,
        )
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Plain-text PGM with foreground at 255.
    pub fn to_pgm(&self) -> String {
        let vals: Vec<f64> = self.to_f64();
        pgm_from_values(self.height, self.width, &vals, 1.0)
    }
}

/// Plain-text (P2) graymap of `values / max` scaled to `[0, 255]`.
pub fn pgm_from_values(height: usize, width: usize, values: &[f64], max: f64) -> String {
    assert_eq!(values.len(), height * width);
    let mut s = format!("P2\n{width} {height}\n255\n");
    for r in 0..height {
        let row: Vec<String> = values[r * width..(r + 1) * width]
            .iter()
            .map(|v| {
                let scaled = if max > 0.0 { v / max } else { 0.0 };
                ((scaled.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Cell = 1 iff its sample point lies inside at least one box.
pub fn rasterize_obbs(boxes: &[OrientedBox], grid: &GridSpec) -> Mask {
    let mut mask = Mask::zeros(grid.height, grid.width);
    for b in boxes {
        let (x0, y0, x1, y1) = b.bounds();
        // Conservative cell range; the exact decision is the point test below.
        let lo = |v: f64| ((v / grid.stride - 0.5).floor() - 1.0).max(0.0) as usize;
        let hi = |v: f64, n: usize| {
            (((v / grid.stride - 0.5).ceil() + 1.0).max(-1.0) as isize).min(n as isize - 1)
        };
        let (c0, c1) = (lo(x0), hi(x1, grid.width));
        let (r0, r1) = (lo(y0), hi(y1, grid.height));
        if c1 < 0 || r1 < 0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                if b.contains(grid.cell_center(r, c)) {
                    mask.data[r * grid.width + c] = 1;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_box_and_empty_list() {
        let g = GridSpec::new(4, 6, 8.0).unwrap();
        let all = OrientedBox::new(24.0, 16.0, 100.0, 100.0, 0.3).unwrap();
        assert_eq!(rasterize_obbs(&[all], &g).count_ones(), 24);
        assert_eq!(rasterize_obbs(&[], &g).count_ones(), 0);
    }

    #[test]
    fn exact_cell_center_hit_is_inside() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        // right edge passes exactly through the centres of column 2
        let b = OrientedBox::new(1.5, 2.0, 2.0, 4.0, 0.0).unwrap();
        let m = rasterize_obbs(&[b], &g);
        assert_eq!(m.get(0, 2), 1);
        assert_eq!(m.get(0, 3), 0);
        assert_eq!(m.get(3, 0), 1);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let m = Mask {
            height: 2,
            width: 3,
            data: vec![0, 1, 0, 1, 1, 0],
        };
        assert_eq!(m.to_pgm(), "P2\n3 2\n255\n0 255 0\n255 255 0\n");
    }

    #[test]
    fn grid_for_image_uses_ceil() {
        let g = GridSpec::for_image(100, 64, 32).unwrap();
        assert_eq!((g.height, g.width), (4, 2));
        assert!(GridSpec::new(0, 1, 1.0).is_err());
    }
}
