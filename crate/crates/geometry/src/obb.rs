use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use crate::polygon::{Point, Polygon};
use crate::GeometryError;

/// Rotated rectangle. `w` runs along the direction `theta` (radians, CCW
/// from +x); `theta` is kept in `[−π/2, π/2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wrap an angle into `[−π/2, π/2)`; a rectangle is invariant under π rotation.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can return exactly π for tiny negative inputs
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    t
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        let finite = [cx, cy, w, h, theta].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox(format!(
                "({cx}, {cy}, {w}, {h}, {theta})"
            )));
        }
        Ok(OrientedBox {
            cx,
            cy,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn axis_aligned(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx, cy, w, h, 0.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Same footprint with `w ≥ h` (swaps sides and rotates by π/2 when needed).
    pub fn long_edge(&self) -> Self {
        if self.h > self.w {
            OrientedBox {
                w: self.h,
                h: self.w,
                theta: canonical_angle(self.theta + FRAC_PI_2),
                ..*self
            }
        } else {
            *self
        }
    }

    /// Corners `c + R(θ)(±w/2, ±h/2)` counter-clockwise from `(−w/2, −h/2)`.
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(x, y)| Point::new(self.cx + c * x - s * y, self.cy + s * x + c * y))
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon::new(self.corners().to_vec())
    }

    /// Boundary-inclusive point test in the box frame.
    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Axis-aligned extent `(x_min, y_min, x_max, y_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = (c.abs() * self.w + s.abs() * self.h) / 2.0;
        let ey = (s.abs() * self.w + c.abs() * self.h) / 2.0;
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }

    /// Rigid motion: rotate by `angle` about `pivot`, then translate.
    pub fn transformed(&self, angle: f64, pivot: Point, dx: f64, dy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (px, py) = (self.cx - pivot.x, self.cy - pivot.y);
        OrientedBox {
            cx: pivot.x + c * px - s * py + dx,
            cy: pivot.y + s * px + c * py + dy,
            w: self.w,
            h: self.h,
            theta: canonical_angle(self.theta + angle),
        }
    }
}

pub fn obb_to_corners(b: &OrientedBox) -> Polygon {
    b.to_polygon()
}

pub fn point_in_obb(p: Point, b: &OrientedBox) -> bool {
    b.contains(p)
}

impl fmt::Display for OrientedBox {
    /// `cx cy w h theta`, six decimals each.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            self.cx, self.cy, self.w, self.h, self.theta
        )
    }
}

impl std::str::FromStr for OrientedBox {
    type Err = GeometryError;

    /// Parses `cx,cy,w,h,theta` (commas or whitespace).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GeometryError::InvalidBox(format!("bad number `{t}` in `{s}`")))
            })
            .collect::<Result<_, _>>()?;
        match vals.as_slice() {
            [cx, cy, w, h, t] => OrientedBox::new(*cx, *cy, *w, *h, *t),
            _ => Err(GeometryError::InvalidBox(format!(
                "expected 5 values cx,cy,w,h,theta, got {} in `{s}`",
                vals.len()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    fn close(a: Point, x: f64, y: f64) -> bool {
        (a.x - x).abs() < 1e-12 && (a.y - y).abs() < 1e-12
    }

    #[test]
    fn axis_aligned_corners() {
        let b = OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0).unwrap();
        let c = b.corners();
        assert!(close(c[0], -1.0, -0.5));
        assert!(close(c[1], 1.0, -0.5));
        assert!(close(c[2], 1.0, 0.5));
        assert!(close(c[3], -1.0, 0.5));
        assert!(b.to_polygon().signed_area() > 0.0);
    }

    #[test]
    fn diamond_corners() {
        let b = OrientedBox::new(0.0, 0.0, SQRT_2, SQRT_2, FRAC_PI_4).unwrap();
        let c = b.corners();
        assert!(close(c[0], 0.0, -1.0));
        assert!(close(c[1], 1.0, 0.0));
        assert!(close(c[2], 0.0, 1.0));
        assert!(close(c[3], -1.0, 0.0));
    }

    #[test]
    fn quarter_turn_matches_swapped_footprint() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 1.0, FRAC_PI_2).unwrap();
        assert!((a.theta + FRAC_PI_2).abs() < 1e-15);
        let b = OrientedBox::new(0.0, 0.0, 1.0, 2.0, 0.0).unwrap();
        let mut ca: Vec<(i64, i64)> = a
            .corners()
            .iter()
            .map(|p| ((p.x * 1e9).round() as i64, (p.y * 1e9).round() as i64))
            .collect();
        let mut cb: Vec<(i64, i64)> = b
            .corners()
            .iter()
            .map(|p| ((p.x * 1e9).round() as i64, (p.y * 1e9).round() as i64))
            .collect();
        ca.sort();
        cb.sort();
        assert_eq!(ca, cb);
    }

    #[test]
    fn canonical_range() {
        for t in [-10.0, -PI, -FRAC_PI_2, -1e-18, 0.0, 1.0, FRAC_PI_2, PI, 7.5] {
            let c = canonical_angle(t);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&c), "{t} -> {c}");
            assert!(((c - t) / PI - ((c - t) / PI).round()).abs() < 1e-12);
        }
    }

    #[test]
    fn containment() {
        let b = OrientedBox::new(3.0, 4.0, 2.0, 1.0, 0.4).unwrap();
        assert!(b.contains(b.center()));
        assert!(!b.contains(Point::new(3.0 + 20.0, 4.0)));
        let axis = OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0).unwrap();
        for c in axis.corners() {
            assert!(axis.contains(c));
        }
    }

    #[test]
    fn parse_and_display() {
        let b: OrientedBox = "1,2,3,4,0.5".parse().unwrap();
        assert_eq!(
            b.to_string(),
            "1.000000 2.000000 3.000000 4.000000 0.500000"
        );
        assert!("1,2,3".parse::<OrientedBox>().is_err());
        assert!("1,2,0,4,0".parse::<OrientedBox>().is_err());
    }

    #[test]
    fn long_edge_keeps_footprint() {
        let b = OrientedBox::new(0.0, 0.0, 1.0, 3.0, 0.3).unwrap();
        let l = b.long_edge();
        assert!(l.w >= l.h);
        for c in b.corners() {
            assert!(l.contains(Point::new(c.x * 0.999, c.y * 0.999)));
        }
    }
}
