#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Ordered vertex ring; counter-clockwise when produced by this crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Polygon { vertices }
    }

    /// Shoelace area, positive for counter-clockwise rings.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            acc += v[i].cross(v[j]);
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Sutherland–Hodgman: the part of `self` inside the convex CCW `clip`.
    pub fn clip_convex(&self, clip: &Polygon) -> Polygon {
        let mut out = self.vertices.clone();
        let c = &clip.vertices;
        for i in 0..c.len() {
            if out.is_empty() {
                break;
            }
            let (a, b) = (c[i], c[(i + 1) % c.len()]);
            let edge = b.sub(a);
            let side = |p: Point| edge.cross(p.sub(a));
            let input = std::mem::take(&mut out);
            for j in 0..input.len() {
                let cur = input[j];
                let prev = input[(j + input.len() - 1) % input.len()];
                let (sc, sp) = (side(cur), side(prev));
                if sc >= 0.0 {
                    if sp < 0.0 {
                        out.push(intersect(prev, cur, sp, sc));
                    }
                    out.push(cur);
                } else if sp >= 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
            }
        }
        Polygon::new(out)
    }
}

/// Point where segment `p→q` crosses the clip line, given signed sides.
fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of `a ∩ b` for convex polygons; zero-area overlaps count as 0.
pub fn polygon_intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    let a = oriented_ccw(a);
    let b = oriented_ccw(b);
    let area = a.clip_convex(&b).area();
    if area > 0.0 {
        area
    } else {
        0.0
    }
}

fn oriented_ccw(p: &Polygon) -> Polygon {
    if p.signed_area() < 0.0 {
        let mut v = p.vertices.clone();
        v.reverse();
        Polygon::new(v)
    } else {
        p.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x0 + s, y0),
            Point::new(x0 + s, y0 + s),
            Point::new(x0, y0 + s),
        ])
    }

    #[test]
    fn identical_and_disjoint() {
        let a = square(0.0, 0.0, 1.0);
        assert!((polygon_intersection_area(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(polygon_intersection_area(&a, &square(3.0, 3.0, 1.0)), 0.0);
    }

    #[test]
    fn touching_edges_and_corners_are_zero() {
        let a = square(0.0, 0.0, 1.0);
        assert_eq!(polygon_intersection_area(&a, &square(1.0, 0.0, 1.0)), 0.0);
        assert_eq!(polygon_intersection_area(&a, &square(1.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn square_and_rotated_square() {
        // Unit square centred at origin vs. the same square turned 45°: the
        // octagon is the square minus four corner triangles with legs 1 − 1/√2.
        let h = 0.5;
        let a = Polygon::new(vec![
            Point::new(-h, -h),
            Point::new(h, -h),
            Point::new(h, h),
            Point::new(-h, h),
        ]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let b = Polygon::new(vec![
            Point::new(0.0, -r),
            Point::new(r, 0.0),
            Point::new(0.0, r),
            Point::new(-r, 0.0),
        ]);
        let leg = 0.5 - (r - 0.5); // = 1 − 1/√2
        let expected = 1.0 - 2.0 * leg * leg;
        assert!((expected - 2.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((polygon_intersection_area(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn clockwise_inputs_are_reoriented() {
        let mut a = square(0.0, 0.0, 2.0);
        a.vertices.reverse();
        let b = square(1.0, 1.0, 2.0);
        assert!((polygon_intersection_area(&a, &b) - 1.0).abs() < 1e-12);
    }
}
