use crate::obb::OrientedBox;
use crate::polygon::Point;
use crate::GeometryError;

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(a)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Bounding rectangle of `hull` aligned with direction `angle`: `(area, box)`.
pub fn enclosing_rect_at(hull: &[Point], angle: f64) -> (f64, OrientedBox) {
    let (s, c) = angle.sin_cos();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in hull {
        let u = c * p.x + s * p.y;
        let v = -s * p.x + c * p.y;
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let (um, vm) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
    let (w, h) = (u1 - u0, v1 - v0);
    let b = OrientedBox {
        cx: c * um - s * vm,
        cy: s * um + c * vm,
        w,
        h,
        theta: crate::obb::canonical_angle(angle),
    };
    (w * h, b)
}

/// Minimum-area rectangle enclosing a quadrilateral, in long-edge form (`w ≥ h`).
///
/// The optimum has one side flush with a hull edge, so only hull-edge
/// directions are tried.
pub fn quad_to_obb(quad: &[Point; 4]) -> Result<OrientedBox, GeometryError> {
    if quad.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::Degenerate("non-finite vertex".into()));
    }
    let hull = convex_hull(quad);
    let scale = quad
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0, f64::max);
    if hull.len() < 3 {
        return Err(GeometryError::Degenerate(format!("{quad:?} has no area")));
    }
    let mut best: Option<(f64, OrientedBox)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()].sub(hull[i]);
        let (area, b) = enclosing_rect_at(&hull, e.y.atan2(e.x));
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            best = Some((area, b));
        }
    }
    let (area, b) = best.expect("hull has edges");
    if area <= 1e-12 * scale * scale || b.w <= 0.0 || b.h <= 0.0 {
        return Err(GeometryError::Degenerate(format!("{quad:?} is collinear")));
    }
    Ok(b.long_edge())
}
