use crate::obb::OrientedBox;
use crate::polygon::polygon_intersection_area;

/// Intersection area of two oriented boxes.
pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Cheap reject on the circumscribed circles.
    let d2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    let r = (a.w.hypot(a.h) + b.w.hypot(b.h)) / 2.0;
    if d2 > r * r {
        return 0.0;
    }
    polygon_intersection_area(&a.to_polygon(), &b.to_polygon())
}

/// Rotated IoU in `[0, 1]`.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
