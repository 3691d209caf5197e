//! Slow reference computations used to verify the exact routines.
//!
//! None of these share code with polygon clipping or rotating calipers; they
//! rely only on the point-in-box test and brute-force enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fit::enclosing_rect_at;
use crate::obb::OrientedBox;
use crate::polygon::Point;
use crate::raster::{GridSpec, Mask};

/// IoU estimated from `samples` uniform points over the joint bounding box.
pub fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
    let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = Point::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let (ia, ib) = (a.contains(p), b.contains(p));
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Smallest enclosing-rectangle area over orientations `k·step`, `k·step < π/2`.
pub fn sweep_min_area(points: &[Point], step: f64) -> f64 {
    let n = (std::f64::consts::FRAC_PI_2 / step).ceil() as usize;
    (0..=n)
        .map(|k| enclosing_rect_at(points, k as f64 * step).0)
        .fold(f64::INFINITY, f64::min)
}

/// Per-cell point test, no bounding-box pruning.
pub fn brute_force_raster(boxes: &[OrientedBox], grid: &GridSpec) -> Mask {
    let mut m = Mask::zeros(grid.height, grid.width);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let p = grid.cell_center(r, c);
            if boxes.iter().any(|b| b.contains(p)) {
                m.data[r * grid.width + c] = 1;
            }
        }
    }
    m
}

/// Convex quadrilateral: four sorted angles on a random ellipse, then rotated.
pub fn random_convex_quad(rng: &mut impl Rng) -> [Point; 4] {
    let mut angles: Vec<f64> = (0..4)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let (ra, rb) = (rng.gen_range(2.0..20.0), rng.gen_range(2.0..20.0));
    let rot: f64 = rng.gen_range(-3.0..3.0);
    let (cx, cy) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let (s, c) = rot.sin_cos();
    let mut q = [Point::new(0.0, 0.0); 4];
    for (i, t) in angles.iter().enumerate() {
        let (x, y) = (ra * t.cos(), rb * t.sin());
        q[i] = Point::new(cx + c * x - s * y, cy + s * x + c * y);
    }
    q
}

/// A box and a perturbed neighbour that usually overlaps it.
pub fn random_box_pair(rng: &mut impl Rng) -> (OrientedBox, OrientedBox) {
    let a = OrientedBox::new(
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(2.0..12.0),
        rng.gen_range(2.0..12.0),
        rng.gen_range(-1.6..1.6),
    )
    .expect("valid box");
    let b = OrientedBox::new(
        a.cx + rng.gen_range(-5.0..5.0),
        a.cy + rng.gen_range(-5.0..5.0),
        rng.gen_range(2.0..12.0),
        rng.gen_range(2.0..12.0),
        rng.gen_range(-1.6..1.6),
    )
    .expect("valid box");
    (a, b)
}
