//! Exact rotated-rectangle geometry.
//!
//! Angle convention: `theta` rotates the `w` side counter-clockwise from +x
//! and lives in `[−π/2, π/2)`. Containment is boundary-inclusive, and masks
//! are rasterized by sampling cell centres.

mod fit;
mod iou;
mod obb;
pub mod oracle;
mod polygon;
mod raster;

pub use fit::{convex_hull, enclosing_rect_at, quad_to_obb};
pub use iou::{intersection_area, rotated_iou};
pub use obb::{canonical_angle, obb_to_corners, point_in_obb, OrientedBox};
pub use polygon::{polygon_intersection_area, Point, Polygon};
pub use raster::{pgm_from_values, rasterize_obbs, GridSpec, Mask};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("invalid grid {0}")]
    InvalidGrid(String),
    #[error("degenerate quadrilateral: {0}")]
    Degenerate(String),
}
