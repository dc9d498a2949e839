//! Polygons, shrink offsets and rasterization.

mod offset;
mod polygon;
mod raster;

pub use offset::{shrink_offset, shrink_polygon, shrink_polygon_with_limit, DEFAULT_MITER_LIMIT};
pub use polygon::{signed_area, InstancePolygon, Point, Polygon, PolygonSet};
pub use raster::{
    fill_polygon, label_components, mask_to_polygons, rasterize, rasterize_polygon, Connectivity,
    RasterMask,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has non-finite coordinates")]
    NonFinite,
    #[error("degenerate polygon (zero area or perimeter)")]
    Degenerate,
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("shrink ratio must lie in (0, 1], got {0}")]
    BadShrinkRatio(f64),
    #[error("offset must be a finite non-negative distance, got {0}")]
    BadOffset(f64),
    #[error("instance ids must be dense 1..=N")]
    BadInstanceIds,
    #[error("canvas dimensions must be positive")]
    EmptyCanvas,
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },
}
