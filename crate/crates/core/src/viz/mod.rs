//! ROI clustering, contour extraction and map rendering.

pub mod contour;
pub mod optics;
pub mod render;

pub use contour::{shoelace_area, trace_boundary, trace_cells};
pub use optics::{extract_clusters, largest_roi_cluster, optics_order, roi_points, ClusterParams, ReachabilityPlot};
pub use render::{render, RenderMode, RenderSpec};
