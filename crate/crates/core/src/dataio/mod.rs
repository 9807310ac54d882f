//! File formats, analytic ground-truth scenes and manifest filtering.

mod manifest;
mod obj;
mod raster_io;
mod scene;

pub use manifest::{
    filter_manifest, is_low_quality_tag, normalize_tag, read_manifest, reject_reason, FilterResult, ManifestEntry,
    RejectReason, Rejected, LOW_QUALITY_TAGS, MIN_VIEW_COVERAGE,
};
pub use obj::{obj_string, parse_obj, read_obj, write_obj};
pub use raster_io::{
    read_pfm, read_poses, read_ppm, read_view, read_views_dir, view_stem, write_pfm, write_ppm, write_view,
    write_views_dir, FloatMap, CAMERAS_FILE,
};
pub use scene::{render_gt, Primitive, SceneSpec, Shape, DEFAULT_ALBEDO, TRACE_EPS, TRACE_MAX_STEPS};
