//! Annotation parsing, synthetic scenes, run configuration and metrics.

pub mod config;
pub mod dota;
pub mod metrics;
pub mod synth;

pub use config::RunConfig;
pub use dota::{
    class_index, format_dota, parse_detections, parse_dota, Annotation, DotaObject, DOTA_V1_0,
    DOTA_V1_5,
};
pub use metrics::MetricsWriter;
pub use synth::{gen_synthetic, SceneSpec, SyntheticScene, GENERATOR_VERSION};
