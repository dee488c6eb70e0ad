//! Deterministic synthetic dataset: street scenes of static objects seen
//! as point sets, camera projections and short text hints.

pub mod camera;
pub mod io;
pub mod text;
pub mod types;
pub mod world;

pub use camera::{instance_uv_stats, project_point, Projection, UvStats};
pub use io::{read_dataset, write_dataset};
pub use text::{color_name, make_hint, region_label, strip_position, stub_embed, EmbedSpace};
pub use types::{CameraModel, Category, Instance3D, InstanceRecord, Intrinsics, SceneTriplet, Split, WorldConfig};
pub use world::generate_world;

/// Scenes of one split, in dataset order.
pub fn split_of(scenes: &[SceneTriplet], split: Split) -> Vec<SceneTriplet> {
    scenes.iter().filter(|s| s.split == split).cloned().collect()
}
