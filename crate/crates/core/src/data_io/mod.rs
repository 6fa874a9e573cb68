//! Scene persistence, annotation files, and the synthetic scene generator.

mod dataset;
mod generator;
mod ppm;
mod scene;

pub use dataset::{
    format_manifest, load_manifest, load_split, parse_manifest, write_dataset, DatasetSpec, ManifestEntry, Split, MANIFEST_FILE,
};
pub use generator::{generate_scene, Layout, SceneSpec};
pub use ppm::Image;
pub use scene::{
    format_points, load_scene, parse_points, save_scene, Scene, DENSITY_FILE, DETECTIONS_FILE, IMAGE_FILE, POINTS_FILE,
};
