//! Synthetic scenes, datasets and file formats.

mod checkpoint;
mod io;
mod ply;
mod synth;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use io::{
    camera_row, load_dataset, load_png, parse_camera_row, read_raw_image, save_dataset, save_png, write_raw_image,
    CAMERAS_HEADER,
};
pub use ply::{load_ply, property_names, read_ply, save_ply, write_ply, PLY_PROPERTY_COUNT};
pub use synth::{
    duplicate_with_jitter, look_at, make_synthetic_cloud, orbit_cameras, redundancy_benchmark, render_dataset,
    scene_extent, BenchmarkSpec, Dataset, OrbitSpec, SceneSpec, View,
};
