//! Evaluation and IO: standard depth metrics, 16-bit PNG depth storage, and
//! seeded synthetic scenes for training and regression tests.

pub mod depth_image;
pub mod metrics;
pub mod scene;

pub use depth_image::{read_depth_png, write_depth_png};
pub use metrics::{compute_metrics, mean_metrics, DepthMetrics, CSV_HEADER, DELTA_BASE};
pub use scene::{generate_dataset, generate_scene, Scene, SceneConfig};
