//! File formats: attention dumps, images and run configuration.

pub mod config;
pub mod dump;
pub mod render;

pub use config::RunConfig;
pub use dump::{read_dump, write_dump};
pub use render::render_heatmap;
