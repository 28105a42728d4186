//! Files: run configuration, checkpoints, PNG images and raw tensors.

pub mod checkpoint;
pub mod config;
pub mod images;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use images::{load_dataset, load_mask, load_tensor, save_grid, save_mask, save_png, save_tensor};
