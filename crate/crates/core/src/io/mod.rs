//! File formats, the toy extractor and run configuration.

mod bin;
pub mod config;
pub mod fmap;
pub mod index_store;
pub mod model;
pub mod pgm;
pub mod toy;

pub use config::{default_landmark_count, RunConfig};
pub use fmap::{read_feature_map, write_feature_map};
pub use index_store::{load_index, save_index};
pub use model::{read_model, write_model};
pub use pgm::{dump_activation_map, read_pgm, write_pgm, GrayImage};
pub use toy::toy_extract;
