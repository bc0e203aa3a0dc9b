pub mod attrib;
mod binio;
pub mod cli;
pub mod cluster;
pub mod data;
pub mod encoder;
pub mod error;
pub mod num;
pub mod ridge;
pub mod svg;
pub mod synth;

pub use binio::sidecar_path;
pub use error::{Error, Result};
