//! File formats, experiment orchestration and the `res` command line for
//! [`res_core`].
//!
//! - [`checkpoint`]: binary parameter files.
//! - [`dataset_io`]: dataset directories of PNGs plus `labels.csv`.
//! - [`heatmap`]: input | annotation | saliency panel PNGs.
//! - [`config`]: `key = value` settings files.
//! - [`experiment`]: sweep runner and its CSV and text outputs.
//! - [`cli`]: argument parsing and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod raster;

pub use error::{Error, Result};
