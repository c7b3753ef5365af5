//! Manifests, image loading, split construction and the procedural toy corpus.

mod image;
mod manifest;
mod split;
pub mod toy;

use std::path::PathBuf;

use rayon::prelude::*;

pub(crate) use self::image::image_error;
pub use self::image::{load_image, resize_bilinear, ImageTensor};
pub use manifest::{parse_manifest, Manifest, ManifestEntry, SplitKind, MANIFEST_SCHEMA_VERSION};
pub use split::{build_splits, DatasetSplit, SplitConfig, SplitMeta, TestItem};
pub use toy::{generate_toy_corpus, MANIFEST_FILE};

use crate::error::Result;

/// Load many images concurrently, preserving order.
pub fn load_images(paths: &[PathBuf], side: usize) -> Result<Vec<ImageTensor>> {
    paths.par_iter().map(|p| load_image(p, side)).collect()
}
