//! Feature cuboid storage, dataset manifests and synthetic datasets.

mod cuboid;
mod manifest;
mod synthetic;

use std::path::{Path, PathBuf};

pub use cuboid::{
    decode_cuboid, encode_cuboid, read_cuboid, write_cuboid, Dims, FeatureCuboid, FCUB_HEADER_LEN,
    FCUB_MAGIC, FCUB_VERSION,
};
pub use manifest::{
    load_manifest, parse_manifest, resolve_path, write_manifest, DatasetManifest, ManifestEntry,
    Split, VideoLabel,
};
pub use synthetic::{
    generate_synthetic, PlantedTruth, PlantedVideo, SyntheticOutput, SyntheticSpec, FEATURES_DIR,
    MANIFEST_FILE, PLANTED_FILE,
};
pub(crate) use synthetic::write_atomic_if_changed;

use crate::error::Result;

/// Source of cuboids for manifest entries.
pub trait FeatureLoader {
    fn load(&self, entry: &ManifestEntry) -> Result<FeatureCuboid>;
}

/// Reads `.fcub` files, resolving relative manifest paths against `base`.
#[derive(Debug, Clone)]
pub struct FileLoader {
    base: PathBuf,
}

impl FileLoader {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        FileLoader { base: base.into() }
    }

    /// Resolves relative to the directory holding the manifest.
    pub fn for_manifest(manifest_path: &Path) -> Self {
        let base = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        FileLoader { base }
    }
}

impl FeatureLoader for FileLoader {
    fn load(&self, entry: &ManifestEntry) -> Result<FeatureCuboid> {
        let mut cuboid = read_cuboid(resolve_path(&self.base, &entry.cuboid_path))?;
        cuboid.video_id = entry.video_id.clone();
        cuboid.segment_index = entry.segment_index;
        Ok(cuboid)
    }
}
