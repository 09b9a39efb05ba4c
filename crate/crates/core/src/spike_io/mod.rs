//! Spike recordings: the `.spkt` container, corpus directories, synthetic
//! generators and train/test splitting.

mod container;
mod record;
mod split;
mod synth;

use std::fs;
use std::path::Path;

pub use container::{decode, encode, read_container, write_container, MAGIC, VERSION};
pub use record::{Label, MetadataRecord, SpikeRecording};
pub use split::{split, split_indices, SplitMode, SplitSpec};
pub use synth::{gen_center_out, gen_kinematics, CenterOutParams, KinematicsParams};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

/// Writes one `.spkt` file per trial plus a manifest listing them in order.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[SpikeRecording]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, rec) in corpus.iter().enumerate() {
        let name = format!("trial_{i:05}.spkt");
        write_container(rec, dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads the trials named by a corpus manifest, in manifest order.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<SpikeRecording>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| {
            if name.contains('/') || name.contains('\\') {
                return Err(Error::Format(format!("manifest entry {name} is not a plain filename")));
            }
            read_container(dir.join(name))
        })
        .collect()
}
