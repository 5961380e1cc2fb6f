//! Data ingestion: manifests, image decoding and the synthetic generator.

pub mod image_io;
pub mod manifest;
pub mod synth;

use log::warn;

pub use image_io::{decode_image, RawImage};
pub use manifest::{load_manifest, Manifest, Record, Split};
pub use synth::{generate_synthetic, ClassParams, SyntheticSpec};

/// Images decoded from a manifest. Decode failures are skipped with a
/// warning and counted; `indices` maps each image back to its record.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub indices: Vec<usize>,
    pub images: Vec<RawImage>,
    pub skipped: Vec<(usize, String)>,
}

pub fn decode_manifest(manifest: &Manifest) -> Decoded {
    let mut out = Decoded {
        indices: Vec::new(),
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, rec) in manifest.records.iter().enumerate() {
        match decode_image(&manifest.resolve(rec)) {
            Ok(img) => {
                out.indices.push(i);
                out.images.push(img);
            }
            Err(e) => {
                warn!("skipping {}: {e}", rec.path);
                out.skipped.push((i, e.to_string()));
            }
        }
    }
    out
}
