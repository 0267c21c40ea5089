//! Dataset ingestion, patient-wise folds, synthetic phantoms and batching.

mod batches;
mod folds;
mod manifest;
mod phantom;
mod volume;

pub use batches::{Batch, FrameId, FrameSample, TrainingSet};
pub use folds::{make_folds, Fold, FoldSplit};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry};
pub use phantom::{synth_phantom, synth_ring, synth_volume, PhantomKind, RingPhantom};
pub use volume::{
    crop_to_original, load_volume, pad_to_multiple, read_usvl, write_usvl, PadInfo, RawVolume, VolumeRecord,
    USVL_MAGIC,
};

/// Mixes a base seed with a path of indices (splitmix64 finaliser).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    for &p in path {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd6e8_feb8_6659_fd93));
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
