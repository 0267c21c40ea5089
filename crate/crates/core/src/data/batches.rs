use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use super::volume::VolumeRecord;
use crate::error::{Error, Result};
use crate::loss::weight_map_batch;
use crate::tensor::Tensor;

/// Provenance of one training frame.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId {
    pub patient: String,
    pub frame: usize,
}

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.patient, self.frame)
    }
}

/// A frame with its target and precomputed loss weights, each `(1,1,H,W)`.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub id: FrameId,
    pub image: Tensor,
    pub mask: Tensor,
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Tensor,
    pub masks: Tensor,
    pub weights: Tensor,
    pub ids: Vec<FrameId>,
}

/// Frames of a set of volumes for one target structure, with weight maps
/// computed once at construction.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    samples: Vec<FrameSample>,
}

impl TrainingSet {
    pub fn new(records: &[VolumeRecord], structure: &str, w0: f64, sigma: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for rec in records {
            let masks = rec.mask(structure)?;
            let weights = weight_map_batch(masks, w0, sigma)?;
            for f in 0..rec.n_frames() {
                samples.push(FrameSample {
                    id: FrameId { patient: rec.patient_id.clone(), frame: f },
                    image: rec.frames.slice_batch(f..f + 1)?,
                    mask: masks.slice_batch(f..f + 1)?,
                    weights: weights.slice_batch(f..f + 1)?,
                });
            }
        }
        Ok(TrainingSet { samples })
    }

    pub fn samples(&self) -> &[FrameSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batches for one epoch drawn only from `patients`. The order is a
    /// shuffle seeded by `(seed, epoch)`; the final batch may be short.
    pub fn epoch_batches<'a>(
        &'a self,
        patients: &BTreeSet<String>,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.samples.len())
            .filter(|&i| patients.contains(&self.samples[i].id.patient))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch])));
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks.into_iter().map(move |idx| self.collate(&idx)))
    }

    fn collate(&self, idx: &[usize]) -> Result<Batch> {
        let pick = |f: fn(&FrameSample) -> &Tensor| {
            Tensor::stack_batch(&idx.iter().map(|&i| f(&self.samples[i]).clone()).collect::<Vec<_>>())
        };
        Ok(Batch {
            frames: pick(|s| &s.image)?,
            masks: pick(|s| &s.mask)?,
            weights: pick(|s| &s.weights)?,
            ids: idx.iter().map(|&i| self.samples[i].id.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{synth_volume, PhantomKind};

    fn records() -> Vec<VolumeRecord> {
        (0..3)
            .map(|p| synth_volume(p, (32, 32), PhantomKind::Blob, 10, &format!("p{p}")).unwrap())
            .collect()
    }

    fn patients(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn batch_sizes_and_partial_tail() {
        let set = TrainingSet::new(&records(), "thyroid", 10.0, 5.0).unwrap();
        let sizes: Vec<usize> = set
            .epoch_batches(&patients(&["p0", "p1", "p2"]), 14, 1, 0)
            .unwrap()
            .map(|b| b.unwrap().ids.len())
            .collect();
        assert_eq!(sizes, [14, 14, 2]);
    }

    #[test]
    fn held_out_patients_never_appear() {
        let set = TrainingSet::new(&records(), "thyroid", 10.0, 5.0).unwrap();
        let train = patients(&["p0", "p2"]);
        let seen: Vec<FrameId> = set
            .epoch_batches(&train, 4, 1, 0)
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        assert_eq!(seen.len(), 20);
        assert!(seen.iter().all(|id| id.patient != "p1"));
    }

    #[test]
    fn shuffle_depends_on_epoch_only_through_seed() {
        let set = TrainingSet::new(&records(), "thyroid", 10.0, 5.0).unwrap();
        let all = patients(&["p0", "p1", "p2"]);
        let order = |epoch| -> Vec<FrameId> {
            set.epoch_batches(&all, 5, 42, epoch).unwrap().flat_map(|b| b.unwrap().ids).collect()
        };
        assert_ne!(order(0), order(1));
        assert_eq!(order(0), order(0));
    }

    #[test]
    fn weights_match_masks() {
        let set = TrainingSet::new(&records(), "thyroid", 10.0, 5.0).unwrap();
        let s = &set.samples()[3];
        let expected = weight_map_batch(&s.mask, 10.0, 5.0).unwrap();
        assert!(s.weights.bit_eq(&expected));
        assert!(TrainingSet::new(&records(), "lumen", 10.0, 5.0).is_err());
    }
}
