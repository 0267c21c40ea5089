use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub held_out: Vec<String>,
    pub training: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Patient-wise k-fold split. Patients are shuffled with `seed` and dealt
/// round-robin, so fold sizes differ by at most one; with `k` equal to the
/// patient count this is leave-one-patient-out.
pub fn make_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    if unique.len() != patient_ids.len() {
        return Err(Error::Validation("patient ids must be unique".into()));
    }
    if k == 0 || k > patient_ids.len() {
        return Err(Error::Validation(format!(
            "cannot make {k} folds from {} patients",
            patient_ids.len()
        )));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, p) in order.into_iter().enumerate() {
        held[i % k].push(p);
    }
    let folds = held
        .into_iter()
        .map(|mut held_out| {
            held_out.sort();
            let training = patient_ids
                .iter()
                .filter(|p| !held_out.contains(p))
                .cloned()
                .collect();
            Fold { held_out, training }
        })
        .collect();
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    #[test]
    fn leave_one_patient_out() {
        let split = make_folds(&ids(10), 10, 3).unwrap();
        assert_eq!(split.folds.len(), 10);
        assert!(split.folds.iter().all(|f| f.held_out.len() == 1 && f.training.len() == 9));
    }

    #[test]
    fn deterministic_and_bounded() {
        assert_eq!(make_folds(&ids(4), 4, 9).unwrap(), make_folds(&ids(4), 4, 9).unwrap());
        assert!(make_folds(&ids(3), 5, 0).is_err());
        assert!(make_folds(&ids(3), 0, 0).is_err());
        assert!(make_folds(&["a".into(), "a".into()], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_patients(n in 1usize..20, k_frac in 0.0f64..1.0, seed: u64) {
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let all = ids(n);
            let split = make_folds(&all, k, seed).unwrap();
            let mut held: Vec<String> = split.folds.iter().flat_map(|f| f.held_out.clone()).collect();
            held.sort();
            prop_assert_eq!(&held, &all);
            for f in &split.folds {
                prop_assert!(!f.held_out.is_empty());
                prop_assert!(f.training.iter().all(|p| !f.held_out.contains(p)));
                prop_assert_eq!(f.training.len() + f.held_out.len(), n);
            }
        }
    }
}
