use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MultimodalDataset, Split};
use crate::error::{Error, Result};

/// An m-way k-shot task. Labels are positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub classes: Vec<u32>,
    pub shots: usize,
    /// Sample indices drawn from the train split, grouped by class.
    pub support: Vec<usize>,
    /// Every test-split sample of the episode's classes.
    pub query: Vec<usize>,
    pub seed: u64,
}

impl FewShotEpisode {
    pub fn label_of(&self, ds: &MultimodalDataset, sample: usize) -> usize {
        let id = ds.samples[sample].class_id;
        self.classes
            .iter()
            .position(|&c| c == id)
            .expect("episode class")
    }

    pub fn labels(&self, ds: &MultimodalDataset, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label_of(ds, i)).collect()
    }

    pub fn class_names(&self, ds: &MultimodalDataset) -> Vec<String> {
        self.classes
            .iter()
            .map(|&id| {
                ds.classes[ds.class_index(id).expect("known class")]
                    .name
                    .clone()
            })
            .collect()
    }
}

/// Samples `k` train examples per class without replacement. With `m` equal
/// to the class count every class takes part; otherwise `m` classes are
/// drawn uniformly and kept in id order.
pub fn sample_episode(
    ds: &MultimodalDataset,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<FewShotEpisode> {
    if m == 0 || m > ds.classes.len() {
        return Err(Error::Config(format!(
            "{}-way episode from {} classes",
            m,
            ds.classes.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("episodes need at least one shot".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<u32> = if m == ds.classes.len() {
        ds.classes.iter().map(|c| c.id).collect()
    } else {
        let all: Vec<u32> = ds.classes.iter().map(|c| c.id).collect();
        all.choose_multiple(&mut rng, m).copied().collect()
    };
    classes.sort_unstable();

    let mut support = Vec::with_capacity(m * k);
    for &c in &classes {
        let mut pool = ds.class_indices(c, Split::Train);
        if pool.len() < k {
            return Err(Error::InsufficientSamples(format!(
                "{}: class {c} has {} train samples, {k} shots requested",
                ds.name,
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        support.extend(chosen);
    }
    let wanted: BTreeSet<u32> = classes.iter().copied().collect();
    let query = (0..ds.samples.len())
        .filter(|&i| ds.samples[i].split == Split::Test && wanted.contains(&ds.samples[i].class_id))
        .collect();
    Ok(FewShotEpisode {
        classes,
        shots: k,
        support,
        query,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GeneratorConfig};

    fn ds() -> MultimodalDataset {
        generate(&GeneratorConfig {
            n_classes: 5,
            train_per_class: 6,
            test_per_class: 2,
            branching: vec![],
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn support_size_is_m_times_k() {
        let e = sample_episode(&ds(), 3, 2, 0).unwrap();
        assert_eq!(e.support.len(), 6);
        assert_eq!(e.classes.len(), 3);
        assert_eq!(e.query.len(), 6);
    }

    #[test]
    fn support_is_train_only_and_disjoint_from_query() {
        let d = ds();
        for seed in 0..10 {
            let e = sample_episode(&d, 5, 4, seed).unwrap();
            let s: BTreeSet<_> = e.support.iter().collect();
            assert_eq!(s.len(), e.support.len());
            assert!(e.query.iter().all(|q| !s.contains(q)));
            assert!(e
                .support
                .iter()
                .all(|&i| d.samples[i].split == Split::Train));
        }
    }

    #[test]
    fn single_train_sample_is_forced() {
        let d = generate(&GeneratorConfig {
            n_classes: 2,
            train_per_class: 1,
            test_per_class: 1,
            branching: vec![],
            ..GeneratorConfig::default()
        })
        .unwrap();
        let e = sample_episode(&d, 2, 1, 5).unwrap();
        assert_eq!(e.support, d.indices(Split::Train));
    }

    #[test]
    fn insufficient_samples_is_an_error() {
        assert!(matches!(
            sample_episode(&ds(), 5, 7, 0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn distinct_seeds_give_distinct_supports() {
        let d = generate(&GeneratorConfig {
            n_classes: 5,
            train_per_class: 20,
            test_per_class: 2,
            branching: vec![],
            ..GeneratorConfig::default()
        })
        .unwrap();
        let supports: BTreeSet<Vec<usize>> = (0..20)
            .map(|s| sample_episode(&d, 5, 2, s).unwrap().support)
            .collect();
        assert_eq!(supports.len(), 20);
        assert_eq!(
            sample_episode(&d, 5, 2, 3).unwrap(),
            sample_episode(&d, 5, 2, 3).unwrap()
        );
    }
}
