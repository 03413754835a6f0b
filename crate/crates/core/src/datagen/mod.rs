//! Synthetic multimodal datasets, their on-disk format, class taxonomy and
//! m-way k-shot episode sampling.

mod episode;
mod generate;
mod io;

pub use episode::{sample_episode, FewShotEpisode};
pub use generate::{generate, generate_suite, GeneratorConfig, SuiteConfig, SuiteDataset};
pub use io::{load_dataset, save_dataset, MAGIC as DATASET_MAGIC};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    /// Node ids from the taxonomy root down to this class's leaf.
    pub taxonomy_path: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class_id: u32,
    pub split: Split,
    /// `n_tokens × dim` token grid.
    pub tokens: Tensor,
}

/// Identifies one sample of one dataset; used by the gradient audits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub dataset: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub name: String,
    pub n_tokens: usize,
    pub dim: usize,
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<Sample>,
    /// Words used by this dataset's class names.
    pub vocab: Vec<String>,
}

impl MultimodalDataset {
    /// Checks the structural invariants: known class ids, both splits
    /// populated for every class, a single taxonomy root, token grid shapes.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Empty("dataset classes"));
        }
        let ids: BTreeSet<u32> = self.classes.iter().map(|c| c.id).collect();
        if ids.len() != self.classes.len() {
            return Err(Error::Config(format!("{}: duplicate class ids", self.name)));
        }
        let root = self.classes[0].taxonomy_path.first().copied();
        if root.is_none()
            || self
                .classes
                .iter()
                .any(|c| c.taxonomy_path.first().copied() != root)
        {
            return Err(Error::DisjointTaxonomies);
        }
        let mut seen: BTreeSet<(u32, Split)> = BTreeSet::new();
        for s in &self.samples {
            if !ids.contains(&s.class_id) {
                return Err(Error::Config(format!(
                    "{}: sample refers to unknown class {}",
                    self.name, s.class_id
                )));
            }
            if s.tokens.shape() != [self.n_tokens, self.dim] {
                return Err(Error::Shape {
                    op: "dataset",
                    detail: format!("token grid {:?}", s.tokens.shape()),
                });
            }
            seen.insert((s.class_id, s.split));
        }
        for c in &self.classes {
            for split in [Split::Train, Split::Test] {
                if !seen.contains(&(c.id, split)) {
                    return Err(Error::InsufficientSamples(format!(
                        "{}: class {} has no {split:?} samples",
                        self.name, c.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Position of a class id in `classes`.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn class_indices(&self, class_id: u32, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split && self.samples[i].class_id == class_id)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// A copy restricted to the given class ids (original ids kept).
    pub fn restrict(&self, class_ids: &[u32], name: &str) -> Result<Self> {
        let keep: BTreeSet<u32> = class_ids.iter().copied().collect();
        let classes: Vec<ClassInfo> = self
            .classes
            .iter()
            .filter(|c| keep.contains(&c.id))
            .cloned()
            .collect();
        if classes.len() != keep.len() {
            return Err(Error::Config(format!(
                "{}: unknown class in restriction",
                self.name
            )));
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(&s.class_id))
            .cloned()
            .collect();
        let vocab = vocab_of(&classes);
        Ok(Self {
            name: name.to_string(),
            n_tokens: self.n_tokens,
            dim: self.dim,
            classes,
            samples,
            vocab,
        })
    }
}

pub(crate) fn vocab_of(classes: &[ClassInfo]) -> Vec<String> {
    let words: BTreeSet<String> = classes
        .iter()
        .flat_map(|c| c.name.split_whitespace().map(str::to_string))
        .collect();
    words.into_iter().collect()
}

/// Number of edges between two leaves given their root-to-leaf paths.
pub fn leaf_path_length(a: &[u32], b: &[u32]) -> usize {
    let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    (a.len() - common) + (b.len() - common)
}

/// Mean shortest-path length in the taxonomy tree over all cross-dataset
/// class pairs.
pub fn taxonomy_distance(a: &MultimodalDataset, b: &MultimodalDataset) -> Result<f64> {
    let root = |d: &MultimodalDataset| {
        d.classes
            .first()
            .and_then(|c| c.taxonomy_path.first().copied())
    };
    let (ra, rb) = (root(a), root(b));
    if ra.is_none() || ra != rb {
        return Err(Error::DisjointTaxonomies);
    }
    let mut total = 0usize;
    for ca in &a.classes {
        for cb in &b.classes {
            if ca.taxonomy_path.first() != cb.taxonomy_path.first() {
                return Err(Error::DisjointTaxonomies);
            }
            total += leaf_path_length(&ca.taxonomy_path, &cb.taxonomy_path);
        }
    }
    Ok(total as f64 / (a.classes.len() * b.classes.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, VecDeque};

    fn dataset_with_paths(name: &str, paths: &[Vec<u32>]) -> MultimodalDataset {
        MultimodalDataset {
            name: name.into(),
            n_tokens: 1,
            dim: 1,
            classes: paths
                .iter()
                .enumerate()
                .map(|(i, p)| ClassInfo {
                    id: i as u32,
                    name: format!("{name}{i}"),
                    taxonomy_path: p.clone(),
                })
                .collect(),
            samples: vec![],
            vocab: vec![],
        }
    }

    /// Breadth-first search over the undirected tree implied by the paths.
    fn bfs_distance(paths: &[Vec<u32>], from: u32, to: u32) -> usize {
        let mut adj: HashMap<u32, Vec<u32>> = HashMap::new();
        for p in paths {
            for w in p.windows(2) {
                adj.entry(w[0]).or_default().push(w[1]);
                adj.entry(w[1]).or_default().push(w[0]);
            }
        }
        let mut dist: HashMap<u32, usize> = HashMap::from([(from, 0)]);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            if n == to {
                return dist[&n];
            }
            for &m in adj.get(&n).into_iter().flatten() {
                if !dist.contains_key(&m) {
                    dist.insert(m, dist[&n] + 1);
                    queue.push_back(m);
                }
            }
        }
        unreachable!("tree is connected")
    }

    #[test]
    fn single_class_self_distance_is_zero() {
        let d = dataset_with_paths("a", &[vec![0, 1, 3]]);
        assert_eq!(taxonomy_distance(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn sibling_leaves_are_two_apart() {
        let a = dataset_with_paths("a", &[vec![0, 1, 3]]);
        let b = dataset_with_paths("b", &[vec![0, 1, 4]]);
        assert_eq!(taxonomy_distance(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn disjoint_roots_are_rejected() {
        let a = dataset_with_paths("a", &[vec![0, 1]]);
        let b = dataset_with_paths("b", &[vec![9, 1]]);
        assert!(matches!(
            taxonomy_distance(&a, &b),
            Err(Error::DisjointTaxonomies)
        ));
    }

    #[test]
    fn random_class_sets_match_bfs_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // Complete ternary tree of depth 3 with node ids assigned level by level.
        let mut leaves = Vec::new();
        for a in 0..3u32 {
            for b in 0..3u32 {
                for c in 0..3u32 {
                    leaves.push(vec![0, 1 + a, 4 + a * 3 + b, 13 + (a * 3 + b) * 3 + c]);
                }
            }
        }
        for _ in 0..10 {
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<u32>> {
                (0..3)
                    .map(|_| leaves[rng.random_range(0..leaves.len())].clone())
                    .collect()
            };
            let (pa, pb) = (pick(&mut rng), pick(&mut rng));
            let a = dataset_with_paths("a", &pa);
            let b = dataset_with_paths("b", &pb);
            let mut expected = 0.0;
            for x in &pa {
                for y in &pb {
                    expected +=
                        bfs_distance(&leaves, *x.last().unwrap(), *y.last().unwrap()) as f64;
                }
            }
            expected /= 9.0;
            let got = taxonomy_distance(&a, &b).unwrap();
            assert!((got - expected).abs() < 1e-12);
            assert_eq!(got, taxonomy_distance(&b, &a).unwrap());
        }
    }
}
