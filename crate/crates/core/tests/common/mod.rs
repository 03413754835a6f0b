#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_lab::bench::BenchmarkConfig;
use unlearn_lab::datagen::{generate_suite, MultimodalDataset, SuiteConfig, SuiteDataset};
use unlearn_lab::fewshot::{AdapterConfig, Method};
use unlearn_lab::miniclip::{MiniClipModel, ModelConfig};
use unlearn_lab::numerics::Tensor;
use unlearn_lab::pretrain::{build_vocabulary, PretrainConfig, DEFAULT_TEMPLATES};
use unlearn_lab::unlearn::LevelLabel;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        embed_dim: 4,
        n_layers: 2,
        mlp_dim: 12,
        image_tokens: 4,
        max_text_tokens: 8,
        init_temperature: 1.0 / 0.07,
        init_seed: 5,
    }
}

fn dataset(
    name: &str,
    domain: usize,
    n_classes: usize,
    test_per_class: usize,
    branching: Vec<usize>,
) -> SuiteDataset {
    SuiteDataset {
        name: name.into(),
        domain,
        n_classes,
        train_per_class: 6,
        test_per_class,
        branching,
    }
}

/// Three small datasets in separate domains with 4×8 token grids.
pub fn tiny_suite() -> SuiteConfig {
    tiny_suite_with(4)
}

fn tiny_suite_with(test_per_class: usize) -> SuiteConfig {
    SuiteConfig {
        n_tokens: 4,
        dim: 8,
        proto_dim: 4,
        sigma_within: 0.2,
        sigma_between: 1.0,
        seed: 11,
        datasets: vec![
            dataset("forget", 0, 4, test_per_class, vec![2, 2]),
            dataset("keep", 1, 4, test_per_class, vec![2, 2]),
            dataset("heldout", 2, 6, test_per_class, vec![2, 3]),
        ],
    }
}

pub fn tiny_datasets() -> Vec<MultimodalDataset> {
    generate_suite(&tiny_suite()).unwrap()
}

/// An untrained tiny model whose vocabulary covers the tiny suite.
pub fn tiny_model(datasets: &[MultimodalDataset]) -> MiniClipModel {
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
    MiniClipModel::new(tiny_config(), build_vocabulary(datasets, &templates)).unwrap()
}

pub fn tiny_pretrain(steps: usize) -> PretrainConfig {
    PretrainConfig {
        model: tiny_config(),
        learning_rate: 3e-3,
        steps,
        ..PretrainConfig::default()
    }
}

/// A benchmark small enough to run several times per test. Five test
/// samples per class give the divergence split its 20 per dataset.
pub fn tiny_bench() -> BenchmarkConfig {
    BenchmarkConfig {
        suite: tiny_suite_with(5),
        pretrain: tiny_pretrain(150),
        forget: vec!["forget".into()],
        retain: BTreeMap::from([("forget".to_string(), vec!["keep".to_string()])]),
        validation: vec!["heldout".into()],
        shots: vec![0, 1, 2],
        seeds: vec![0, 1],
        methods: Method::ALL.to_vec(),
        levels: vec![LevelLabel::Default],
        adapter: AdapterConfig {
            n_prompts: 2,
            epochs: 3,
            ..AdapterConfig::default()
        },
        ..BenchmarkConfig::default()
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a floor so entries that are both tiny compare as
/// equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}
