//! Benchmark harness: pretraining, calibrated unlearning per forget dataset
//! and level, few-shot sweeps on unlearned (inductive) and original
//! (transductive) models, the exclude-versus-unlearn oracle comparison and
//! aggregate tables.

mod checkpoint;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Provenance, MAGIC, VERSION,
};
pub use report::{
    aggregate, read_rows_csv, scatter_pairs, write_aggregates_csv, write_pairs_csv, write_rows_csv,
};
pub use report::{AggregateRow, ScatterPair};

use crate::datagen::{
    generate_suite, sample_episode, MultimodalDataset, SampleRef, Split, SuiteConfig, SuiteDataset,
};
use crate::divergence::{
    compute_weights, zero_shot_test_accuracy, KnowledgeReport, SetKnowledge, SimilarityWeights,
    WeightScheme,
};
use crate::error::{Error, Result};
use crate::fewshot::{fit_adapter, AdapterConfig, Method};
use crate::miniclip::MiniClipModel;
use crate::pretrain::{pretrain_observed, ClassRef, PretrainConfig, TrainLog};
use crate::unlearn::{KnowledgeLossLevel, LevelLabel, Trial, UnlearningProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Adapter fitted on the unlearned model.
    Inductive,
    /// Adapter fitted on the original model, which has seen the classes.
    Transductive,
    /// Adapter fitted on a model trained without the classes.
    OracleExcluded,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inductive => "inductive",
            Self::Transductive => "transductive",
            Self::OracleExcluded => "oracle_excluded",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Inductive, Self::Transductive, Self::OracleExcluded]
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting {s}")))
    }
}

/// One result cell. `accuracy` is a percentage rounded to 3 decimals, or
/// `None` when calibration failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub forget_dataset: String,
    pub level: LevelLabel,
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub setting: Setting,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    /// Datasets whose classes are unlearned, one at a time.
    pub forget: Vec<String>,
    /// Retain datasets for each forget dataset.
    pub retain: BTreeMap<String, Vec<String>>,
    /// Held-out datasets used only to measure knowledge loss.
    pub validation: Vec<String>,
    /// Weighting used while calibrating.
    pub weight_scheme: WeightScheme,
    /// Support shots per class; 0 records zero-shot accuracy.
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub levels: Vec<LevelLabel>,
    pub adapter: AdapterConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    /// The reference suite: three 8-class forget datasets from separate
    /// domains, each retaining the other two, and two 20-class validation
    /// datasets from further domains.
    fn default() -> Self {
        let forget = ["alpha", "beta", "gamma"];
        let mut datasets: Vec<SuiteDataset> = forget
            .iter()
            .enumerate()
            .map(|(domain, name)| SuiteDataset {
                name: name.to_string(),
                domain,
                n_classes: 8,
                train_per_class: 20,
                test_per_class: 10,
                branching: vec![2, 4],
            })
            .collect();
        let validation = ["val_a", "val_b"];
        datasets.extend(validation.iter().enumerate().map(|(i, name)| SuiteDataset {
            name: name.to_string(),
            domain: forget.len() + i,
            n_classes: 20,
            train_per_class: 20,
            test_per_class: 10,
            branching: vec![4, 5],
        }));
        let retain = forget
            .iter()
            .map(|f| {
                let others = forget
                    .iter()
                    .filter(|o| *o != f)
                    .map(|o| o.to_string())
                    .collect();
                (f.to_string(), others)
            })
            .collect();
        Self {
            suite: SuiteConfig {
                n_tokens: 8,
                dim: 32,
                proto_dim: 6,
                sigma_within: 0.3,
                sigma_between: 1.0,
                seed: 1,
                datasets,
            },
            pretrain: PretrainConfig {
                steps: 1000,
                ..PretrainConfig::default()
            },
            forget: forget.iter().map(|s| s.to_string()).collect(),
            retain,
            validation: validation.iter().map(|s| s.to_string()).collect(),
            weight_scheme: WeightScheme::Mmd,
            shots: vec![1, 2, 4, 8, 16],
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            levels: LevelLabel::ALL.to_vec(),
            adapter: AdapterConfig::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

impl BenchmarkConfig {
    /// The reduced grid: shots {1, 4, 16} at the default and L90 levels.
    pub fn desk() -> Self {
        Self {
            shots: vec![1, 4, 16],
            levels: vec![LevelLabel::Default, LevelLabel::L90],
            ..Self::default()
        }
    }

    /// The pooled oracle suite: three 16-class subsets and a 16-class
    /// remainder sharing one domain, like class groups of a single large
    /// dataset, plus two validation datasets from other domains. Each subset
    /// retains everything else in the pool; the grid is a 16-shot linear probe.
    pub fn oracle_reference() -> Self {
        let subsets = ["subset_a", "subset_b", "subset_c"];
        let pooled = |name: &str| SuiteDataset {
            name: name.to_string(),
            domain: 0,
            n_classes: 16,
            train_per_class: 20,
            test_per_class: 10,
            branching: vec![4, 4],
        };
        let mut datasets: Vec<SuiteDataset> = subsets.iter().map(|s| pooled(s)).collect();
        datasets.push(pooled("rest"));
        let base = Self::default();
        datasets.extend(
            base.suite
                .datasets
                .iter()
                .filter(|d| base.validation.contains(&d.name))
                .enumerate()
                .map(|(i, d)| SuiteDataset {
                    domain: 1 + i,
                    ..d.clone()
                }),
        );
        let retain = subsets
            .iter()
            .map(|s| {
                let others = subsets
                    .iter()
                    .filter(|o| *o != s)
                    .chain(std::iter::once(&"rest"));
                (s.to_string(), others.map(|o| o.to_string()).collect())
            })
            .collect();
        Self {
            suite: SuiteConfig {
                datasets,
                ..base.suite.clone()
            },
            forget: subsets.iter().map(|s| s.to_string()).collect(),
            retain,
            shots: vec![16],
            methods: vec![Method::Linear],
            levels: vec![LevelLabel::Default],
            ..base
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.suite.validate()?;
        self.pretrain.validate()?;
        self.adapter.validate()?;
        if !self.pretrain.exclude.is_empty() {
            return bad("the base model must be pretrained on every class".into());
        }
        let roster: BTreeSet<&str> = self
            .suite
            .datasets
            .iter()
            .map(|d| d.name.as_str())
            .collect();
        let known = |name: &String| -> Result<()> {
            if roster.contains(name.as_str()) {
                Ok(())
            } else {
                Err(Error::MissingDataset(name.clone()))
            }
        };
        if self.forget.is_empty() || self.validation.is_empty() {
            return bad("at least one forget and one validation dataset are required".into());
        }
        for list in [&self.forget, &self.validation] {
            list.iter().try_for_each(known)?;
            if list.iter().collect::<BTreeSet<_>>().len() != list.len() {
                return bad("dataset listed twice".into());
            }
        }
        for f in &self.forget {
            let retain = self.retain.get(f).filter(|r| !r.is_empty());
            let Some(retain) = retain else {
                return bad(format!("forget dataset {f} has no retain datasets"));
            };
            retain.iter().try_for_each(known)?;
            if retain.contains(f) {
                return bad(format!("{f} cannot retain itself"));
            }
        }
        if let Some(k) = self.retain.keys().find(|k| !self.forget.contains(k)) {
            return bad(format!(
                "retain mapping for {k}, which is not a forget dataset"
            ));
        }
        let used: BTreeSet<&String> = self
            .forget
            .iter()
            .chain(self.retain.values().flatten())
            .collect();
        if let Some(v) = self.validation.iter().find(|v| used.contains(v)) {
            return bad(format!(
                "validation dataset {v} is also used for forgetting or retaining"
            ));
        }
        if self.shots.is_empty()
            || self.seeds.is_empty()
            || self.methods.is_empty()
            || self.levels.is_empty()
        {
            return bad("shots, seeds, methods and levels must be non-empty".into());
        }
        Ok(())
    }
}

/// Which stage consumed a sample through a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Unlearn,
    Adapt,
}

/// Every sample that entered a gradient computation, by stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientAudit {
    pub consumed: BTreeMap<Stage, BTreeSet<SampleRef>>,
}

impl GradientAudit {
    pub fn record(&mut self, stage: Stage, refs: impl IntoIterator<Item = SampleRef>) {
        self.consumed.entry(stage).or_default().extend(refs);
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &SampleRef> {
        self.consumed.get(&stage).into_iter().flatten()
    }

    /// Validation datasets reach gradients only through the train split
    /// during pretraining; their test split, which measures knowledge loss,
    /// is never consumed.
    pub fn check_isolation(
        &self,
        datasets: &[MultimodalDataset],
        validation: &[String],
    ) -> Result<()> {
        for (stage, refs) in &self.consumed {
            for r in refs {
                let ds = datasets
                    .iter()
                    .find(|d| d.name == r.dataset)
                    .ok_or_else(|| Error::MissingDataset(r.dataset.clone()))?;
                if ds.samples[r.index].split == Split::Test {
                    return Err(Error::Isolation(format!(
                        "{stage:?} consumed test sample {}#{}",
                        r.dataset, r.index
                    )));
                }
                if *stage != Stage::Pretrain && validation.contains(&r.dataset) {
                    return Err(Error::Isolation(format!(
                        "{stage:?} consumed validation sample {}#{}",
                        r.dataset, r.index
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub forget_dataset: String,
    pub level: LevelLabel,
    pub chosen: Option<Trial>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEntry {
    pub forget_dataset: String,
    pub level: LevelLabel,
    pub report: KnowledgeReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub calibrations: Vec<CalibrationEntry>,
}

/// Zero-shot accuracies (percent) of the unlearned full model and the model
/// trained without the subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub subset: String,
    pub unlearned_subset: f64,
    pub excluded_subset: f64,
    /// Mean over every other roster dataset.
    pub unlearned_other: f64,
    pub excluded_other: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Few-shot rows on the subset: inductive for the unlearned model,
    /// oracle_excluded for the model trained without it.
    pub rows: Vec<BenchRow>,
    pub comparisons: Vec<OracleComparison>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed from several coordinates.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn percent(fraction: f64) -> f64 {
    (fraction * 100_000.0).round() / 1000.0
}

/// Generated datasets and the pretrained base model that all runs share.
pub struct Pipeline {
    pub config: BenchmarkConfig,
    pub datasets: Vec<MultimodalDataset>,
    pub base: MiniClipModel,
    pub pretrain_log: TrainLog,
    audit: Mutex<GradientAudit>,
}

impl Pipeline {
    /// Generates the suite and pretrains the base model on every class. The
    /// base parameters are rounded to f32 so they match their checkpoint.
    pub fn prepare(config: BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let datasets = generate_suite(&config.suite)?;
        let mut audit = GradientAudit::default();
        let (base, pretrain_log) = train(&datasets, &config.pretrain, &mut audit)?;
        Ok(Self {
            config,
            datasets,
            base,
            pretrain_log,
            audit: Mutex::new(audit),
        })
    }

    /// Reuses an existing base model, e.g. one loaded from a checkpoint.
    pub fn from_parts(
        config: BenchmarkConfig,
        datasets: Vec<MultimodalDataset>,
        base: MiniClipModel,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            datasets,
            base,
            pretrain_log: TrainLog::default(),
            audit: Mutex::new(GradientAudit::default()),
        })
    }

    pub fn audit(&self) -> GradientAudit {
        self.audit_mut().clone()
    }

    fn audit_mut(&self) -> std::sync::MutexGuard<'_, GradientAudit> {
        self.audit.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dataset(&self, name: &str) -> Result<&MultimodalDataset> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::MissingDataset(name.to_string()))
    }

    fn validation_sets(&self) -> Result<Vec<&MultimodalDataset>> {
        self.config
            .validation
            .iter()
            .map(|v| self.dataset(v))
            .collect()
    }

    /// Similarity weights of the validation sets relative to `forget`, one
    /// entry per scheme.
    pub fn weights(&self, forget: &str) -> Result<Vec<SimilarityWeights>> {
        let f = self.dataset(forget)?;
        let validation = self.validation_sets()?;
        WeightScheme::ALL
            .iter()
            .map(|&s| compute_weights(f, &validation, s, &self.base, self.config.seed))
            .collect()
    }

    /// Fisher estimates and baselines for unlearning `forget`.
    pub fn problem(
        &self,
        forget: &str,
        weights: &[SimilarityWeights],
    ) -> Result<UnlearningProblem<'_>> {
        let f = self.dataset(forget)?;
        let retain_names = self
            .config
            .retain
            .get(forget)
            .ok_or_else(|| Error::Config(format!("no retain datasets for {forget}")))?;
        let retain = retain_names
            .iter()
            .map(|r| self.dataset(r))
            .collect::<Result<Vec<_>>>()?;
        let chosen = weights
            .iter()
            .find(|w| w.scheme == self.config.weight_scheme)
            .ok_or_else(|| Error::Config(format!("no {} weights", self.config.weight_scheme)))?;
        let problem = UnlearningProblem::new(
            &self.base,
            f,
            &retain,
            self.validation_sets()?,
            chosen.weights.clone(),
        )?;
        let mut audit = self.audit_mut();
        audit.record(
            Stage::Unlearn,
            problem.forget_fisher.consumed.iter().cloned(),
        );
        audit.record(
            Stage::Unlearn,
            problem.retain_fisher.consumed.iter().cloned(),
        );
        Ok(problem)
    }

    /// Query accuracy (percent) of `method` with `shots` support samples per
    /// class on every class of `ds`.
    pub fn fit_cell(
        &self,
        model: &MiniClipModel,
        ds: &MultimodalDataset,
        method: Method,
        shots: usize,
        seed: u64,
    ) -> Result<f64> {
        if shots == 0 {
            return Ok(percent(zero_shot_test_accuracy(model, ds)?));
        }
        let ds_index = self
            .datasets
            .iter()
            .position(|d| d.name == ds.name)
            .unwrap_or(usize::MAX) as u64;
        let episode_seed = derive_seed(&[self.config.seed, ds_index, shots as u64, seed]);
        let episode = sample_episode(ds, ds.classes.len(), shots, episode_seed)?;
        let fit = fit_adapter(
            model,
            ds,
            &episode,
            method,
            &self.config.adapter,
            episode_seed,
        )?;
        self.audit_mut().record(
            Stage::Adapt,
            fit.consumed.iter().map(|&index| SampleRef {
                dataset: ds.name.clone(),
                index,
            }),
        );
        Ok(percent(fit.query_accuracy))
    }

    pub fn check_isolation(&self) -> Result<()> {
        self.audit_mut()
            .check_isolation(&self.datasets, &self.config.validation)
    }

    fn cells(&self) -> impl Iterator<Item = (Method, usize, u64)> + '_ {
        let c = &self.config;
        c.methods.iter().flat_map(move |&m| {
            c.shots
                .iter()
                .flat_map(move |&k| c.seeds.iter().map(move |&s| (m, k, s)))
        })
    }

    /// Calibrates and unlearns every forget dataset at every level and
    /// sweeps the adapter grid in both settings. A failed calibration turns
    /// that level's inductive rows into FAILED rows.
    pub fn run_benchmark(&self) -> Result<BenchmarkReport> {
        let mut rows = Vec::new();
        let mut knowledge = Vec::new();
        let mut calibrations = Vec::new();
        let mut transductive: BTreeMap<(usize, Method, usize, u64), f64> = BTreeMap::new();
        for (fi, forget) in self.config.forget.iter().enumerate() {
            let ds = self.dataset(forget)?;
            let weights = self.weights(forget)?;
            let problem = self.problem(forget, &weights)?;
            for &label in &self.config.levels {
                let unlearned = match problem.calibrate(KnowledgeLossLevel::standard(label)) {
                    Ok(cal) => {
                        let sets = problem
                            .validation
                            .iter()
                            .zip(
                                problem
                                    .validation_before
                                    .iter()
                                    .zip(&cal.chosen.validation_accuracy),
                            )
                            .map(|(v, (&before, &after))| SetKnowledge {
                                set: v.name.clone(),
                                acc_before: 100.0 * before,
                                acc_after: 100.0 * after,
                            })
                            .collect();
                        knowledge.push(KnowledgeEntry {
                            forget_dataset: forget.clone(),
                            level: label,
                            report: KnowledgeReport::new(sets, &weights)?,
                        });
                        calibrations.push(CalibrationEntry {
                            forget_dataset: forget.clone(),
                            level: label,
                            chosen: Some(cal.chosen.clone()),
                            error: None,
                        });
                        Some(cal.model)
                    }
                    Err(e @ Error::Calibration { .. }) => {
                        calibrations.push(CalibrationEntry {
                            forget_dataset: forget.clone(),
                            level: label,
                            chosen: None,
                            error: Some(e.to_string()),
                        });
                        None
                    }
                    Err(e) => return Err(e),
                };
                for (method, shots, seed) in self.cells() {
                    let inductive = match &unlearned {
                        Some(m) => Some(self.fit_cell(m, ds, method, shots, seed)?),
                        None => None,
                    };
                    let key = (fi, method, shots, seed);
                    let trans = match transductive.get(&key) {
                        Some(&v) => v,
                        None => {
                            let v = self.fit_cell(&self.base, ds, method, shots, seed)?;
                            transductive.insert(key, v);
                            v
                        }
                    };
                    for (setting, accuracy) in [
                        (Setting::Inductive, inductive),
                        (Setting::Transductive, Some(trans)),
                    ] {
                        rows.push(BenchRow {
                            forget_dataset: forget.clone(),
                            level: label,
                            method,
                            shots,
                            seed,
                            setting,
                            accuracy,
                        });
                    }
                }
            }
        }
        self.check_isolation()?;
        Ok(BenchmarkReport {
            rows,
            knowledge,
            calibrations,
        })
    }

    /// For each forget dataset: unlearns it from the base model at the
    /// default level (model A) and pretrains a fresh model without its
    /// classes (model B), then compares both.
    pub fn run_oracle(&self) -> Result<OracleReport> {
        let mut rows = Vec::new();
        let mut comparisons = Vec::new();
        for forget in &self.config.forget {
            let ds = self.dataset(forget)?;
            let weights = self.weights(forget)?;
            let problem = self.problem(forget, &weights)?;
            let unlearned = problem
                .calibrate(KnowledgeLossLevel::standard(LevelLabel::Default))?
                .model;
            let mut cfg = self.config.pretrain.clone();
            cfg.exclude = ds
                .classes
                .iter()
                .map(|c| ClassRef {
                    dataset: ds.name.clone(),
                    class_id: c.id,
                })
                .collect();
            let (excluded, _) = train(&self.datasets, &cfg, &mut self.audit_mut())?;
            let others: Vec<&MultimodalDataset> =
                self.datasets.iter().filter(|d| d.name != *forget).collect();
            let mean_other = |m: &MiniClipModel| -> Result<f64> {
                let total = others
                    .iter()
                    .map(|d| zero_shot_test_accuracy(m, d))
                    .sum::<Result<f64>>()?;
                Ok(100.0 * total / others.len() as f64)
            };
            comparisons.push(OracleComparison {
                subset: forget.clone(),
                unlearned_subset: 100.0 * zero_shot_test_accuracy(&unlearned, ds)?,
                excluded_subset: 100.0 * zero_shot_test_accuracy(&excluded, ds)?,
                unlearned_other: mean_other(&unlearned)?,
                excluded_other: mean_other(&excluded)?,
            });
            for (method, shots, seed) in self.cells() {
                for (setting, model) in [
                    (Setting::Inductive, &unlearned),
                    (Setting::OracleExcluded, &excluded),
                ] {
                    rows.push(BenchRow {
                        forget_dataset: forget.clone(),
                        level: LevelLabel::Default,
                        method,
                        shots,
                        seed,
                        setting,
                        accuracy: Some(self.fit_cell(model, ds, method, shots, seed)?),
                    });
                }
            }
        }
        self.check_isolation()?;
        Ok(OracleReport { rows, comparisons })
    }

    pub fn provenance(&self, stage: &str) -> Result<Provenance> {
        Ok(Provenance {
            stage: stage.into(),
            forget_dataset: None,
            level: None,
            seed: self.config.seed,
            config_hash: config_hash(&self.config)?,
        })
    }
}

/// Pretrains on `datasets`, logging every consumed sample, and rounds the
/// result to f32.
fn train(
    datasets: &[MultimodalDataset],
    cfg: &PretrainConfig,
    audit: &mut GradientAudit,
) -> Result<(MiniClipModel, TrainLog)> {
    let mut seen = BTreeSet::new();
    let (mut model, log) =
        pretrain_observed(datasets, cfg, |_, batch| seen.extend(batch.iter().cloned()))?;
    audit.record(Stage::Pretrain, seen);
    model.params.round_to_f32();
    Ok((model, log))
}

impl BenchmarkReport {
    /// Writes the row CSV, aggregates, scatter pairs, knowledge reports and
    /// calibration choices into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_rows_csv(&self.rows, fs::File::create(dir.join("report.csv"))?)?;
        write_aggregates_csv(
            &aggregate(&self.rows)?,
            fs::File::create(dir.join("aggregates.csv"))?,
        )?;
        write_pairs_csv(
            &scatter_pairs(&self.rows),
            fs::File::create(dir.join("pairs.csv"))?,
        )?;
        for k in &self.knowledge {
            k.report
                .save_csv(&dir.join(format!("knowledge_{}_{}.csv", k.forget_dataset, k.level)))?;
        }
        let mut w = csv::Writer::from_path(dir.join("calibration.csv"))?;
        w.write_record([
            "forget_dataset",
            "level",
            "alpha",
            "lambda",
            "tkl",
            "forget_accuracy",
            "dampened",
            "status",
        ])?;
        for c in &self.calibrations {
            let mut rec = vec![c.forget_dataset.clone(), c.level.to_string()];
            match &c.chosen {
                Some(t) => rec.extend([
                    t.config.alpha.to_string(),
                    t.config.lambda.to_string(),
                    format!("{:.3}", t.tkl),
                    format!("{:.3}", 100.0 * t.forget_accuracy),
                    t.dampened.to_string(),
                    "ok".into(),
                ]),
                None => {
                    rec.extend(std::iter::repeat_n(String::new(), 5));
                    rec.push(format!("FAILED: {}", c.error.as_deref().unwrap_or("")));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl OracleReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_rows_csv(&self.rows, fs::File::create(dir.join("oracle_rows.csv"))?)?;
        let mut w = csv::Writer::from_path(dir.join("oracle.csv"))?;
        w.write_record([
            "subset",
            "unlearned_subset",
            "excluded_subset",
            "unlearned_other",
            "excluded_other",
        ])?;
        for c in &self.comparisons {
            w.write_record([
                c.subset.clone(),
                format!("{:.3}", c.unlearned_subset),
                format!("{:.3}", c.excluded_subset),
                format!("{:.3}", c.unlearned_other),
                format!("{:.3}", c.excluded_other),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Prepares the pipeline from `config`, runs the sweep and, when an output
/// directory is configured, writes the report files and the base checkpoint.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let pipeline = Pipeline::prepare(config.clone())?;
    let report = pipeline.run_benchmark()?;
    if let Some(dir) = &config.out_dir {
        report.save(dir)?;
        save_checkpoint(
            &dir.join("base.mckp"),
            &pipeline.base,
            &pipeline.provenance("pretrain")?,
        )?;
    }
    Ok(report)
}

pub fn run_oracle(config: &BenchmarkConfig) -> Result<OracleReport> {
    let pipeline = Pipeline::prepare(config.clone())?;
    let report = pipeline.run_oracle()?;
    if let Some(dir) = &config.out_dir {
        report.save(dir)?;
    }
    Ok(report)
}
