//! Selective synaptic dampening for the dual encoder: diagonal Fisher
//! importances on forget and retain data, the dampening rule, and a search
//! over dampening strength that lands on a knowledge-loss target.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::{MultimodalDataset, SampleRef, Split};
use crate::divergence::{tkl, zero_shot_test_accuracy};
use crate::error::{Error, Result};
use crate::miniclip::MiniClipModel;
use crate::numerics::Tape;
use crate::pretrain::EVAL_TEMPLATE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherSource {
    Forget,
    Retain,
}

/// Diagonal Fisher information, aligned with the flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub source: FisherSource,
    pub samples: usize,
    /// Every sample whose gradient entered the estimate, in order.
    pub consumed: Vec<SampleRef>,
}

/// Samples of one dataset scored against the zero-shot classifier over
/// `classes`.
#[derive(Clone, Debug)]
pub struct FisherSet<'a> {
    pub dataset: &'a MultimodalDataset,
    pub classes: Vec<u32>,
    pub indices: Vec<usize>,
}

impl<'a> FisherSet<'a> {
    /// The full train split over all classes of `dataset`.
    pub fn train_split(dataset: &'a MultimodalDataset) -> Self {
        Self {
            dataset,
            classes: dataset.classes.iter().map(|c| c.id).collect(),
            indices: dataset.indices(Split::Train),
        }
    }
}

/// Mean over samples of the squared gradient of the zero-shot cross-entropy
/// `CE(f(x)·Wᵀ, y)` with respect to every parameter. The logits are plain
/// cosine similarities, so the logit scale always scores zero. The
/// classifier `W` is encoded in the same graph, so text-tower parameters
/// receive importance too. Samples are processed in the given order.
pub fn estimate_fisher(
    model: &MiniClipModel,
    sets: &[FisherSet],
    source: FisherSource,
) -> Result<FisherDiagonal> {
    let mut values = vec![0.0; model.params.numel()];
    let mut samples = 0usize;
    let mut consumed = Vec::new();
    for set in sets {
        let names: Vec<String> = set
            .classes
            .iter()
            .map(|&id| {
                set.dataset
                    .class_index(id)
                    .map(|i| set.dataset.classes[i].name.clone())
                    .ok_or_else(|| {
                        Error::Config(format!("{}: unknown class {id}", set.dataset.name))
                    })
            })
            .collect::<Result<_>>()?;
        let prompts = model.prompt_tokens(&names, EVAL_TEMPLATE)?;
        for &i in &set.indices {
            let sample = &set.dataset.samples[i];
            let label = set
                .classes
                .iter()
                .position(|&c| c == sample.class_id)
                .ok_or_else(|| {
                    Error::Config(format!("sample {i} is outside the classifier's classes"))
                })?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let img = model.image_features(&mut tape, &bound, &[&sample.tokens], None)?;
            let txt = model.text_features(&mut tape, &bound, &prompts, None)?;
            let logits = tape.matmul_t(img, txt)?;
            let loss = tape.cross_entropy(logits, vec![label])?;
            let grads = tape.backward_scalar(loss)?;
            let g = model.params.flat_gradient(&bound, &grads);
            values.iter_mut().zip(&g).for_each(|(v, gi)| *v += gi * gi);
            samples += 1;
            consumed.push(SampleRef {
                dataset: set.dataset.name.clone(),
                index: i,
            });
        }
    }
    if samples == 0 {
        return Err(Error::Empty("fisher sample set"));
    }
    values.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(FisherDiagonal {
        values,
        source,
        samples,
        consumed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampeningConfig {
    /// Selectivity: a parameter is touched when `F_f > α·F_r`.
    pub alpha: f64,
    /// Strength: the touched parameter is scaled by `min(λ·F_r/F_f, 1)`.
    pub lambda: f64,
}

impl DampeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "dampening needs positive alpha and lambda, got {} and {}",
                self.alpha, self.lambda
            )));
        }
        Ok(())
    }
}

/// Scale factor applied to one parameter, or `None` when it is left alone.
pub fn dampening_factor(forget: f64, retain: f64, cfg: &DampeningConfig) -> Option<f64> {
    (forget > cfg.alpha * retain).then(|| (cfg.lambda * retain / forget).min(1.0))
}

/// Returns a dampened copy of `model` and the number of parameters whose
/// selection condition held.
pub fn dampen(
    model: &MiniClipModel,
    forget: &FisherDiagonal,
    retain: &FisherDiagonal,
    cfg: &DampeningConfig,
) -> Result<(MiniClipModel, usize)> {
    cfg.validate()?;
    let n = model.params.numel();
    if forget.values.len() != n || retain.values.len() != n {
        return Err(Error::Layout(format!(
            "fisher lengths {} and {} for {n} parameters",
            forget.values.len(),
            retain.values.len()
        )));
    }
    let mut flat = model.params.flatten();
    let mut touched = 0;
    for (i, theta) in flat.iter_mut().enumerate() {
        if let Some(beta) = dampening_factor(forget.values[i], retain.values[i], cfg) {
            *theta *= beta;
            touched += 1;
        }
    }
    let mut out = model.clone();
    out.params.set_flat(&flat)?;
    Ok((out, touched))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LevelLabel {
    #[serde(rename = "default")]
    Default,
    L25,
    L50,
    L90,
}

impl LevelLabel {
    pub const ALL: [LevelLabel; 4] = [Self::Default, Self::L25, Self::L50, Self::L90];
}

impl fmt::Display for LevelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::L25 => "L25",
            Self::L50 => "L50",
            Self::L90 => "L90",
        })
    }
}

impl std::str::FromStr for LevelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "L25" => Ok(Self::L25),
            "L50" => Ok(Self::L50),
            "L90" => Ok(Self::L90),
            other => Err(Error::Config(format!("unknown level {other}"))),
        }
    }
}

/// A knowledge-loss target: TKL in accuracy points and its tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeLossLevel {
    pub label: LevelLabel,
    pub target: f64,
    pub tolerance: f64,
}

impl KnowledgeLossLevel {
    pub fn standard(label: LevelLabel) -> Self {
        let target = match label {
            LevelLabel::Default => 0.0,
            LevelLabel::L25 => 25.0,
            LevelLabel::L50 => 50.0,
            LevelLabel::L90 => 90.0,
        };
        Self {
            label,
            target,
            tolerance: 5.0,
        }
    }

    pub fn all() -> [Self; 4] {
        [
            LevelLabel::Default,
            LevelLabel::L25,
            LevelLabel::L50,
            LevelLabel::L90,
        ]
        .map(Self::standard)
    }

    pub fn accepts(&self, tkl: f64) -> bool {
        (tkl - self.target).abs() <= self.tolerance
    }

    /// Centre of the non-negative part of the acceptance window; the
    /// strength search steers toward it.
    pub fn aim(&self) -> f64 {
        let lo = (self.target - self.tolerance).max(0.0);
        0.5 * (lo + self.target + self.tolerance)
    }
}

pub const ALPHA_GRID: [f64; 4] = [1.0, 5.0, 10.0, 50.0];
pub const BISECTION_STEPS: usize = 12;
/// Every selected parameter has `F_f > α·F_r`, so with `λ ≤ 1` its factor
/// never exceeds `1/α` and the strength barely moves the outcome. The range
/// therefore extends past 1, up to where only near-exclusive parameters are
/// still touched.
pub const LAMBDA_RANGE: (f64, f64) = (1e-3, 1e3);

/// What the calibration search measures for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: DampeningConfig,
    /// Forget-set test accuracy (fraction).
    pub forget_accuracy: f64,
    /// Per validation set accuracy after dampening (fraction).
    pub validation_accuracy: Vec<f64>,
    pub tkl: f64,
    pub dampened: usize,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub level: KnowledgeLossLevel,
    pub chosen: Trial,
    pub model: MiniClipModel,
    pub trials: Vec<Trial>,
}

/// Everything calibration needs that does not depend on (α, λ).
pub struct UnlearningProblem<'a> {
    pub model: &'a MiniClipModel,
    pub forget: &'a MultimodalDataset,
    pub validation: Vec<&'a MultimodalDataset>,
    /// TKL weights, one per validation set.
    pub weights: Vec<f64>,
    pub forget_fisher: FisherDiagonal,
    pub retain_fisher: FisherDiagonal,
    /// Validation test accuracy of `model` (fraction).
    pub validation_before: Vec<f64>,
}

impl<'a> UnlearningProblem<'a> {
    /// Estimates both Fisher diagonals on full train splits and the
    /// validation baseline. Validation sets must be distinct from the forget
    /// and retain sets.
    pub fn new(
        model: &'a MiniClipModel,
        forget: &'a MultimodalDataset,
        retain: &[&'a MultimodalDataset],
        validation: Vec<&'a MultimodalDataset>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if validation.is_empty() {
            return Err(Error::Empty("validation sets"));
        }
        if retain.is_empty() {
            return Err(Error::Empty("retain sets"));
        }
        for v in &validation {
            if v.name == forget.name || retain.iter().any(|r| r.name == v.name) {
                return Err(Error::Config(format!(
                    "validation set {} overlaps the forget or retain sets",
                    v.name
                )));
            }
        }
        if weights.len() != validation.len() {
            return Err(Error::Config(
                "one weight per validation set is required".into(),
            ));
        }
        let forget_fisher = estimate_fisher(
            model,
            &[FisherSet::train_split(forget)],
            FisherSource::Forget,
        )?;
        let retain_sets: Vec<FisherSet> =
            retain.iter().map(|r| FisherSet::train_split(r)).collect();
        let retain_fisher = estimate_fisher(model, &retain_sets, FisherSource::Retain)?;
        let validation_before = validation
            .iter()
            .map(|v| zero_shot_test_accuracy(model, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            forget,
            validation,
            weights,
            forget_fisher,
            retain_fisher,
            validation_before,
        })
    }

    /// Dampens with `config` and measures forget accuracy and TKL (points).
    pub fn evaluate(&self, config: DampeningConfig) -> Result<(Trial, MiniClipModel)> {
        let (model, dampened) = dampen(
            self.model,
            &self.forget_fisher,
            &self.retain_fisher,
            &config,
        )?;
        let forget_accuracy = zero_shot_test_accuracy(&model, self.forget)?;
        let validation_accuracy = self
            .validation
            .iter()
            .map(|v| zero_shot_test_accuracy(&model, v))
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = self
            .validation_before
            .iter()
            .zip(&validation_accuracy)
            .map(|(b, a)| 100.0 * (b - a))
            .collect();
        let tkl = tkl(&losses, &self.weights)?;
        Ok((
            Trial {
                config,
                forget_accuracy,
                validation_accuracy,
                tkl,
                dampened,
            },
            model,
        ))
    }

    /// For each α of the grid, bisects λ in log space toward the level's
    /// aim (TKL falls as λ grows). Among all evaluated candidates inside the
    /// level's window, the one with the lowest forget accuracy wins; ties go
    /// to the candidate that dampened more parameters, then to the earliest.
    pub fn calibrate(&self, level: KnowledgeLossLevel) -> Result<Calibration> {
        let mut trials: Vec<Trial> = Vec::new();
        let mut best: Option<(usize, MiniClipModel)> = None;
        let aim = level.aim();
        for &alpha in &ALPHA_GRID {
            let (mut lo, mut hi) = (LAMBDA_RANGE.0.ln(), LAMBDA_RANGE.1.ln());
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                let (trial, model) = self.evaluate(DampeningConfig {
                    alpha,
                    lambda: mid.exp(),
                })?;
                if trial.tkl > aim {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if level.accepts(trial.tkl) {
                    let better = match &best {
                        None => true,
                        Some((i, _)) => {
                            let b = &trials[*i];
                            trial.forget_accuracy < b.forget_accuracy
                                || (trial.forget_accuracy == b.forget_accuracy
                                    && trial.dampened > b.dampened)
                        }
                    };
                    if better {
                        best = Some((trials.len(), model));
                    }
                }
                trials.push(trial);
            }
        }
        match best {
            Some((i, model)) => Ok(Calibration {
                level,
                chosen: trials[i].clone(),
                model,
                trials,
            }),
            None => {
                let closest = trials
                    .iter()
                    .map(|t| t.tkl)
                    .min_by(|a, b| {
                        (a - level.target)
                            .abs()
                            .total_cmp(&(b - level.target).abs())
                    })
                    .unwrap_or(f64::NAN);
                Err(Error::Calibration {
                    level: level.label.to_string(),
                    detail: format!(
                        "no (alpha, lambda) reached TKL {}±{}; closest was {closest:.3}",
                        level.target, level.tolerance
                    ),
                })
            }
        }
    }
}
