//! Contrastive pretraining of the dual encoder with unique-class batches,
//! random prompt templates and optional class exclusion.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{MultimodalDataset, SampleRef, Split};
use crate::error::{shape_err, Error, Result};
use crate::miniclip::{format_prompt, MiniClipModel, ModelConfig, Vocabulary};
use crate::numerics::{log_sum_exp, Adam, Tape, Tensor, Var};

/// Toy prompt templates; the first one is used for evaluation.
pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a {class}",
    "an image of a {class}",
    "a picture of the {class}",
    "a good photo of a {class}",
    "a close photo of the {class}",
    "a rendering of a {class}",
    "the {class}",
    "a {class}",
];

pub const EVAL_TEMPLATE: &str = DEFAULT_TEMPLATES[0];

/// Upper bound on the learned logit scale.
const MAX_LOGIT_SCALE: f64 = 100.0;

/// A class of a named dataset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassRef {
    pub dataset: String,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub steps: usize,
    pub templates: Vec<String>,
    pub exclude: Vec<ClassRef>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            steps: 2000,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            exclude: Vec::new(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("template pool is empty".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for t in &self.templates {
            format_prompt(t, "x")?;
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Contrastive loss after each step's forward pass.
    pub losses: Vec<f64>,
    /// Test-split zero-shot accuracy per dataset over its included classes.
    pub probe_accuracy: Vec<(String, f64)>,
}

impl TrainLog {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.9}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn mean_probe_accuracy(&self) -> f64 {
        if self.probe_accuracy.is_empty() {
            return 0.0;
        }
        self.probe_accuracy.iter().map(|(_, a)| a).sum::<f64>() / self.probe_accuracy.len() as f64
    }
}

/// Symmetric InfoNCE on unit-norm embeddings: the mean of the image→text
/// and text→image cross-entropies of `τ · I·Tᵀ` with matching rows as
/// targets.
pub fn contrastive_loss(image: &Tensor, text: &Tensor, temperature: f64) -> Result<f64> {
    let (b, d) = image.dims2();
    if b < 2 {
        return shape_err("contrastive_loss", format!("batch of {b}"));
    }
    if text.dims2() != (b, d) {
        return shape_err(
            "contrastive_loss",
            format!("{:?} vs {:?}", image.shape(), text.shape()),
        );
    }
    let logits = image.matmul(&text.transpose())?.map(|x| x * temperature);
    let transposed = logits.transpose();
    let mut total = 0.0;
    for i in 0..b {
        total += log_sum_exp(logits.row(i)) - logits.get(i, i);
        total += log_sum_exp(transposed.row(i)) - transposed.get(i, i);
    }
    Ok(total / (2.0 * b as f64))
}

/// Records the symmetric contrastive loss on `tape`; `scale` is a 1×1 var.
pub fn contrastive_loss_var(tape: &mut Tape, image: Var, text: Var, scale: Var) -> Result<Var> {
    let b = tape.value(image).rows();
    if b < 2 {
        return shape_err("contrastive_loss", format!("batch of {b}"));
    }
    let sims = tape.matmul_t(image, text)?;
    let logits = tape.scale_by(sims, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(logits, targets.clone())?;
    let lt = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(lt, targets)?;
    let sum = tape.add(i2t, t2i)?;
    tape.scale(sum, 0.5)
}

/// Vocabulary covering the template pool and every class name.
pub fn build_vocabulary(datasets: &[MultimodalDataset], templates: &[String]) -> Vocabulary {
    Vocabulary::build(
        templates.iter().map(String::as_str),
        datasets
            .iter()
            .flat_map(|d| d.classes.iter().map(|c| c.name.as_str())),
    )
}

struct Included<'a> {
    ds: &'a MultimodalDataset,
    class_id: u32,
    name: String,
    train: Vec<usize>,
}

fn included_classes<'a>(
    datasets: &'a [MultimodalDataset],
    exclude: &[ClassRef],
) -> Result<Vec<Included<'a>>> {
    let excluded: BTreeSet<&ClassRef> = exclude.iter().collect();
    let mut out = Vec::new();
    for ds in datasets {
        for c in &ds.classes {
            let key = ClassRef {
                dataset: ds.name.clone(),
                class_id: c.id,
            };
            if excluded.contains(&key) {
                continue;
            }
            let train = ds.class_indices(c.id, Split::Train);
            if train.is_empty() {
                return Err(Error::InsufficientSamples(format!(
                    "{}: class {} has no train samples",
                    ds.name, c.id
                )));
            }
            out.push(Included {
                ds,
                class_id: c.id,
                name: c.name.clone(),
                train,
            });
        }
    }
    if out.len() < 2 {
        return Err(Error::Config(format!(
            "pretraining needs at least two included classes, found {}",
            out.len()
        )));
    }
    Ok(out)
}

/// Trains a fresh model; see [`pretrain_observed`].
pub fn pretrain(
    datasets: &[MultimodalDataset],
    config: &PretrainConfig,
) -> Result<(MiniClipModel, TrainLog)> {
    pretrain_observed(datasets, config, |_, _| {})
}

/// Trains a fresh model on the train splits of `datasets`. Every step draws
/// one sample per included class and pairs it with that class's name in a
/// random template. `observer` sees the step index and the batch's samples
/// before the gradient is taken.
pub fn pretrain_observed(
    datasets: &[MultimodalDataset],
    config: &PretrainConfig,
    mut observer: impl FnMut(usize, &[SampleRef]),
) -> Result<(MiniClipModel, TrainLog)> {
    config.validate()?;
    let classes = included_classes(datasets, &config.exclude)?;
    let vocab = build_vocabulary(datasets, &config.templates);
    let mut model = MiniClipModel::new(config.model.clone(), vocab)?;
    let prompts: Vec<Vec<Vec<usize>>> = classes
        .iter()
        .map(|c| {
            config
                .templates
                .iter()
                .map(|t| model.tokenize(&format_prompt(t, &c.name)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let template_ids: Vec<usize> = (0..config.templates.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let scale_id = model.params.id("logit_scale")?;
    let mut log = TrainLog::default();
    let mut batch_refs = Vec::with_capacity(classes.len());

    for step in 0..config.steps {
        batch_refs.clear();
        let mut images = Vec::with_capacity(classes.len());
        let mut texts = Vec::with_capacity(classes.len());
        for (ci, c) in classes.iter().enumerate() {
            let &idx = c.train.choose(&mut rng).expect("nonempty");
            let &t = template_ids.choose(&mut rng).expect("nonempty");
            images.push(&c.ds.samples[idx].tokens);
            texts.push(prompts[ci][t].clone());
            batch_refs.push(SampleRef {
                dataset: c.ds.name.clone(),
                index: idx,
            });
        }
        observer(step, &batch_refs);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let img = model.image_features(&mut tape, &bound, &images, None)?;
        let txt = model.text_features(&mut tape, &bound, &texts, None)?;
        let scale = model.logit_scale_var(&mut tape, &bound)?;
        let loss = contrastive_loss_var(&mut tape, img, txt, scale)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        log.losses.push(value);
        let grads = tape.backward_scalar(loss)?;
        let g = model.params.gradients(&bound, &grads);
        adam.step(&mut model.params.tensors_mut(), &g);
        let s = model.params.get_mut(scale_id);
        s.data_mut()[0] = s.data()[0].min(MAX_LOGIT_SCALE.ln());
    }

    for ds in datasets {
        let ids: Vec<u32> = classes
            .iter()
            .filter(|c| std::ptr::eq(c.ds, ds))
            .map(|c| c.class_id)
            .collect();
        if ids.len() < 2 {
            continue;
        }
        let test: Vec<usize> = ds
            .indices(Split::Test)
            .into_iter()
            .filter(|&i| ids.contains(&ds.samples[i].class_id))
            .collect();
        let acc = model.zero_shot_accuracy(ds, &ids, &test, &config.templates[0])?;
        log.probe_accuracy.push((ds.name.clone(), acc));
    }
    Ok((model, log))
}
