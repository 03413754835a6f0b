//! Miniature dual-encoder contrastive model: a token-grid image encoder, a
//! word-level text encoder, projections into a shared unit sphere, and the
//! zero-shot classifier built from class prompts.
//!
//! Both encoders are stacks of pre-norm transformer blocks (single-head
//! self-attention followed by a GELU MLP). Image embeddings mean-pool the
//! final tokens; text embeddings read the final text token. Learnable prompt
//! tokens can be appended to either encoder, in which case the prompt slots
//! are refreshed between layers by the token fusion step in
//! [`crate::fewshot`].

mod encoder;
mod vocab;

pub use encoder::{fuse_prompt_tokens, top_tokens};
pub use vocab::{format_prompt, Vocabulary, CLASS_SLOT};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalDataset;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{argmax, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParameterStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width `D` of both encoders (and of the input token grid).
    pub hidden_dim: usize,
    /// Shared embedding width `d`.
    pub embed_dim: usize,
    pub n_layers: usize,
    pub mlp_dim: usize,
    pub image_tokens: usize,
    pub max_text_tokens: usize,
    /// Initial logit scale `τ`.
    pub init_temperature: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embed_dim: 16,
            n_layers: 2,
            mlp_dim: 64,
            image_tokens: 8,
            max_text_tokens: 8,
            init_temperature: 1.0 / 0.07,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden_dim,
            self.embed_dim,
            self.n_layers,
            self.mlp_dim,
            self.image_tokens,
            self.max_text_tokens,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct TowerIds {
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub visual: TowerIds,
    pub token_embedding: ParamId,
    pub text: TowerIds,
    pub logit_scale: ParamId,
}

impl ModelIds {
    fn resolve(store: &ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        let tower = |p: &str| -> Result<TowerIds> {
            let layers = (0..cfg.n_layers)
                .map(|l| {
                    let n = |s: &str| store.id(&format!("{p}.layers.{l}.{s}"));
                    Ok(LayerIds {
                        ln1_g: n("ln1.gamma")?,
                        ln1_b: n("ln1.beta")?,
                        wq: n("attn.wq")?,
                        wk: n("attn.wk")?,
                        wv: n("attn.wv")?,
                        wo: n("attn.wo")?,
                        ln2_g: n("ln2.gamma")?,
                        ln2_b: n("ln2.beta")?,
                        w1: n("mlp.w1")?,
                        b1: n("mlp.b1")?,
                        w2: n("mlp.w2")?,
                        b2: n("mlp.b2")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TowerIds {
                pos: store.id(&format!("{p}.pos"))?,
                layers,
                ln_g: store.id(&format!("{p}.ln_post.gamma"))?,
                ln_b: store.id(&format!("{p}.ln_post.beta"))?,
                proj: store.id(&format!("{p}.proj"))?,
            })
        };
        Ok(Self {
            patch_w: store.id("visual.patch.weight")?,
            patch_b: store.id("visual.patch.bias")?,
            visual: tower("visual")?,
            token_embedding: store.id("text.token_embedding")?,
            text: tower("text")?,
            logit_scale: store.id("logit_scale")?,
        })
    }
}

/// Dual encoder with its parameters and tokenizer.
#[derive(Clone, Debug)]
pub struct MiniClipModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
    ids: ModelIds,
}

/// Unit-norm class prompt embeddings, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierMatrix {
    pub weights: Tensor,
}

impl ClassifierMatrix {
    pub fn new(weights: Tensor) -> Self {
        Self {
            weights: weights.as_matrix(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }
}

/// Result of classifying one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub class: usize,
}

/// `logits = F·Wᵀ`; the argmax breaks ties toward the lowest index.
pub fn classify(features: &[f64], classifier: &ClassifierMatrix) -> Result<Prediction> {
    let w = &classifier.weights;
    if features.len() != w.cols() {
        return shape_err(
            "classify",
            format!("{}-vector vs {} columns", features.len(), w.cols()),
        );
    }
    let logits: Vec<f64> = (0..w.rows())
        .map(|r| w.row(r).iter().zip(features).map(|(a, b)| a * b).sum())
        .collect();
    let class = argmax(&logits);
    Ok(Prediction { logits, class })
}

/// Fraction of predictions equal to their labels; 0 for an empty list.
pub fn top1(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

const INFERENCE_CHUNK: usize = 64;

impl MiniClipModel {
    /// Fresh randomly initialized model over `vocab`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut s = ParameterStore::new();
        let (dh, de, dm) = (config.hidden_dim, config.embed_dim, config.mlp_dim);
        let lin = 1.0 / (dh as f64).sqrt();

        s.insert_normal("visual.patch.weight", &[dh, dh], lin, &mut rng)?;
        s.insert_const("visual.patch.bias", &[dh], 0.0)?;
        s.insert_normal("text.token_embedding", &[vocab.len(), dh], 0.5, &mut rng)?;
        for (tower, n_pos) in [
            ("visual", config.image_tokens),
            ("text", config.max_text_tokens),
        ] {
            s.insert_normal(&format!("{tower}.pos"), &[n_pos, dh], 0.1, &mut rng)?;
            for l in 0..config.n_layers {
                let p = format!("{tower}.layers.{l}");
                s.insert_const(&format!("{p}.ln1.gamma"), &[dh], 1.0)?;
                s.insert_const(&format!("{p}.ln1.beta"), &[dh], 0.0)?;
                for w in ["wq", "wk", "wv", "wo"] {
                    s.insert_normal(&format!("{p}.attn.{w}"), &[dh, dh], lin, &mut rng)?;
                }
                s.insert_const(&format!("{p}.ln2.gamma"), &[dh], 1.0)?;
                s.insert_const(&format!("{p}.ln2.beta"), &[dh], 0.0)?;
                s.insert_normal(&format!("{p}.mlp.w1"), &[dh, dm], lin, &mut rng)?;
                s.insert_const(&format!("{p}.mlp.b1"), &[dm], 0.0)?;
                s.insert_normal(
                    &format!("{p}.mlp.w2"),
                    &[dm, dh],
                    1.0 / (dm as f64).sqrt(),
                    &mut rng,
                )?;
                s.insert_const(&format!("{p}.mlp.b2"), &[dh], 0.0)?;
            }
            s.insert_const(&format!("{tower}.ln_post.gamma"), &[dh], 1.0)?;
            s.insert_const(&format!("{tower}.ln_post.beta"), &[dh], 0.0)?;
            s.insert_normal(&format!("{tower}.proj"), &[dh, de], lin, &mut rng)?;
        }
        s.insert_const("logit_scale", &[1], config.init_temperature.ln())?;
        Self::from_parts(config, vocab, s)
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        params: ParameterStore,
    ) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds::resolve(&params, &config)?;
        let model = Self {
            config,
            vocab,
            params,
            ids,
        };
        let (dh, de) = (model.config.hidden_dim, model.config.embed_dim);
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            let got = model.params.get(id).shape();
            if got != shape {
                return Err(Error::Layout(format!(
                    "{}: expected {shape:?}, found {got:?}",
                    model.params.name(id)
                )));
            }
            Ok(())
        };
        expect(model.ids.patch_w, &[dh, dh])?;
        expect(model.ids.token_embedding, &[model.vocab.len(), dh])?;
        expect(model.ids.visual.pos, &[model.config.image_tokens, dh])?;
        expect(model.ids.text.pos, &[model.config.max_text_tokens, dh])?;
        expect(model.ids.visual.proj, &[dh, de])?;
        expect(model.ids.text.proj, &[dh, de])?;
        Ok(model)
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Current logit scale `τ`.
    pub fn temperature(&self) -> f64 {
        self.params.get(self.ids.logit_scale).data()[0].exp()
    }

    pub fn logit_scale_var(&self, tape: &mut Tape, bound: &BoundParams) -> Result<Var> {
        tape.exp(bound.var(self.ids.logit_scale))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(text)?;
        if ids.is_empty() || ids.len() > self.config.max_text_tokens {
            return shape_err(
                "tokenize",
                format!(
                    "{:?} has {} tokens, limit {}",
                    text,
                    ids.len(),
                    self.config.max_text_tokens
                ),
            );
        }
        Ok(ids)
    }

    /// Token sequences for `template` filled with each class name.
    pub fn prompt_tokens(&self, class_names: &[String], template: &str) -> Result<Vec<Vec<usize>>> {
        class_names
            .iter()
            .map(|c| self.tokenize(&format_prompt(template, c)?))
            .collect()
    }

    fn check_grid(&self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.config.image_tokens, self.config.hidden_dim] {
            return shape_err(
                "encode_image",
                format!(
                    "token grid {:?}, expected [{}, {}]",
                    t.shape(),
                    self.config.image_tokens,
                    self.config.hidden_dim
                ),
            );
        }
        Ok(())
    }

    /// Records the image tower on `tape`: `B × d` unit rows.
    pub fn image_features(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: &[&Tensor],
        prompts: Option<Var>,
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let mut data =
            Vec::with_capacity(images.len() * self.config.image_tokens * self.config.hidden_dim);
        for t in images {
            self.check_grid(t)?;
            data.extend_from_slice(t.data());
        }
        let x = tape.constant(Tensor::matrix(
            images.len() * self.config.image_tokens,
            self.config.hidden_dim,
            data,
        )?);
        encoder::image_tower(self, tape, bound, x, images.len(), prompts)
    }

    /// Records the text tower on `tape`: one unit row per sequence.
    pub fn text_features(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        sequences: &[Vec<usize>],
        prompts: Option<Var>,
    ) -> Result<Var> {
        if sequences.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        for s in sequences {
            if s.is_empty() || s.len() > self.config.max_text_tokens {
                return shape_err("encode_text", format!("sequence of {} tokens", s.len()));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: bad,
                    len: self.vocab.len(),
                });
            }
        }
        encoder::text_tower(self, tape, bound, sequences, prompts)
    }

    /// Unit-norm embeddings of a batch of token grids.
    pub fn encode_images(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(images.len() * self.config.embed_dim);
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let f = self.image_features(&mut tape, &bound, chunk, None)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Tensor::matrix(images.len(), self.config.embed_dim, rows)
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image])?.into_data())
    }

    /// Unit-norm embeddings of whitespace-tokenized texts.
    pub fn encode_texts(&self, texts: &[String]) -> Result<Tensor> {
        let seqs = texts
            .iter()
            .map(|t| self.tokenize(t))
            .collect::<Result<Vec<_>>>()?;
        self.encode_sequences(&seqs)
    }

    pub fn encode_sequences(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(seqs.len() * self.config.embed_dim);
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let f = self.text_features(&mut tape, &bound, chunk, None)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Tensor::matrix(seqs.len(), self.config.embed_dim, rows)
    }

    /// Zero-shot classifier: row `i` is the embedding of `template` filled
    /// with class `i`.
    pub fn build_classifier(
        &self,
        class_names: &[String],
        template: &str,
    ) -> Result<ClassifierMatrix> {
        if class_names.is_empty() {
            return Err(Error::Empty("class list"));
        }
        let seqs = self.prompt_tokens(class_names, template)?;
        Ok(ClassifierMatrix::new(self.encode_sequences(&seqs)?))
    }

    /// Predicted class per image under `classifier`.
    pub fn predict(&self, images: &[&Tensor], classifier: &ClassifierMatrix) -> Result<Vec<usize>> {
        let feats = self.encode_images(images)?;
        (0..feats.rows())
            .map(|r| classify(feats.row(r), classifier).map(|p| p.class))
            .collect()
    }

    /// Top-1 accuracy (fraction) of zero-shot classification of the given
    /// samples among `class_ids`, using `template` for the class prompts.
    pub fn zero_shot_accuracy(
        &self,
        ds: &MultimodalDataset,
        class_ids: &[u32],
        indices: &[usize],
        template: &str,
    ) -> Result<f64> {
        let names = class_ids
            .iter()
            .map(|&id| {
                ds.class_index(id)
                    .map(|i| ds.classes[i].name.clone())
                    .ok_or_else(|| Error::Config(format!("{}: unknown class {id}", ds.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = self.build_classifier(&names, template)?;
        let images: Vec<&Tensor> = indices.iter().map(|&i| &ds.samples[i].tokens).collect();
        let predicted = self.predict(&images, &classifier)?;
        let labels = indices
            .iter()
            .map(|&i| {
                let id = ds.samples[i].class_id;
                class_ids
                    .iter()
                    .position(|&c| c == id)
                    .ok_or_else(|| Error::Config(format!("sample {i} is outside the class list")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(top1(&predicted, &labels))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            embed_dim: 4,
            n_layers: 2,
            mlp_dim: 12,
            image_tokens: 4,
            max_text_tokens: 6,
            init_temperature: 1.0 / 0.07,
            init_seed: 3,
        }
    }

    pub(crate) fn tiny_model() -> MiniClipModel {
        let vocab = Vocabulary::build(
            ["a photo of a {class}", "{class}"],
            ["cat", "dog", "bird", "red fox"],
        );
        MiniClipModel::new(tiny_config(), vocab).unwrap()
    }

    pub(crate) fn grid(seed: u64, cfg: &ModelConfig) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(cfg.image_tokens, cfg.hidden_dim, |_, _| {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn image_embeddings_are_unit_and_deterministic() {
        let m = tiny_model();
        for s in 0..5 {
            let g = grid(s, &m.config);
            let a = m.encode_image(&g).unwrap();
            let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(a, m.encode_image(&g).unwrap());
        }
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = tiny_model();
        let gs: Vec<Tensor> = (0..3).map(|s| grid(s, &m.config)).collect();
        let refs: Vec<&Tensor> = gs.iter().collect();
        let batch = m.encode_images(&refs).unwrap();
        for (i, g) in gs.iter().enumerate() {
            let single = m.encode_image(g).unwrap();
            for (a, b) in batch.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_grid_shape_is_rejected() {
        let m = tiny_model();
        let bad = Tensor::zeros(&[3, 8]);
        assert!(matches!(m.encode_image(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn classifier_rows_are_unit_and_follow_class_order() {
        let m = tiny_model();
        let names: Vec<String> = ["cat", "dog", "red fox"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let w = m.build_classifier(&names, "a photo of a {class}").unwrap();
        assert_eq!(w.weights.shape(), &[3, 4]);
        for r in 0..3 {
            let n: f64 = w.weights.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let perm: Vec<String> = vec![names[2].clone(), names[0].clone(), names[1].clone()];
        let wp = m.build_classifier(&perm, "a photo of a {class}").unwrap();
        for (pr, orig) in [(0, 2), (1, 0), (2, 1)] {
            assert_eq!(wp.weights.row(pr), w.weights.row(orig));
        }
        let one = m.build_classifier(&names[..1], "{class}").unwrap();
        assert_eq!(one.weights.shape(), &[1, 4]);
    }

    #[test]
    fn unknown_word_is_rejected() {
        let m = tiny_model();
        let err = m.build_classifier(&["wolf".to_string()], "a photo of a {class}");
        assert!(matches!(err, Err(Error::UnknownToken(_))));
    }

    #[test]
    fn classify_identity_and_ties() {
        let w = ClassifierMatrix::new(Tensor::identity(3));
        let p = classify(&[0.0, 1.0, 0.0], &w).unwrap();
        assert_eq!(p.logits, vec![0.0, 1.0, 0.0]);
        assert_eq!(p.class, 1);
        assert_eq!(classify(&[0.5, 0.5, 0.0], &w).unwrap().class, 0);
        assert!(classify(&[1.0, 0.0], &w).is_err());
    }

    #[test]
    fn classify_matches_naive_loop_and_is_scale_invariant() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let w = Tensor::from_fn(5, 7, |_, _| rng.random_range(-1.0..1.0));
            let f: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cls = ClassifierMatrix::new(w.clone());
            let p = classify(&f, &cls).unwrap();
            for i in 0..5 {
                let mut dot = 0.0;
                for j in 0..7 {
                    dot += f[j] * w.get(i, j);
                }
                assert!((p.logits[i] - dot).abs() < 1e-12);
            }
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<f64> = f.iter().map(|x| x * c).collect();
            assert_eq!(classify(&scaled, &cls).unwrap().class, p.class);
        }
    }
}
