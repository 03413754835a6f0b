//! Few-shot adapters on a frozen dual encoder: zero-shot, linear probe,
//! residual text classifier (RES), prompt token fusion (SEP) and their
//! combination (SEPRES).
//!
//! RES, SEP and SEPRES share one graph. Prompts are absent for RES, the
//! residual is pinned at zero for SEP, so each reduces to the others
//! bit-for-bit when its extra component is switched off.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::miniclip::top_tokens;

use crate::datagen::{FewShotEpisode, MultimodalDataset};
use crate::error::{shape_err, Error, Result};
use crate::miniclip::{fuse_prompt_tokens, MiniClipModel};
use crate::numerics::{log_sum_exp, Adam, Tape, Tensor, Var};
use crate::pretrain::EVAL_TEMPLATE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    ZeroShot,
    Linear,
    Res,
    Sep,
    SepRes,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Self::ZeroShot,
        Self::Linear,
        Self::Res,
        Self::Sep,
        Self::SepRes,
    ];

    fn uses_prompts(self) -> bool {
        matches!(self, Self::Sep | Self::SepRes)
    }

    fn trains_residual(self) -> bool {
        matches!(self, Self::Res | Self::SepRes)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ZeroShot => "zeroshot",
            Self::Linear => "linear",
            Self::Res => "res",
            Self::Sep => "sep",
            Self::SepRes => "sepres",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Prompt tokens per encoder; 0 disables prompting.
    pub n_prompts: usize,
    /// Residual scale.
    pub res_alpha: f64,
    pub omega_t: f64,
    pub omega_v: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub prompt_init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_prompts: 4,
            res_alpha: 0.1,
            omega_t: 1.0,
            omega_v: 1.0,
            learning_rate: 1e-2,
            epochs: 100,
            prompt_init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("res_alpha", self.res_alpha),
            ("learning_rate", self.learning_rate),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        if !(self.omega_t >= 0.0 && self.omega_v >= 0.0 && self.prompt_init_std >= 0.0) {
            return Err(Error::Config(
                "loss weights and prompt std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Trained adapter parameters; absent parts are not used by the method.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub method: Method,
    pub visual_prompt: Option<Tensor>,
    pub text_prompt: Option<Tensor>,
    /// `m × d`, starts at zero.
    pub residual: Option<Tensor>,
    /// `m × d` linear-probe classifier.
    pub linear: Option<Tensor>,
    pub res_alpha: f64,
    pub omega_t: f64,
    pub omega_v: f64,
    pub steps: usize,
}

impl AdapterState {
    /// Initial state for `method` over `m` classes.
    pub fn init(
        model: &MiniClipModel,
        method: Method,
        m: usize,
        cfg: &AdapterConfig,
        seed: u64,
    ) -> Result<Self> {
        let (dh, de) = (model.config.hidden_dim, model.config.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, cfg.prompt_init_std).map_err(|e| Error::Config(e.to_string()))?;
        let prompt =
            |rng: &mut ChaCha8Rng| Tensor::from_fn(cfg.n_prompts, dh, |_, _| normal.sample(rng));
        let with_prompts = method.uses_prompts() && cfg.n_prompts > 0;
        let visual_prompt = with_prompts.then(|| prompt(&mut rng));
        let text_prompt = with_prompts.then(|| prompt(&mut rng));
        let residual = matches!(method, Method::Res | Method::Sep | Method::SepRes)
            .then(|| Tensor::zeros(&[m, de]));
        let linear = (method == Method::Linear).then(|| Tensor::zeros(&[m, de]));
        Ok(Self {
            method,
            visual_prompt,
            text_prompt,
            residual,
            linear,
            res_alpha: cfg.res_alpha,
            omega_t: cfg.omega_t,
            omega_v: cfg.omega_v,
            steps: 0,
        })
    }

    /// Prompt rows per encoder.
    pub fn n_prompts(&self) -> usize {
        self.visual_prompt.as_ref().map_or(0, Tensor::rows)
    }
}

/// Token fusion: the top `n_p` content tokens attend to the prompt rows,
/// `softmax(Z̃ᵥ·Zₚᵀ/√D)·Z̃ᵥ`.
pub fn tfm(content: &Tensor, prompts: &Tensor) -> Result<Tensor> {
    let (n_c, d) = content.dims2();
    let (n_p, dp) = prompts.dims2();
    if d != dp {
        return shape_err("tfm", format!("token widths {d} and {dp}"));
    }
    let mut rows = content.data().to_vec();
    rows.extend_from_slice(prompts.data());
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::matrix(n_c + n_p, d, rows)?);
    let out = fuse_prompt_tokens(&mut tape, z, &[(0, n_c)], n_p)?;
    let out = tape.slice_rows(out, n_c, n_c + n_p)?;
    Ok(tape.value(out).clone())
}

/// `W_sep + α·Y`, without renormalizing rows.
pub fn sepres_classifier(w_sep: &Tensor, residual: &Tensor, alpha: f64) -> Result<Tensor> {
    if w_sep.dims2() != residual.dims2() {
        return shape_err(
            "sepres_classifier",
            format!("{:?} vs {:?}", w_sep.shape(), residual.shape()),
        );
    }
    let mut out = w_sep.as_matrix();
    out.data_mut()
        .iter_mut()
        .zip(residual.data())
        .for_each(|(w, y)| *w += alpha * y);
    Ok(out)
}

fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn mean_ce(g: &Tensor, w: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let logits = g.matmul(&w.transpose())?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|x| x * tau).collect();
        total += log_sum_exp(&row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// The knowledge-guided SEPRES objective on plain tensors:
/// `CE(τ·G_sep·W_sepresᵀ) + ω_t·MSE(W_clip, W_sepres) + ω_v·MSE(G_sep, G_clip)
/// + CE(τ·G_clip·W_sepresᵀ)`, cross-entropies averaged over rows.
#[allow(clippy::too_many_arguments)]
pub fn sepres_loss(
    g_sep: &Tensor,
    g_clip: &Tensor,
    w_sepres: &Tensor,
    w_clip: &Tensor,
    labels: &[usize],
    tau: f64,
    omega_t: f64,
    omega_v: f64,
) -> Result<f64> {
    let m = w_sepres.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::OutOfRange {
            what: "classes",
            index: bad,
            len: m,
        });
    }
    if g_sep.dims2() != g_clip.dims2()
        || w_sepres.dims2() != w_clip.dims2()
        || g_sep.rows() != labels.len()
    {
        return shape_err("sepres_loss", "operand shapes disagree");
    }
    Ok(mean_ce(g_sep, w_sepres, labels, tau)?
        + omega_t * mean_sq_diff(w_clip, w_sepres)
        + omega_v * mean_sq_diff(g_sep, g_clip)
        + mean_ce(g_clip, w_sepres, labels, tau)?)
}

/// Records the SEPRES objective; `tau` is a 1×1 var.
#[allow(clippy::too_many_arguments)]
pub fn sepres_loss_var(
    tape: &mut Tape,
    g_sep: Var,
    g_clip: Var,
    w_sepres: Var,
    w_clip: Var,
    labels: &[usize],
    tau: Var,
    omega_t: f64,
    omega_v: f64,
) -> Result<Var> {
    let s1 = tape.matmul_t(g_sep, w_sepres)?;
    let l1 = tape.scale_by(s1, tau)?;
    let ce1 = tape.cross_entropy(l1, labels.to_vec())?;
    let kt = tape.mse(w_clip, w_sepres)?;
    let kt = tape.scale(kt, omega_t)?;
    let kv = tape.mse(g_sep, g_clip)?;
    let kv = tape.scale(kv, omega_v)?;
    let s2 = tape.matmul_t(g_clip, w_sepres)?;
    let l2 = tape.scale_by(s2, tau)?;
    let ce2 = tape.cross_entropy(l2, labels.to_vec())?;
    let a = tape.add(ce1, kt)?;
    let b = tape.add(kv, ce2)?;
    tape.add(a, b)
}

/// Enhanced embeddings of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedEmbeddings {
    /// Image embeddings with prompts (`B × d`).
    pub g_sep: Tensor,
    /// Class prompt embeddings with prompts (`m × d`).
    pub w_sep: Tensor,
    /// `W_sep + α·Y`.
    pub w_sepres: Tensor,
}

/// Frozen-model inputs of an episode: class prompt token sequences and
/// the base embeddings.
struct Frozen {
    prompts: Vec<Vec<usize>>,
    w_clip: Tensor,
}

impl Frozen {
    fn new(model: &MiniClipModel, class_names: &[String]) -> Result<Self> {
        let prompts = model.prompt_tokens(class_names, EVAL_TEMPLATE)?;
        let w_clip = model.encode_sequences(&prompts)?;
        Ok(Self { prompts, w_clip })
    }
}

/// Handles of the trainable leaves on a tape.
struct Leaves {
    visual: Option<Var>,
    text: Option<Var>,
    residual: Option<Var>,
    linear: Option<Var>,
}

fn bind_state(tape: &mut Tape, state: &AdapterState, trainable: bool) -> Leaves {
    let mut leaf = |t: &Option<Tensor>, train: bool| {
        t.as_ref().map(|t| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    };
    let residual_trains = trainable && state.method.trains_residual();
    Leaves {
        visual: leaf(&state.visual_prompt, trainable),
        text: leaf(&state.text_prompt, trainable),
        residual: leaf(&state.residual, residual_trains),
        linear: leaf(&state.linear, trainable),
    }
}

/// Graph nodes of the shared RES/SEP/SEPRES path.
struct Forward {
    g_sep: Var,
    g_clip: Var,
    w_sep: Var,
    w_clip: Var,
    w_sepres: Var,
}

fn forward(
    tape: &mut Tape,
    model: &MiniClipModel,
    state: &AdapterState,
    leaves: &Leaves,
    frozen: &Frozen,
    images: &[&Tensor],
    g_clip: &Tensor,
) -> Result<Forward> {
    let base = model.params.bind(tape, false);
    let g_clip = tape.constant(g_clip.clone());
    let w_clip = tape.constant(frozen.w_clip.clone());
    let g_sep = match leaves.visual {
        Some(q) => model.image_features(tape, &base, images, Some(q))?,
        None => g_clip,
    };
    let w_sep = match leaves.text {
        Some(p) => model.text_features(tape, &base, &frozen.prompts, Some(p))?,
        None => w_clip,
    };
    let w_sepres = match leaves.residual {
        Some(y) => {
            let ay = tape.scale(y, state.res_alpha)?;
            tape.add(w_sep, ay)?
        }
        None => w_sep,
    };
    Ok(Forward {
        g_sep,
        g_clip,
        w_sep,
        w_clip,
        w_sepres,
    })
}

/// Enhanced embeddings of `images` under `state` for the given classes.
pub fn sep_forward(
    model: &MiniClipModel,
    state: &AdapterState,
    images: &[&Tensor],
    class_names: &[String],
) -> Result<EnhancedEmbeddings> {
    let frozen = Frozen::new(model, class_names)?;
    let g_clip = model.encode_images(images)?;
    let mut tape = Tape::new();
    let leaves = bind_state(&mut tape, state, false);
    let f = forward(&mut tape, model, state, &leaves, &frozen, images, &g_clip)?;
    Ok(EnhancedEmbeddings {
        g_sep: tape.value(f.g_sep).clone(),
        w_sep: tape.value(f.w_sep).clone(),
        w_sepres: tape.value(f.w_sepres).clone(),
    })
}

const EVAL_CHUNK: usize = 64;

/// Classification logits `G·Wᵀ` of `images` under a trained adapter.
pub fn adapter_logits(
    model: &MiniClipModel,
    state: &AdapterState,
    images: &[&Tensor],
    class_names: &[String],
) -> Result<Tensor> {
    let frozen = Frozen::new(model, class_names)?;
    let m = frozen.w_clip.rows();
    let mut data = Vec::with_capacity(images.len() * m);
    for chunk in images.chunks(EVAL_CHUNK) {
        let g_clip = model.encode_images(chunk)?;
        let mut tape = Tape::new();
        let leaves = bind_state(&mut tape, state, false);
        let logits = match leaves.linear {
            Some(w) => {
                let g = tape.constant(g_clip);
                tape.matmul_t(g, w)?
            }
            None => {
                let f = forward(&mut tape, model, state, &leaves, &frozen, chunk, &g_clip)?;
                tape.matmul_t(f.g_sep, f.w_sepres)?
            }
        };
        data.extend_from_slice(tape.value(logits).data());
    }
    Tensor::matrix(images.len(), m, data)
}

/// Gradients of the training objective for each trainable part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterGradients {
    pub visual_prompt: Option<Tensor>,
    pub text_prompt: Option<Tensor>,
    /// Present only for methods that train the residual.
    pub residual: Option<Tensor>,
    pub linear: Option<Tensor>,
}

/// The training objective over one support set, with the frozen base
/// embeddings computed once. The linear probe minimizes
/// `CE(τ·G_clip·Wᵀ)`; the other methods minimize [`sepres_loss`].
pub struct AdapterObjective<'a> {
    model: &'a MiniClipModel,
    images: Vec<&'a Tensor>,
    labels: Vec<usize>,
    frozen: Frozen,
    g_clip: Tensor,
}

impl<'a> AdapterObjective<'a> {
    pub fn new(
        model: &'a MiniClipModel,
        images: Vec<&'a Tensor>,
        labels: Vec<usize>,
        class_names: &[String],
    ) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(
                "one label per support image is required".into(),
            ));
        }
        let frozen = Frozen::new(model, class_names)?;
        let g_clip = model.encode_images(&images)?;
        Ok(Self {
            model,
            images,
            labels,
            frozen,
            g_clip,
        })
    }

    pub fn evaluate(&self, state: &AdapterState) -> Result<(f64, AdapterGradients)> {
        let mut tape = Tape::new();
        let leaves = bind_state(&mut tape, state, true);
        let scale = tape.constant(Tensor::scalar(self.model.temperature()));
        let loss = match leaves.linear {
            Some(w) => {
                let g = tape.constant(self.g_clip.clone());
                let s = tape.matmul_t(g, w)?;
                let logits = tape.scale_by(s, scale)?;
                tape.cross_entropy(logits, self.labels.clone())?
            }
            None => {
                let f = forward(
                    &mut tape,
                    self.model,
                    state,
                    &leaves,
                    &self.frozen,
                    &self.images,
                    &self.g_clip,
                )?;
                sepres_loss_var(
                    &mut tape,
                    f.g_sep,
                    f.g_clip,
                    f.w_sepres,
                    f.w_clip,
                    &self.labels,
                    scale,
                    state.omega_t,
                    state.omega_v,
                )?
            }
        };
        let value = tape.value(loss).data()[0];
        let grads = tape.backward_scalar(loss)?;
        let get = |v: Option<Var>| v.map(|v| grads.get(v));
        Ok((
            value,
            AdapterGradients {
                visual_prompt: get(leaves.visual),
                text_prompt: get(leaves.text),
                residual: get(leaves.residual.filter(|_| state.method.trains_residual())),
                linear: get(leaves.linear),
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: AdapterState,
    /// Query accuracy as a fraction.
    pub query_accuracy: f64,
    pub query_predictions: Vec<usize>,
    /// Training loss per epoch.
    pub losses: Vec<f64>,
    /// Dataset indices whose embeddings entered a gradient computation.
    pub consumed: Vec<usize>,
}

/// Trains `method` on the episode's support set with full-batch Adam steps
/// (one per epoch) and scores the query set. The base model is only read.
pub fn fit_adapter(
    model: &MiniClipModel,
    ds: &MultimodalDataset,
    episode: &FewShotEpisode,
    method: Method,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<FitResult> {
    if episode.support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    cfg.validate()?;
    let names = episode.class_names(ds);
    let m = names.len();
    if method.uses_prompts() && cfg.n_prompts > model.config.image_tokens {
        return Err(Error::Config(format!(
            "{} prompt tokens exceed the {} image tokens",
            cfg.n_prompts, model.config.image_tokens
        )));
    }
    let mut state = AdapterState::init(model, method, m, cfg, seed)?;
    let mut losses = Vec::new();
    let mut consumed = Vec::new();

    if method != Method::ZeroShot {
        let support: Vec<&Tensor> = episode
            .support
            .iter()
            .map(|&i| &ds.samples[i].tokens)
            .collect();
        let objective =
            AdapterObjective::new(model, support, episode.labels(ds, &episode.support), &names)?;
        let mut adam = Adam::new(cfg.learning_rate);
        consumed.extend_from_slice(&episode.support);
        for _ in 0..cfg.epochs {
            let (value, grads) = objective.evaluate(&state)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step: state.steps });
            }
            losses.push(value);
            let mut params: Vec<&mut Tensor> = Vec::new();
            let mut g: Vec<Tensor> = Vec::new();
            let slots = [
                (grads.visual_prompt, &mut state.visual_prompt),
                (grads.text_prompt, &mut state.text_prompt),
                (grads.residual, &mut state.residual),
                (grads.linear, &mut state.linear),
            ];
            for (grad, slot) in slots {
                if let (Some(gr), Some(t)) = (grad, slot.as_mut()) {
                    g.push(gr);
                    params.push(t);
                }
            }
            if params.is_empty() {
                break;
            }
            adam.step(&mut params, &g);
            state.steps += 1;
        }
    }

    let query: Vec<&Tensor> = episode
        .query
        .iter()
        .map(|&i| &ds.samples[i].tokens)
        .collect();
    let logits = adapter_logits(model, &state, &query, &names)?;
    let query_predictions: Vec<usize> = (0..logits.rows())
        .map(|r| crate::numerics::argmax(logits.row(r)))
        .collect();
    let query_labels = episode.labels(ds, &episode.query);
    let query_accuracy = crate::divergence::accuracy(&query_predictions, &query_labels)?;
    Ok(FitResult {
        state,
        query_accuracy,
        query_predictions,
        losses,
        consumed,
    })
}
