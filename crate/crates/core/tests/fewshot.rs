//! Adapter reduction identities, loss oracles and gradient checks.

mod common;

use common::*;
use unlearn_lab::datagen::{sample_episode, FewShotEpisode, MultimodalDataset};
use unlearn_lab::fewshot::{
    adapter_logits, fit_adapter, sep_forward, sepres_classifier, sepres_loss, tfm, top_tokens,
    AdapterConfig, AdapterObjective, AdapterState, Method,
};
use unlearn_lab::miniclip::MiniClipModel;
use unlearn_lab::numerics::{log_sum_exp, Tensor};
use unlearn_lab::pretrain::{pretrain, EVAL_TEMPLATE};

struct Fixture {
    datasets: Vec<MultimodalDataset>,
    model: MiniClipModel,
}

impl Fixture {
    fn new() -> Self {
        let datasets = tiny_datasets();
        let model = tiny_model(&datasets);
        Self { datasets, model }
    }

    fn ds(&self) -> &MultimodalDataset {
        &self.datasets[0]
    }

    fn episode(&self, shots: usize) -> FewShotEpisode {
        sample_episode(self.ds(), self.ds().classes.len(), shots, 3).unwrap()
    }

    fn query_logits(&self, state: &AdapterState, ep: &FewShotEpisode) -> Tensor {
        let query: Vec<&Tensor> = ep
            .query
            .iter()
            .map(|&i| &self.ds().samples[i].tokens)
            .collect();
        adapter_logits(&self.model, state, &query, &ep.class_names(self.ds())).unwrap()
    }

    fn fit(&self, method: Method, cfg: &AdapterConfig) -> Tensor {
        let ep = self.episode(2);
        let fit = fit_adapter(&self.model, self.ds(), &ep, method, cfg, 8).unwrap();
        self.query_logits(&fit.state, &ep)
    }
}

fn short(n_prompts: usize) -> AdapterConfig {
    AdapterConfig {
        n_prompts,
        epochs: 4,
        ..AdapterConfig::default()
    }
}

#[test]
fn sepres_without_residual_scale_equals_sep() {
    let fx = Fixture::new();
    let cfg = AdapterConfig {
        res_alpha: 0.0,
        ..short(2)
    };
    let sep = fx.fit(Method::Sep, &cfg);
    assert_eq!(fx.fit(Method::SepRes, &cfg), sep);
    assert_ne!(sep, fx.fit(Method::ZeroShot, &cfg));
}

#[test]
fn sepres_without_prompts_equals_res() {
    let fx = Fixture::new();
    let res = fx.fit(Method::Res, &short(0));
    assert_eq!(fx.fit(Method::SepRes, &short(0)), res);
    assert_ne!(res, fx.fit(Method::ZeroShot, &short(0)));
}

#[test]
fn sep_without_prompts_equals_zero_shot() {
    let fx = Fixture::new();
    let zs = fx.fit(Method::ZeroShot, &short(0));
    assert_eq!(fx.fit(Method::Sep, &short(0)), zs);

    let ep = fx.episode(1);
    let fit = fit_adapter(&fx.model, fx.ds(), &ep, Method::ZeroShot, &short(0), 0).unwrap();
    let classifier = fx
        .model
        .build_classifier(&ep.class_names(fx.ds()), EVAL_TEMPLATE)
        .unwrap();
    let query: Vec<&Tensor> = ep
        .query
        .iter()
        .map(|&i| &fx.ds().samples[i].tokens)
        .collect();
    let predicted = fx.model.predict(&query, &classifier).unwrap();
    assert_eq!(fit.query_predictions, predicted);
    assert!(fit.consumed.is_empty());
}

#[test]
fn untrained_sepres_equals_untrained_sep() {
    let fx = Fixture::new();
    let ep = fx.episode(1);
    let m = ep.classes.len();
    let cfg = short(2);
    let sep = AdapterState::init(&fx.model, Method::Sep, m, &cfg, 4).unwrap();
    let sepres = AdapterState::init(&fx.model, Method::SepRes, m, &cfg, 4).unwrap();
    assert!(sepres
        .residual
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .all(|&y| y == 0.0));
    assert_eq!(fx.query_logits(&sep, &ep), fx.query_logits(&sepres, &ep));
}

#[test]
fn prompts_change_embeddings_and_zero_prompts_do_not() {
    let fx = Fixture::new();
    let ep = fx.episode(1);
    let names = ep.class_names(fx.ds());
    let images: Vec<&Tensor> = ep
        .support
        .iter()
        .map(|&i| &fx.ds().samples[i].tokens)
        .collect();
    let m = names.len();
    let plain = AdapterState::init(&fx.model, Method::SepRes, m, &short(0), 0).unwrap();
    let e = sep_forward(&fx.model, &plain, &images, &names).unwrap();
    assert_eq!(e.g_sep, fx.model.encode_images(&images).unwrap());
    assert_eq!(
        e.w_sep,
        fx.model
            .build_classifier(&names, EVAL_TEMPLATE)
            .unwrap()
            .weights
    );

    let mut prompted = AdapterState::init(&fx.model, Method::SepRes, m, &short(2), 0).unwrap();
    prompted.residual = Some(Tensor::from_fn(m, fx.model.config.embed_dim, |r, c| {
        (r + 2 * c) as f64 * 0.1
    }));
    let e = sep_forward(&fx.model, &prompted, &images, &names).unwrap();
    assert!(
        e.g_sep
            .max_abs_diff(&fx.model.encode_images(&images).unwrap())
            > 0.0
    );
    let expected = sepres_classifier(
        &e.w_sep,
        prompted.residual.as_ref().unwrap(),
        prompted.res_alpha,
    )
    .unwrap();
    assert_eq!(e.w_sepres, expected);
}

#[test]
fn fitting_leaves_the_base_model_untouched() {
    let fx = Fixture::new();
    let before = fx.model.params.clone();
    let ep = fx.episode(2);
    for method in Method::ALL {
        let fit = fit_adapter(&fx.model, fx.ds(), &ep, method, &short(2), 1).unwrap();
        if method != Method::ZeroShot {
            let mut consumed = fit.consumed.clone();
            consumed.sort_unstable();
            let mut support = ep.support.clone();
            support.sort_unstable();
            assert_eq!(consumed, support, "{method}");
            assert!(fit.consumed.iter().all(|i| !ep.query.contains(i)));
            assert_eq!(fit.losses.len(), 4);
        }
    }
    assert_eq!(fx.model.params, before);
}

fn fd_gradient(
    objective: &AdapterObjective,
    state: &AdapterState,
    pick: impl Fn(&mut AdapterState) -> &mut Tensor,
) -> Tensor {
    let mut probe = state.clone();
    let n = pick(&mut probe).len();
    let mut out = vec![0.0; n];
    for (j, slot) in out.iter_mut().enumerate() {
        let theta = pick(&mut probe).data()[j];
        let h = 1e-4 * (1.0 + theta.abs());
        pick(&mut probe).data_mut()[j] = theta + h;
        let plus = objective.evaluate(&probe).unwrap().0;
        pick(&mut probe).data_mut()[j] = theta - h;
        let minus = objective.evaluate(&probe).unwrap().0;
        pick(&mut probe).data_mut()[j] = theta;
        *slot = (plus - minus) / (2.0 * h);
    }
    let shape = pick(&mut probe).shape().to_vec();
    Tensor::new(shape, out).unwrap()
}

#[test]
fn sepres_gradients_match_finite_differences() {
    let fx = Fixture::new();
    let ep = fx.episode(2);
    let images: Vec<&Tensor> = ep
        .support
        .iter()
        .map(|&i| &fx.ds().samples[i].tokens)
        .collect();
    let objective = AdapterObjective::new(
        &fx.model,
        images,
        ep.labels(fx.ds(), &ep.support),
        &ep.class_names(fx.ds()),
    )
    .unwrap();
    let m = ep.classes.len();
    let mut state = AdapterState::init(
        &fx.model,
        Method::SepRes,
        m,
        &AdapterConfig {
            prompt_init_std: 0.5,
            ..short(2)
        },
        2,
    )
    .unwrap();
    state.residual = Some(Tensor::from_fn(m, fx.model.config.embed_dim, |r, c| {
        ((r * 7 + c * 3) % 5) as f64 * 0.2 - 0.4
    }));
    let (_, grads) = objective.evaluate(&state).unwrap();
    let checks: [(&str, Tensor, Tensor); 3] = [
        (
            "visual prompt",
            grads.visual_prompt.unwrap(),
            fd_gradient(&objective, &state, |s| s.visual_prompt.as_mut().unwrap()),
        ),
        (
            "text prompt",
            grads.text_prompt.unwrap(),
            fd_gradient(&objective, &state, |s| s.text_prompt.as_mut().unwrap()),
        ),
        (
            "residual",
            grads.residual.unwrap(),
            fd_gradient(&objective, &state, |s| s.residual.as_mut().unwrap()),
        ),
    ];
    for (name, analytic, numeric) in checks {
        let worst = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
    }
}

fn naive_ce(g: &Tensor, w: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..w.rows())
            .map(|k| {
                tau * (0..g.cols())
                    .map(|c| g.get(i, c) * w.get(k, c))
                    .sum::<f64>()
            })
            .collect();
        total += log_sum_exp(&logits) - logits[y];
    }
    total / labels.len() as f64
}

fn naive_mse(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            s += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    s / a.len() as f64
}

#[test]
fn sepres_loss_matches_term_by_term_oracle() {
    let mut r = rng(5);
    let (g_sep, g_clip) = (random_grid(&mut r, 6, 4), random_grid(&mut r, 6, 4));
    let (w_sepres, w_clip) = (random_grid(&mut r, 3, 4), random_grid(&mut r, 3, 4));
    let labels = [0, 2, 1, 1, 0, 2];
    let (tau, wt, wv) = (3.5, 0.7, 1.3);
    let oracle = naive_ce(&g_sep, &w_sepres, &labels, tau)
        + wt * naive_mse(&w_clip, &w_sepres)
        + wv * naive_mse(&g_sep, &g_clip)
        + naive_ce(&g_clip, &w_sepres, &labels, tau);
    let got = sepres_loss(&g_sep, &g_clip, &w_sepres, &w_clip, &labels, tau, wt, wv).unwrap();
    assert!((got - oracle).abs() < 1e-10);

    let two_ce =
        naive_ce(&g_sep, &w_sepres, &labels, tau) + naive_ce(&g_clip, &w_sepres, &labels, tau);
    let switched_off =
        sepres_loss(&g_sep, &g_clip, &w_sepres, &w_clip, &labels, tau, 0.0, 0.0).unwrap();
    assert!((switched_off - two_ce).abs() < 1e-10);

    let base = sepres_loss(&g_clip, &g_clip, &w_clip, &w_clip, &labels, tau, 5.0, 9.0).unwrap();
    assert_eq!(base, 2.0 * naive_ce(&g_clip, &w_clip, &labels, tau));

    assert!(sepres_loss(
        &g_sep,
        &g_clip,
        &w_sepres,
        &w_clip,
        &[0, 3, 1, 1, 0, 2],
        tau,
        wt,
        wv
    )
    .is_err());
}

#[test]
fn tfm_matches_softmax_matmul_oracle() {
    let mut r = rng(13);
    let zv = random_grid(&mut r, 5, 3);
    let zp = random_grid(&mut r, 2, 3);
    let picked = top_tokens(&zv, 2).unwrap();
    let out = tfm(&zv, &zp).unwrap();
    for i in 0..2 {
        // Row i of the score matrix pairs selected token i with every prompt.
        let scores: Vec<f64> = (0..2)
            .map(|k| {
                (0..3)
                    .map(|c| zv.get(picked[i], c) * zp.get(k, c))
                    .sum::<f64>()
                    / 3f64.sqrt()
            })
            .collect();
        let lse = log_sum_exp(&scores);
        for c in 0..3 {
            let expected: f64 = picked
                .iter()
                .zip(&scores)
                .map(|(&k, s)| (s - lse).exp() * zv.get(k, c))
                .sum();
            assert!((out.get(i, c) - expected).abs() < 1e-10);
        }
    }
    let tokens = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(top_tokens(&tokens, 1).unwrap(), vec![1]);
    assert_eq!(top_tokens(&tokens, 3).unwrap(), vec![0, 1, 2]);
    assert!(top_tokens(&tokens, 4).is_err());
}

#[test]
fn linear_probe_beats_chance_on_a_trained_model() {
    let datasets = tiny_datasets();
    let (model, _) = pretrain(&datasets, &tiny_pretrain(200)).unwrap();
    let ds = &datasets[2];
    let ep = sample_episode(ds, ds.classes.len(), 5, 0).unwrap();
    let fit = fit_adapter(
        &model,
        ds,
        &ep,
        Method::Linear,
        &AdapterConfig::default(),
        0,
    )
    .unwrap();
    assert!(
        fit.query_accuracy > 1.0 / ds.classes.len() as f64 + 0.2,
        "{}",
        fit.query_accuracy
    );
}

#[test]
fn bad_requests_are_rejected() {
    let fx = Fixture::new();
    let mut ep = fx.episode(1);
    assert!(fit_adapter(&fx.model, fx.ds(), &ep, Method::Sep, &short(9), 0).is_err());
    let negative = AdapterConfig {
        learning_rate: -1.0,
        ..short(1)
    };
    assert!(fit_adapter(&fx.model, fx.ds(), &ep, Method::Res, &negative, 0).is_err());
    ep.support.clear();
    assert!(fit_adapter(&fx.model, fx.ds(), &ep, Method::Res, &short(1), 0).is_err());
}
