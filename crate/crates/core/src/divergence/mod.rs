//! Dataset similarity (kernel MMD, proxy-A distance, taxonomy distance),
//! similarity-weighted knowledge loss and top-1 accuracy.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{taxonomy_distance, MultimodalDataset, Split};
use crate::error::{shape_err, Error, Result};
use crate::miniclip::MiniClipModel;
use crate::numerics::Tensor;
use crate::pretrain::EVAL_TEMPLATE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    /// V-statistic; exactly zero for identical samples.
    Biased,
    /// U-statistic; unbiased, may dip below zero.
    Unbiased,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean(a: &Tensor, b: &Tensor, gamma: f64, skip_diagonal: bool) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            if skip_diagonal && i == j {
                continue;
            }
            total += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    let count = if skip_diagonal { n * (m - 1) } else { n * m };
    total / count as f64
}

/// Squared MMD with the RBF kernel `exp(−‖x−y‖²/(2σ²))`.
pub fn mmd2(a: &Tensor, b: &Tensor, sigma: f64, estimator: MmdEstimator) -> Result<f64> {
    let (n, da) = a.dims2();
    let (m, db) = b.dims2();
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mmd sample"));
    }
    if da != db {
        return shape_err("mmd2", format!("widths {da} and {db}"));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let unbiased = estimator == MmdEstimator::Unbiased && n >= 2 && m >= 2;
    let kxx = kernel_mean(a, a, gamma, unbiased);
    let kyy = kernel_mean(b, b, gamma, unbiased);
    let kxy = kernel_mean(a, b, gamma, false);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Median pairwise Euclidean distance over the pooled rows; 1 when every
/// pair coincides.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|r| a.row(r))
        .chain((0..b.rows()).map(|r| b.row(r)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the permutation null.
    pub threshold: f64,
    pub reject: bool,
}

/// Two-sample permutation test of the unbiased MMD statistic at the 5%
/// level, with the median-heuristic bandwidth of the pooled sample.
pub fn permutation_test(
    a: &Tensor,
    b: &Tensor,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if permutations == 0 {
        return Err(Error::Config(
            "permutation test needs at least one permutation".into(),
        ));
    }
    let sigma = median_bandwidth(a, b);
    let statistic = mmd2(a, b, sigma, MmdEstimator::Unbiased)?;
    let n = a.rows();
    let pooled: Vec<Vec<f64>> = (0..a.rows())
        .map(|r| a.row(r).to_vec())
        .chain((0..b.rows()).map(|r| b.row(r).to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let x = Tensor::from_rows(
            &order[..n]
                .iter()
                .map(|&i| pooled[i].clone())
                .collect::<Vec<_>>(),
        )?;
        let y = Tensor::from_rows(
            &order[n..]
                .iter()
                .map(|&i| pooled[i].clone())
                .collect::<Vec<_>>(),
        )?;
        null.push(mmd2(&x, &y, sigma, MmdEstimator::Unbiased)?);
    }
    null.sort_by(f64::total_cmp);
    let k = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    let threshold = null[k];
    Ok(PermutationTest {
        statistic,
        threshold,
        reject: statistic > threshold,
    })
}

fn image_embeddings(ds: &MultimodalDataset, model: &MiniClipModel) -> Result<Tensor> {
    let idx = ds.indices(Split::Test);
    let images: Vec<&Tensor> = idx.iter().map(|&i| &ds.samples[i].tokens).collect();
    model.encode_images(&images)
}

fn prompt_embeddings(ds: &MultimodalDataset, model: &MiniClipModel) -> Result<Tensor> {
    Ok(model
        .build_classifier(&ds.class_names(), EVAL_TEMPLATE)?
        .weights)
}

/// Mean of the image-embedding MMD² (test splits) and the class-prompt
/// text-embedding MMD², each with its own median bandwidth.
pub fn unified_mmd(
    a: &MultimodalDataset,
    b: &MultimodalDataset,
    model: &MiniClipModel,
    estimator: MmdEstimator,
) -> Result<f64> {
    let (ia, ib) = (image_embeddings(a, model)?, image_embeddings(b, model)?);
    let (ta, tb) = (prompt_embeddings(a, model)?, prompt_embeddings(b, model)?);
    let image = mmd2(&ia, &ib, median_bandwidth(&ia, &ib), estimator)?;
    let text = mmd2(&ta, &tb, median_bandwidth(&ta, &tb), estimator)?;
    Ok(0.5 * (image + text))
}

const PAD_STEPS: usize = 200;
const PAD_LR: f64 = 1.0;
const PAD_MIN_SAMPLES: usize = 20;

/// Proxy-A distance between two feature samples: a logistic domain
/// classifier is trained by full-batch gradient descent on a random 80%
/// split and `max(0, 2(1 − 2ε))` is reported for its held-out error `ε`.
pub fn pad_features(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    if a.rows() < PAD_MIN_SAMPLES || b.rows() < PAD_MIN_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "proxy-A distance needs {PAD_MIN_SAMPLES} samples per domain, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return shape_err("pad", format!("widths {} and {}", a.cols(), b.cols()));
    }
    let d = a.cols();
    let mut items: Vec<(&[f64], f64)> = (0..a.rows())
        .map(|r| (a.row(r), 0.0))
        .chain((0..b.rows()).map(|r| (b.row(r), 1.0)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train = items.len() * 4 / 5;
    let (train, test) = items.split_at(n_train);
    if test.is_empty() || train.iter().all(|x| x.1 == train[0].1) {
        return Err(Error::InsufficientSamples(
            "degenerate proxy-A split".into(),
        ));
    }
    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    for _ in 0..PAD_STEPS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in train {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias;
            let r = sigmoid(z) - y;
            gw.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g += r * xi);
            gb += r;
        }
        let scale = PAD_LR / train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= scale * g);
        bias -= scale * gb;
    }
    let errors = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias;
            (z > 0.0) != (*y > 0.5)
        })
        .count();
    let eps = errors as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).max(0.0))
}

/// Proxy-A distance on test-split image embeddings.
pub fn pad(
    a: &MultimodalDataset,
    b: &MultimodalDataset,
    model: &MiniClipModel,
    seed: u64,
) -> Result<f64> {
    pad_features(
        &image_embeddings(a, model)?,
        &image_embeddings(b, model)?,
        seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Mmd,
    Pad,
    Taxonomy,
    Uniform,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [Self::Mmd, Self::Pad, Self::Taxonomy, Self::Uniform];
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mmd => "mmd",
            Self::Pad => "pad",
            Self::Taxonomy => "taxonomy",
            Self::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown weight scheme {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub scheme: WeightScheme,
    pub weights: Vec<f64>,
    /// Set when every distance was zero and uniform weights were used.
    pub fell_back: bool,
}

impl SimilarityWeights {
    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_distances(WeightScheme::Uniform, &vec![1.0; n])
    }

    /// `w_i = d_i / Σ d_j`, with negative distances clipped to zero.
    pub fn from_distances(scheme: WeightScheme, distances: &[f64]) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::Empty("validation sets"));
        }
        if distances.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite { op: "weights" });
        }
        let clipped: Vec<f64> = distances.iter().map(|d| d.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        let n = distances.len() as f64;
        if total <= 0.0 {
            return Ok(Self {
                scheme,
                weights: vec![1.0 / n; distances.len()],
                fell_back: scheme != WeightScheme::Uniform,
            });
        }
        Ok(Self {
            scheme,
            weights: clipped.iter().map(|d| d / total).collect(),
            fell_back: false,
        })
    }
}

/// Distance from the unlearned dataset to each validation set under
/// `scheme`, normalized into weights.
pub fn compute_weights(
    unlearned: &MultimodalDataset,
    validation: &[&MultimodalDataset],
    scheme: WeightScheme,
    model: &MiniClipModel,
    seed: u64,
) -> Result<SimilarityWeights> {
    let distances = validation
        .iter()
        .map(|v| match scheme {
            WeightScheme::Mmd => unified_mmd(unlearned, v, model, MmdEstimator::Unbiased),
            WeightScheme::Pad => pad(unlearned, v, model, seed),
            WeightScheme::Taxonomy => taxonomy_distance(unlearned, v),
            WeightScheme::Uniform => Ok(1.0),
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityWeights::from_distances(scheme, &distances)
}

/// Total knowledge lost: `Σ w_i · loss_i`.
pub fn tkl(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return shape_err(
            "tkl",
            format!("{} losses for {} weights", losses.len(), weights.len()),
        );
    }
    if losses.is_empty() {
        return Err(Error::Empty("validation sets"));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Top-1 accuracy as a fraction.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if predicted.len() != labels.len() {
        return shape_err(
            "accuracy",
            format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            ),
        );
    }
    Ok(crate::miniclip::top1(predicted, labels))
}

/// Zero-shot accuracy (fraction) on a dataset's test split over all of its
/// classes.
pub fn zero_shot_test_accuracy(model: &MiniClipModel, ds: &MultimodalDataset) -> Result<f64> {
    let ids: Vec<u32> = ds.classes.iter().map(|c| c.id).collect();
    model.zero_shot_accuracy(ds, &ids, &ds.indices(Split::Test), EVAL_TEMPLATE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetKnowledge {
    pub set: String,
    /// Accuracy in percent.
    pub acc_before: f64,
    pub acc_after: f64,
}

impl SetKnowledge {
    /// Accuracy reduction in points.
    pub fn knowledge_lost(&self) -> f64 {
        self.acc_before - self.acc_after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub sets: Vec<SetKnowledge>,
    pub tkl: Vec<(WeightScheme, f64)>,
}

impl KnowledgeReport {
    pub fn new(sets: Vec<SetKnowledge>, weights: &[SimilarityWeights]) -> Result<Self> {
        let losses: Vec<f64> = sets.iter().map(SetKnowledge::knowledge_lost).collect();
        let tkl = weights
            .iter()
            .map(|w| Ok((w.scheme, self::tkl(&losses, &w.weights)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sets, tkl })
    }

    pub fn tkl_for(&self, scheme: WeightScheme) -> Option<f64> {
        self.tkl.iter().find(|(s, _)| *s == scheme).map(|(_, v)| *v)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["set", "acc_before", "acc_after", "knowledge_lost"])?;
        for s in &self.sets {
            w.write_record([
                s.set.clone(),
                format!("{:.3}", s.acc_before),
                format!("{:.3}", s.acc_after),
                format!("{:.3}", s.knowledge_lost()),
            ])?;
        }
        for (scheme, v) in &self.tkl {
            w.write_record([
                format!("tkl_{scheme}"),
                String::new(),
                String::new(),
                format!("{v:.3}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Tensor {
        let g = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(n, d, |_, _| g.sample(rng) + shift)
    }

    /// Kernel-sum oracle written out term by term.
    fn naive_mmd(a: &Tensor, b: &Tensor, sigma: f64, unbiased: bool) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x[i] - y[i]).powi(2);
            }
            (-s / (2.0 * sigma * sigma)).exp()
        };
        let (n, m) = (a.rows(), b.rows());
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if !(unbiased && i == j) {
                    xx += k(a.row(i), a.row(j));
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if !(unbiased && i == j) {
                    yy += k(b.row(i), b.row(j));
                }
            }
        }
        for i in 0..n {
            for j in 0..m {
                xy += k(a.row(i), b.row(j));
            }
        }
        let (nn, mm) = if unbiased {
            ((n * (n - 1)) as f64, (m * (m - 1)) as f64)
        } else {
            ((n * n) as f64, (m * m) as f64)
        };
        xx / nn + yy / mm - 2.0 * xy / (n * m) as f64
    }

    #[test]
    fn identical_samples_have_zero_biased_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(&mut rng, 6, 3, 0.0);
        assert_eq!(mmd2(&a, &a, 1.3, MmdEstimator::Biased).unwrap(), 0.0);
    }

    #[test]
    fn single_points_closed_form() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let sigma: f64 = 1.5;
        let expect = 2.0 - 2.0 * (-8.0 / (2.0 * sigma * sigma)).exp();
        assert!((mmd2(&x, &y, sigma, MmdEstimator::Biased).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn matches_kernel_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = gaussian(&mut rng, 5, 4, 0.0);
            let b = gaussian(&mut rng, 5, 4, 0.5);
            let s = rng.random_range(0.5..3.0);
            for (est, ub) in [
                (MmdEstimator::Biased, false),
                (MmdEstimator::Unbiased, true),
            ] {
                assert!((mmd2(&a, &b, s, est).unwrap() - naive_mmd(&a, &b, s, ub)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_or_bad_bandwidth_is_rejected() {
        let a = Tensor::identity(2);
        assert!(mmd2(&a, &a, 0.0, MmdEstimator::Biased).is_err());
    }

    #[test]
    fn permutation_test_is_calibrated_and_powerful() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut accepted = 0;
        for rep in 0..20 {
            let a = gaussian(&mut rng, 20, 2, 0.0);
            let b = gaussian(&mut rng, 20, 2, 0.0);
            if !permutation_test(&a, &b, 200, rep).unwrap().reject {
                accepted += 1;
            }
        }
        assert!(accepted >= 18, "accepted {accepted} of 20");
        let a = gaussian(&mut rng, 20, 2, 0.0);
        let b = gaussian(&mut rng, 20, 2, 2.0);
        assert!(permutation_test(&a, &b, 200, 0).unwrap().reject);
    }

    #[test]
    fn pad_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(&mut rng, 40, 3, -5.0);
        let b = gaussian(&mut rng, 40, 3, 5.0);
        assert_eq!(pad_features(&a, &b, 0).unwrap(), 2.0);
        let c = gaussian(&mut rng, 100, 3, 0.0);
        let d = gaussian(&mut rng, 100, 3, 0.0);
        let p = pad_features(&c, &d, 0).unwrap();
        assert!((0.0..=0.6).contains(&p), "pad {p}");
        assert!(pad_features(&gaussian(&mut rng, 5, 3, 0.0), &d, 0).is_err());
    }

    #[test]
    fn pad_is_reproducible_across_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 1000, 3, 0.0);
        let b = gaussian(&mut rng, 1000, 3, 0.7);
        let vals: Vec<f64> = (0..5).map(|s| pad_features(&a, &b, s).unwrap()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(vals.iter().all(|v| (0.0..=2.0).contains(v)));
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!(
            hi - mean <= 0.2 + 1e-12 && mean - lo <= 0.2 + 1e-12,
            "{vals:?}"
        );
    }

    #[test]
    fn weight_examples() {
        let u = SimilarityWeights::uniform(5).unwrap();
        assert!(u.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        let w = SimilarityWeights::from_distances(WeightScheme::Mmd, &[1.0, 3.0]).unwrap();
        assert_eq!(w.weights, vec![0.25, 0.75]);
        let single = SimilarityWeights::from_distances(WeightScheme::Pad, &[0.3]).unwrap();
        assert_eq!(single.weights, vec![1.0]);
        let zero = SimilarityWeights::from_distances(WeightScheme::Pad, &[0.0, 0.0]).unwrap();
        assert!(zero.fell_back);
        assert_eq!(zero.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn tkl_examples() {
        assert_eq!(tkl(&[2.0, 4.0], &[0.5, 0.5]).unwrap(), 3.0);
        assert_eq!(tkl(&[2.0, 4.0], &[0.25, 0.75]).unwrap(), 3.5);
        assert_eq!(tkl(&[0.0, 0.0], &[0.1, 0.9]).unwrap(), 0.0);
        assert!(tkl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        assert_eq!(accuracy(&[3; 12], &labels).unwrap(), 0.25);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let sets = vec![
            SetKnowledge {
                set: "a".into(),
                acc_before: 90.0,
                acc_after: 88.0,
            },
            SetKnowledge {
                set: "b".into(),
                acc_before: 80.0,
                acc_after: 76.0,
            },
        ];
        let w = [
            SimilarityWeights::uniform(2).unwrap(),
            SimilarityWeights::from_distances(WeightScheme::Mmd, &[1.0, 3.0]).unwrap(),
        ];
        let r = KnowledgeReport::new(sets, &w).unwrap();
        assert_eq!(r.tkl_for(WeightScheme::Uniform), Some(3.0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "set,acc_before,acc_after,knowledge_lost\na,90.000,88.000,2.000\nb,80.000,76.000,4.000\n\
             tkl_uniform,,,3.000\ntkl_mmd,,,3.500\n"
        );
    }
}
