//! Synthetic token datasets, the labeled/unlabeled split, two-view
//! augmentation and the balanced sampler.
//!
//! A sample is a `token_len x token_dim` matrix flattened row-major. The class
//! token is not part of a sample; the model prepends it.

mod io;

pub use io::{load_dataset, save_dataset};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

/// Rejection attempts per prototype before giving up.
const MAX_REJECTIONS: usize = 1000;

/// Expected pairwise prototype distance, in units of `class_separation`.
const PROTOTYPE_SPREAD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_seen: usize,
    pub samples_per_class: usize,
    pub token_len: usize,
    pub token_dim: usize,
    /// Minimum Frobenius distance between class prototypes.
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            num_seen: 5,
            samples_per_class: 100,
            token_len: 8,
            token_dim: 16,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_seen == 0 || self.num_seen >= self.num_classes {
            return Err(Error::Config(format!(
                "num_seen {} must lie in [1, {})",
                self.num_seen, self.num_classes
            )));
        }
        if self.samples_per_class == 0 || self.token_len == 0 || self.token_dim == 0 {
            return Err(Error::Config("empty sample geometry".into()));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn sample_width(&self) -> usize {
        self.token_len * self.token_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// `[N, token_len * token_dim]`, class-major id order.
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Class prototypes with pairwise distance at least `class_separation`.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Tensor> {
    spec.validate()?;
    let width = spec.sample_width();
    let std = PROTOTYPE_SPREAD * spec.class_separation / (2.0 * width as f64).sqrt();
    let min_sq = spec.class_separation * spec.class_separation;
    let mut rng = stream_rng(spec.seed, streams::DATA);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for k in 0..spec.num_classes {
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let cand: Vec<f64> = (0..width)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if rows.iter().all(|r| sq_dist(r, &cand) >= min_sq) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(c) => rows.push(c),
            None => {
                return Err(Error::Generation(format!(
                    "no prototype for class {k} at separation {} after {MAX_REJECTIONS} draws",
                    spec.class_separation
                )))
            }
        }
    }
    Tensor::from_rows(&rows)
}

/// Samples are prototype plus isotropic Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let protos = prototypes(spec)?;
    let mut rng = stream_rng(spec.seed, streams::DATA + 100);
    let width = spec.sample_width();
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            for &c in protos.row(k) {
                data.push(c + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples: Tensor::new(vec![n, width], data)?,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcdSplit {
    pub seen_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// `(sample id, label)`, labels drawn from the seen classes only.
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

impl GcdSplit {
    pub fn num_classes(&self) -> usize {
        self.seen_classes.len() + self.novel_classes.len()
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_classes()];
        for &c in &self.seen_classes {
            m[c] = true;
        }
        m
    }

    /// Every sample id, labeled first.
    pub fn all_ids(&self) -> Vec<usize> {
        self.labeled
            .iter()
            .map(|&(i, _)| i)
            .chain(self.unlabeled.iter().copied())
            .collect()
    }

    /// Ground-truth share of seen-class samples in the unlabeled pool.
    pub fn prior_seen_ratio(&self, labels: &[usize]) -> f64 {
        let seen = self.seen_mask();
        let n = self.unlabeled.iter().filter(|&&i| seen[labels[i]]).count();
        n as f64 / self.unlabeled.len().max(1) as f64
    }

    /// Ground-truth share of seen-class samples over the whole dataset.
    pub fn dataset_seen_ratio(&self, labels: &[usize]) -> f64 {
        let seen = self.seen_mask();
        labels.iter().filter(|&&y| seen[y]).count() as f64 / labels.len().max(1) as f64
    }
}

/// The first `num_seen` classes of a seeded shuffle are seen;
/// `labeled_fraction` of each seen class is labeled and everything else is
/// unlabeled.
pub fn make_split(
    data: &Dataset,
    num_seen: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<GcdSplit> {
    let k = data.spec.num_classes;
    if num_seen == 0 || num_seen >= k {
        return Err(Error::Config(format!(
            "num_seen {num_seen} must lie in [1, {k})"
        )));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction {labeled_fraction} outside (0, 1)"
        )));
    }
    let mut rng = stream_rng(seed, streams::SPLIT);
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut seen_classes = classes[..num_seen].to_vec();
    let mut novel_classes = classes[num_seen..].to_vec();
    seen_classes.sort_unstable();
    novel_classes.sort_unstable();

    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut labeled = Vec::new();
    let mut is_labeled = vec![false; data.len()];
    for &c in &seen_classes {
        let mut ids = by_class[c].clone();
        ids.shuffle(&mut rng);
        let take = (labeled_fraction * ids.len() as f64).round() as usize;
        let mut chosen = ids[..take].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            is_labeled[i] = true;
            labeled.push((i, c));
        }
    }
    let unlabeled = (0..data.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(GcdSplit {
        seen_classes,
        novel_classes,
        labeled,
        unlabeled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of additive jitter.
    pub sigma: f64,
    /// Probability of zeroing each content token.
    pub p_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma: 0.5,
            p_drop: 0.15,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// One augmented view: jitter every entry, then zero whole tokens.
pub fn augment(
    sample: &[f64],
    token_dim: usize,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) {
    for token in sample.chunks(token_dim) {
        let drop = aug.p_drop > 0.0 && rng.gen::<f64>() < aug.p_drop;
        for &v in token {
            let jitter = if aug.sigma > 0.0 {
                aug.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out.push(if drop { 0.0 } else { v + jitter });
        }
    }
}

/// Two independent augmentations of one sample.
pub fn two_views(
    sample: &[f64],
    token_dim: usize,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(sample.len());
    let mut b = Vec::with_capacity(sample.len());
    augment(sample, token_dim, aug, rng, &mut a);
    augment(sample, token_dim, aug, rng, &mut b);
    (a, b)
}

/// Sample ids of one batch, labeled half first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batches per epoch: `ceil(max(|D_l|, |D_u|) / (B / 2))`.
pub fn epoch_len(split: &GcdSplit, batch: usize) -> usize {
    let half = batch / 2;
    split
        .labeled
        .len()
        .max(split.unlabeled.len())
        .div_ceil(half)
}

/// Draws `n` items: a reshuffled cycle through `pool` when it is the larger
/// pool, otherwise uniform draws with replacement.
fn draw<T: Copy>(pool: &[T], n: usize, cycle: bool, rng: &mut ChaCha8Rng) -> Vec<T> {
    if cycle {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut order = pool.to_vec();
            order.shuffle(rng);
            out.extend(order.into_iter().take(n - out.len()));
        }
        out
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// One epoch of batches holding exactly `batch / 2` labeled and `batch / 2`
/// unlabeled samples each. The smaller pool is oversampled with replacement.
pub fn balanced_batches(
    split: &GcdSplit,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchPlan>> {
    if batch < 2 || batch % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size {batch} must be even and >= 2"
        )));
    }
    if split.labeled.is_empty() || split.unlabeled.is_empty() {
        return Err(Error::Config(
            "balanced sampling needs both pools non-empty".into(),
        ));
    }
    let half = batch / 2;
    let n = epoch_len(split, batch);
    let larger = split.labeled.len().max(split.unlabeled.len());
    let labeled = draw(&split.labeled, n * half, split.labeled.len() == larger, rng);
    let unlabeled = draw(
        &split.unlabeled,
        n * half,
        split.unlabeled.len() == larger,
        rng,
    );
    Ok((0..n)
        .map(|b| BatchPlan {
            labeled: labeled[b * half..(b + 1) * half].to_vec(),
            unlabeled: unlabeled[b * half..(b + 1) * half].to_vec(),
        })
        .collect())
}

/// Augmented tokens for a batch plan: all first views, then all second views,
/// as `[2 * B * token_len, token_dim]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Tensor,
    /// Per sample of one view; `None` for unlabeled rows.
    pub labels: Vec<Option<usize>>,
}

pub fn materialize(
    data: &Dataset,
    plan: &BatchPlan,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let td = data.spec.token_dim;
    let ids: Vec<usize> = plan
        .labeled
        .iter()
        .map(|&(i, _)| i)
        .chain(plan.unlabeled.iter().copied())
        .collect();
    let labels = plan
        .labeled
        .iter()
        .map(|&(_, y)| Some(y))
        .chain(plan.unlabeled.iter().map(|_| None))
        .collect();
    let width = data.spec.sample_width();
    let mut first = Vec::with_capacity(ids.len() * width);
    let mut second = Vec::with_capacity(ids.len() * width);
    for &i in &ids {
        let s = data.samples.row(i);
        augment(s, td, aug, rng, &mut first);
        augment(s, td, aug, rng, &mut second);
    }
    first.extend(second);
    Ok(Batch {
        tokens: Tensor::new(vec![2 * ids.len() * data.spec.token_len, td], first)?,
        labels,
    })
}
