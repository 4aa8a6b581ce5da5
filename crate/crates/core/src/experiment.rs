//! End-to-end runs: data, split, pretrained backbone, adapter training, and
//! sweeps over one adapter or alignment setting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::data::{generate, make_split, Dataset, GcdSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{cluster_accuracy, kmeans, EvalReport};
use crate::model::{AdapterConfig, BackboneConfig, HeadConfig, Model};
use crate::train::{pretrain, train_run, PretrainConfig, RunOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub labeled_fraction: f64,
    pub split_seed: u64,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticSpec::default(),
            labeled_fraction: 0.5,
            split_seed: 0,
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.adapter.validate(&self.backbone)?;
        self.train.validate()?;
        if self.backbone.token_dim != self.data.token_dim
            || self.backbone.content_tokens() != self.data.token_len
        {
            return Err(Error::Config(format!(
                "backbone expects {} tokens of width {}, data has {} of width {}",
                self.backbone.content_tokens(),
                self.backbone.token_dim,
                self.data.token_len,
                self.data.token_dim
            )));
        }
        if self.head.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "head has {} prototypes for {} classes",
                self.head.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a run shares with its siblings: the dataset, the split and the
/// frozen backbone.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    pub split: GcdSplit,
    pub backbone: Model,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let split = make_split(
        &data,
        cfg.data.num_seen,
        cfg.labeled_fraction,
        cfg.split_seed,
    )?;
    let mut fresh = Model::new_backbone(&cfg.backbone, cfg.pretrain.seed)?;
    fresh.head = cfg.head.clone();
    let backbone = pretrain(fresh, &data, &cfg.pretrain)?;
    Ok(Prepared {
        data,
        split,
        backbone,
    })
}

/// Frozen backbone plus fresh zero-output adapters and heads.
pub fn adapted_model(backbone: &Model, cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut m = backbone.clone();
    m.freeze_backbone();
    m.attach_adapters(&cfg.adapter, seed)?;
    m.attach_heads(&cfg.head, seed)?;
    Ok(m)
}

pub fn run_seed(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunOutput> {
    let model = adapted_model(&prep.backbone, cfg, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    train_run(model, &prep.data, &prep.split, &train, out)
}

/// k-means on frozen features of the unlabeled pool, scored with a single
/// global matching.
pub fn kmeans_baseline(
    model: &Model,
    data: &Dataset,
    split: &GcdSplit,
    seed: u64,
) -> Result<EvalReport> {
    let ids = &split.unlabeled;
    let samples = data.samples.gather_rows(ids);
    let feats = model.infer(&samples, None, 256)?.features;
    let km = kmeans(&feats, split.num_classes(), seed)?;
    let truth: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
    cluster_accuracy(&km.labels, &truth, &split.seen_mask())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Activation,
    /// Adapter scale `s_a`.
    Scale,
    /// Bottleneck width.
    Bottleneck,
    /// Number of adapted top blocks.
    Blocks,
    /// Alignment strength `s_d`.
    AlignStrength,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Activation => "activation",
            Axis::Scale => "s_a",
            Axis::Bottleneck => "d_hat",
            Axis::Blocks => "n",
            Axis::AlignStrength => "s_d",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Axis::Activation),
            "s_a" | "scale" => Ok(Axis::Scale),
            "d_hat" | "bottleneck" => Ok(Axis::Bottleneck),
            "n" | "blocks" => Ok(Axis::Blocks),
            "s_d" => Ok(Axis::AlignStrength),
            _ => Err(Error::Config(format!(
                "unknown axis `{s}` (activation, s_a, d_hat, n, s_d)"
            ))),
        }
    }
}

impl Axis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {self} value `{value}`")))
        };
        let int = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {self} value `{value}`")))
        };
        match self {
            Axis::Activation => cfg.adapter.activation = value.parse::<ActivationKind>()?,
            Axis::Scale => cfg.adapter.scale = num()?,
            Axis::Bottleneck => cfg.adapter.bottleneck_dim = int()?,
            Axis::Blocks => cfg.adapter.adapted_blocks = int()?,
            Axis::AlignStrength => cfg.train.weights.s_d = num()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "a sweep needs at least one value and one seed".into(),
            ));
        }
        Ok(())
    }
}

pub const PRESETS: [&str; 7] = [
    "alpha",
    "threshold",
    "beta",
    "scale",
    "bottleneck",
    "blocks",
    "s_d",
];

/// Shipped sweeps over the activation family parameters, adapter geometry
/// and alignment strength, on seeds 0, 1 and 2.
pub fn preset(name: &str, num_blocks: usize) -> Option<SweepSpec> {
    let tagged =
        |tag: &str, xs: &[&str]| xs.iter().map(|x| format!("{tag}:{x}")).collect::<Vec<_>>();
    let plain = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let (axis, values) = match name {
        "alpha" => (
            Axis::Activation,
            tagged("leaky_relu", &["0", "0.01", "0.5", "0.99", "1"]),
        ),
        "threshold" => (
            Axis::Activation,
            tagged("threshold_relu", &["-2", "-1", "0", "1", "2"]),
        ),
        "beta" => (Axis::Activation, tagged("elu", &["0", "1", "2", "3"])),
        "scale" => (
            Axis::Scale,
            plain(&["0.01", "0.05", "0.1", "0.25", "0.5", "1"]),
        ),
        "bottleneck" => (Axis::Bottleneck, plain(&["2", "4", "8", "16", "32"])),
        "blocks" => (
            Axis::Blocks,
            (0..=num_blocks).map(|n| n.to_string()).collect(),
        ),
        "s_d" => (Axis::AlignStrength, plain(&["0.1", "0.2", "0.3", "0.4"])),
        _ => return None,
    };
    Some(SweepSpec {
        axis,
        values,
        seeds: vec![0, 1, 2],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub seed: u64,
    pub acc_all: f64,
    pub acc_seen: f64,
    pub acc_novel: f64,
    pub sparsity: f64,
    pub similarity: f64,
}

pub const SWEEP_HEADER: &str = "axis_value,seed,acc_all,acc_seen,acc_novel,sparsity,similarity";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.axis_value, r.seed, r.acc_all, r.acc_seen, r.acc_novel, r.sparsity, r.similarity
        ));
    }
    s
}

/// Runs every (value, seed) pair on `workers` threads against one shared
/// backbone. Rows come back in value-major, seed-minor order whatever the
/// completion order. With `out`, each run writes into
/// `out/<axis>=<value>/seed_<seed>/`.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    workers: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let configs = spec
        .values
        .iter()
        .map(|v| spec.axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let prep = prepare(base)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let value = &spec.values[v];
                let dir = out.map(|o| {
                    o.join(format!("{}={}", spec.axis, value))
                        .join(format!("seed_{seed}"))
                });
                let run = run_seed(&prep, &configs[v], seed, dir.as_deref())?;
                let e = &run.final_eval;
                Ok(SweepRow {
                    axis_value: value.clone(),
                    seed,
                    acc_all: e.acc_all,
                    acc_seen: e.acc_seen,
                    acc_novel: e.acc_novel,
                    sparsity: e.sparsity,
                    similarity: e.similarity,
                })
            })
            .collect()
    })
}
