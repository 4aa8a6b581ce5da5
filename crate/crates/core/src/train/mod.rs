//! Schedules, the optimizer and the adapter training loop.

mod pretrain;

pub use pretrain::{pretrain, PretrainConfig};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{balanced_batches, materialize, AugmentConfig, Dataset, GcdSplit};
use crate::error::{Error, Result};
use crate::eval::{bias_report, feature_similarity, gcd_accuracy};
use crate::losses::{
    alignment_vector, estimate_pi_v, total_loss, uniform_prior, Alignment, LossContext, LossValues,
    LossWeights,
};
use crate::model::{save_checkpoint, CheckpointMeta, Model, ParamStore};
use crate::rng::{stream_rng, streams};
use crate::tensor::{Tape, Tensor};

/// Cosine interpolation of the teacher temperature over the first epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl Default for TeacherSchedule {
    fn default() -> Self {
        TeacherSchedule {
            start: 0.07,
            end: 0.04,
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs before the alignment vector is estimated and applied.
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub teacher: TeacherSchedule,
    pub da_enabled: bool,
    /// Apply the alignment vector to logits instead of probabilities.
    pub logit_da: bool,
    /// Write a checkpoint every this many epochs; 0 keeps only the warm-up
    /// and final ones.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            epochs: 60,
            batch_size: 32,
            warmup_epochs: 30,
            momentum: 0.9,
            weight_decay: 5e-5,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            teacher: TeacherSchedule::default(),
            da_enabled: true,
            logit_da: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be >= 0", self.lr0)));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "need 0 < epochs ({}) and warmup_epochs ({}) <= epochs",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be even and >= 4",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        let t = &self.teacher;
        if !(t.start > 0.0 && t.end > 0.0) {
            return Err(Error::Config(
                "teacher temperatures must be positive".into(),
            ));
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi e / E)) / 2` with `lr_min = lr0 / 1000`.
pub fn cosine_lr(epoch: usize, lr0: f64, epochs: usize) -> f64 {
    let lr_min = lr0 / 1000.0;
    let t = epoch.min(epochs) as f64 / epochs.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

/// Teacher temperature: cosine from `start` to `end` over `epochs`, then flat.
pub fn teacher_temp(epoch: usize, s: &TeacherSchedule) -> f64 {
    if epoch >= s.epochs {
        return s.end;
    }
    let t = epoch as f64 / s.epochs as f64;
    s.end + 0.5 * (s.start - s.end) * (1.0 + (PI * t).cos())
}

/// Momentum buffers per trainable parameter.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v <- mu v + g; p <- p - lr (v + wd p)` on trainable parameters.
    /// Frozen parameters are never touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("sgd_step", p.shape(), g.shape()));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * (*vv + weight_decay * *pv);
            }
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub tau_t: f64,
    pub da_active: bool,
    pub loss: LossValues,
    pub acc_all: f64,
    pub acc_seen: f64,
    pub acc_novel: f64,
    pub predicted_seen_ratio: f64,
    pub sparsity: f64,
    pub similarity: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,tau_t,da_active,loss_total,loss_rep_u,loss_rep_s,loss_cls_u,loss_cls_s,entropy,acc_all,acc_seen,acc_novel,predicted_seen_ratio,sparsity,similarity";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.tau_t,
            u8::from(self.da_active),
            l.total,
            l.rep_u,
            l.rep_s,
            l.cls_u,
            l.cls_s,
            l.entropy,
            self.acc_all,
            self.acc_seen,
            self.acc_novel,
            self.predicted_seen_ratio,
            self.sparsity,
            self.similarity
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Snapshot evaluation of a model on the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub acc_all: f64,
    pub acc_seen: f64,
    pub acc_novel: f64,
    /// Over every sample, labeled and unlabeled.
    pub predicted_seen_ratio: f64,
    pub sparsity: f64,
    pub similarity: f64,
    pub predictions: Vec<usize>,
    pub features: Tensor,
}

/// Accuracy on the unlabeled pool, bias over the whole dataset, adapter
/// sparsity and similarity to `reference` features.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    split: &GcdSplit,
    tau_s: f64,
    reference: &Tensor,
) -> Result<Snapshot> {
    let inf = model.infer(&data.samples, Some(tau_s), 256)?;
    let pred = inf
        .argmax()
        .ok_or_else(|| Error::Config("model has no prototype head".into()))?;
    let seen = split.seen_mask();
    let upred: Vec<usize> = split.unlabeled.iter().map(|&i| pred[i]).collect();
    let utruth: Vec<usize> = split.unlabeled.iter().map(|&i| data.labels[i]).collect();
    let acc = gcd_accuracy(&upred, &utruth, &seen)?;
    let bias = bias_report(&pred, &seen)?;
    Ok(Snapshot {
        acc_all: acc.acc_all,
        acc_seen: acc.acc_seen,
        acc_novel: acc.acc_novel,
        predicted_seen_ratio: bias.predicted_seen_ratio,
        sparsity: inf.sparsity(),
        similarity: feature_similarity(reference, &inf.features)?,
        predictions: pred,
        features: inf.features,
    })
}

pub struct RunOutput {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// How often the alignment vector was estimated.
    pub pi_estimates: usize,
    pub pi: Option<Tensor>,
    pub final_eval: Snapshot,
}

/// Numeric failures mid-run are reported as divergence at their location.
fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Degenerate(d) | Error::Numeric(d) | Error::Precondition(d) => Error::Diverged {
            epoch,
            batch,
            detail: d,
        },
        other => other,
    }
}

fn ckpt(out: Option<&Path>, name: &str, model: &Model, seed: u64, epoch: usize) -> Result<()> {
    if let Some(dir) = out {
        save_checkpoint(&dir.join(name), model, &CheckpointMeta { seed, epoch })?;
    }
    Ok(())
}

/// Trains adapters, projection head and prototypes of `model` on `split`.
/// With `out`, writes `metrics.csv` one row per epoch plus checkpoints.
pub fn train_run(
    mut model: Model,
    data: &Dataset,
    split: &GcdSplit,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let k = model.head.num_classes;
    if split.num_classes() != k {
        return Err(Error::Config(format!(
            "split has {} classes, head has {k}",
            split.num_classes()
        )));
    }
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let reference = model.infer(&data.samples, None, 256)?.features;
    let mut sampler_rng = stream_rng(cfg.seed, streams::SAMPLER);
    let mut aug_rng = stream_rng(cfg.seed, streams::AUGMENT);
    let mut drop_rng = stream_rng(cfg.seed, streams::DROPOUT);
    let mut opt = Sgd::new();
    let mut align = Alignment::Off;
    let mut pi = None;
    let mut pi_estimates = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let w = &cfg.weights;

    for epoch in 0..cfg.epochs {
        if cfg.da_enabled && epoch == cfg.warmup_epochs {
            let pi_v = estimate_pi_v(&model, &data.samples, w.tau_s)?;
            let v = alignment_vector(&pi_v, &uniform_prior(k), w.s_d)?;
            align = if cfg.logit_da {
                Alignment::Logits(v.clone())
            } else {
                Alignment::Probs(v.clone())
            };
            pi = Some(v);
            pi_estimates += 1;
            ckpt(out, "warmup.ckpt", &model, cfg.seed, epoch)?;
        }
        let lr = cosine_lr(epoch, cfg.lr0, cfg.epochs);
        let tau_t = teacher_temp(epoch, &cfg.teacher);
        let plans = balanced_batches(split, cfg.batch_size, &mut sampler_rng)?;
        let mut sum = LossValues::default();
        for (b, plan) in plans.iter().enumerate() {
            let batch = materialize(data, plan, &cfg.augment, &mut aug_rng)?;
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let fwd = model
                .forward(&mut tape, &bind, &batch.tokens, Some(&mut drop_rng))
                .map_err(|e| diverged(e, epoch, b))?;
            let ctx = LossContext {
                weights: w,
                tau_t,
                align: &align,
                teacher: None,
            };
            let obj = total_loss(&mut tape, &model, &bind, fwd.h, &batch.labels, ctx)
                .map_err(|e| diverged(e, epoch, b))?;
            let v = obj.values;
            if !v.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss {v:?}"),
                });
            }
            if (v.total - v.recombine(w.lambda_sup)).abs() > 1e-12 * v.total.abs().max(1.0) {
                return Err(Error::Numeric(format!(
                    "loss components do not recombine: {v:?}"
                )));
            }
            tape.backward(obj.total)?;
            let grads = bind.grads(&tape, &model.params);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("non-finite gradient for {name}"),
                });
            }
            opt.step(
                &mut model.params,
                &grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            sum.total += v.total;
            sum.rep_u += v.rep_u;
            sum.rep_s += v.rep_s;
            sum.cls_u += v.cls_u;
            sum.cls_s += v.cls_s;
            sum.entropy += v.entropy;
        }
        let n = plans.len() as f64;
        let loss = LossValues {
            total: sum.total / n,
            rep_u: sum.rep_u / n,
            rep_s: sum.rep_s / n,
            cls_u: sum.cls_u / n,
            cls_s: sum.cls_s / n,
            entropy: sum.entropy / n,
        };
        let snap = evaluate(&model, data, split, w.tau_s, &reference)?;
        let row = EpochMetrics {
            epoch,
            lr,
            tau_t,
            da_active: !matches!(align, Alignment::Off),
            loss,
            acc_all: snap.acc_all,
            acc_seen: snap.acc_seen,
            acc_novel: snap.acc_novel,
            predicted_seen_ratio: snap.predicted_seen_ratio,
            sparsity: snap.sparsity,
            similarity: snap.similarity,
        };
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        metrics.push(row);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            ckpt(
                out,
                &format!("epoch_{:04}.ckpt", epoch + 1),
                &model,
                cfg.seed,
                epoch + 1,
            )?;
        }
    }
    ckpt(out, "final.ckpt", &model, cfg.seed, cfg.epochs)?;
    let final_eval = evaluate(&model, data, split, w.tau_s, &reference)?;
    Ok(RunOutput {
        model,
        metrics,
        pi_estimates,
        pi,
        final_eval,
    })
}

#[cfg(test)]
mod tests;
