use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, Sgd};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self_sup_contrastive, ContrastiveMode};
use crate::model::{HeadConfig, Model};
use crate::rng::{stream_rng, streams};
use crate::tensor::{Tape, Tensor};

/// Self-supervised training of the backbone before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            temperature: 0.2,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// Trains every backbone parameter of `model` plus a temporary projection
/// head with the self-supervised contrastive loss over all samples, ignoring
/// labels. Returns the backbone frozen, without heads or adapters.
pub fn pretrain(mut model: Model, data: &Dataset, cfg: &PretrainConfig) -> Result<Model> {
    if cfg.batch_size < 2 || !(cfg.temperature > 0.0) {
        return Err(Error::Config(
            "pretraining needs batch_size >= 2 and a positive temperature".into(),
        ));
    }
    model.drop_adapters();
    model.params.set_trainable("backbone.", true);
    let head = model.head.clone();
    let tmp = HeadConfig {
        num_classes: 1,
        ..head.clone()
    };
    model.attach_heads(&tmp, cfg.seed ^ 0x5eed)?;
    model.params.set_trainable("head.prototypes", false);

    let mut rng = stream_rng(cfg.seed, streams::PRETRAIN);
    let mut opt = Sgd::new();
    let n = data.len();
    let (tl, td) = (data.spec.token_len, data.spec.token_dim);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cosine_lr(epoch, cfg.lr0, cfg.epochs);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut first = Vec::new();
            let mut second = Vec::new();
            for &i in chunk {
                augment(data.samples.row(i), td, &cfg.augment, &mut rng, &mut first);
                augment(data.samples.row(i), td, &cfg.augment, &mut rng, &mut second);
            }
            first.extend(second);
            let tokens = Tensor::new(vec![2 * chunk.len() * tl, td], first)?;
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let fwd = model.forward(&mut tape, &bind, &tokens, None)?;
            let z = model.project(&mut tape, &bind, fwd.h)?;
            let m = chunk.len();
            let z1 = tape.gather_rows(z, (0..m).collect())?;
            let z2 = tape.gather_rows(z, (m..2 * m).collect())?;
            let loss = self_sup_contrastive(
                &mut tape,
                z1,
                z2,
                cfg.temperature,
                ContrastiveMode::Standard,
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("pretraining loss {value}"),
                });
            }
            tape.backward(loss)?;
            let grads = bind.grads(&tape, &model.params);
            opt.step(
                &mut model.params,
                &grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
    }
    model.drop_heads();
    model.head = head;
    model.freeze_backbone();
    Ok(model)
}
