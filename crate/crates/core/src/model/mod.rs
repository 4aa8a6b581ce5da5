//! Toy pre-LN transformer backbone with parallel adapter branches next to
//! each MLP, a projection head for contrastive learning and a cosine
//! prototype classifier.
//!
//! Parameter names:
//!
//! ```text
//! backbone.embed.{weight,bias}         token embedding, d_in -> d
//! backbone.cls, backbone.pos           class token and positions
//! backbone.blocks.{i}.*                attention + MLP of block i
//! adapter.{i}.{ln,down,up}.*           adapter branch of block i
//! head.proj.{0,1,2}.{weight,bias}      projection MLP
//! head.prototypes                      K x d class prototypes
//! ```

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use params::{Bindings, Param, ParamStore};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::{zero_count, ActivationKind};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Class token plus content tokens.
    pub seq_len: usize,
    /// Width of each raw input token.
    pub token_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 2,
            mlp_hidden: 128,
            seq_len: 9,
            token_dim: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.num_blocks == 0 || self.mlp_hidden == 0 || self.token_dim == 0 {
            return Err(Error::Config(
                "num_blocks, mlp_hidden and token_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.seq_len - 1
    }

    /// Flattened width of one raw sample.
    pub fn sample_width(&self) -> usize {
        self.content_tokens() * self.token_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
    /// Residual scale of the branch output.
    pub scale: f64,
    pub activation: ActivationKind,
    /// Number of adapted blocks, counted from the top.
    pub adapted_blocks: usize,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            // d/8, the same bottleneck-to-width ratio as 96 on a 768-wide ViT.
            bottleneck_dim: 4,
            scale: 0.1,
            activation: ActivationKind::Linear,
            adapted_blocks: 4,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.bottleneck_dim == 0 || self.bottleneck_dim > backbone.embed_dim {
            return Err(Error::Config(format!(
                "bottleneck_dim {} must lie in [1, {}]",
                self.bottleneck_dim, backbone.embed_dim
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "adapter scale {} must be >= 0",
                self.scale
            )));
        }
        if self.adapted_blocks > backbone.num_blocks {
            return Err(Error::Config(format!(
                "adapted_blocks {} exceeds num_blocks {}",
                self.adapted_blocks, backbone.num_blocks
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.activation.validate()
    }

    /// Whether block `i` of `num_blocks` carries an adapter.
    pub fn is_adapted(&self, i: usize, num_blocks: usize) -> bool {
        i + self.adapted_blocks >= num_blocks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            proj_dim: 16,
            num_classes: 10,
        }
    }
}

/// Tunable parameter counts of an adapted model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub adapters: usize,
    pub projection_head: usize,
    pub prototypes: usize,
}

/// `(d * d_hat * 2 + d_hat + d + d * 2) * n`: two projections, their biases
/// and the adapter's own layer norm.
pub fn count_tunable_params(
    backbone: &BackboneConfig,
    adapter: &AdapterConfig,
    head: &HeadConfig,
) -> ParamCount {
    let d = backbone.embed_dim;
    let r = adapter.bottleneck_dim;
    let n = adapter.adapted_blocks;
    ParamCount {
        adapters: (d * r * 2 + r + d + d * 2) * n,
        projection_head: (d * d + d) * 2 + head.proj_dim * d + head.proj_dim,
        prototypes: head.num_classes * d,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `[out, in]` weight with fan-in uniform bound `1 / sqrt(in)`.
fn fan_in(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor {
    uniform(rng, &[out, inp], 1.0 / (inp as f64).sqrt())
}

fn block(i: usize, rest: &str) -> String {
    format!("backbone.blocks.{i}.{rest}")
}

fn adapter(i: usize, rest: &str) -> String {
    format!("adapter.{i}.{rest}")
}

/// Tape handles of one adapter branch.
#[derive(Clone, Copy, Debug)]
pub struct AdapterBranch {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

pub struct AdapterOutput {
    pub out: Var,
    /// Bottleneck after the activation, before dropout.
    pub bottleneck: Var,
}

impl AdapterBranch {
    pub fn from_bindings(bind: &Bindings, i: usize) -> Result<Self> {
        Ok(AdapterBranch {
            ln_gamma: bind.var(&adapter(i, "ln.gamma"))?,
            ln_beta: bind.var(&adapter(i, "ln.beta"))?,
            w_down: bind.var(&adapter(i, "down.weight"))?,
            b_down: bind.var(&adapter(i, "down.bias"))?,
            w_up: bind.var(&adapter(i, "up.weight"))?,
            b_up: bind.var(&adapter(i, "up.bias"))?,
        })
    }

    /// `act(LN(x) W_down^T + b_down) W_up^T + b_up`, with the activation
    /// skipped entirely for [`ActivationKind::Linear`] and dropout between the
    /// two projections when `dropout` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        kind: ActivationKind,
        x: Var,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<AdapterOutput> {
        let u = tape.layer_norm(x, self.ln_gamma, self.ln_beta, LN_EPS)?;
        let down = tape.linear(u, self.w_down, Some(self.b_down))?;
        let bottleneck = match kind {
            ActivationKind::Linear => down,
            k => tape.activation(down, k)?,
        };
        let dropped = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let shape = tape.value(bottleneck).shape().to_vec();
                let keep = 1.0 / (1.0 - rate);
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(bottleneck, m)?
            }
            _ => bottleneck,
        };
        let out = tape.linear(dropped, self.w_up, Some(self.b_up))?;
        Ok(AdapterOutput { out, bottleneck })
    }
}

/// Cosine similarity logits `(h/|h|) . (c_k/|c_k|) / tau`.
pub fn prototype_logits(tape: &mut Tape, h: Var, prototypes: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let hn = tape.l2_normalize(h)?;
    let cn = tape.l2_normalize(prototypes)?;
    let cos = tape.linear(hn, cn, None)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Softmax over cosine similarities to the prototypes.
pub fn prototype_probs(tape: &mut Tape, h: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let logits = prototype_logits(tape, h, prototypes, tau)?;
    tape.softmax(logits)
}

/// Output of a backbone pass.
pub struct Forward {
    /// Class-token features, `[batch, d]`.
    pub h: Var,
    /// Post-activation bottlenecks of the adapted blocks, bottom to top.
    pub bottlenecks: Vec<Var>,
}

/// Dataset-level inference results.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor,
    pub probs: Option<Tensor>,
    pub bottleneck_zeros: usize,
    pub bottleneck_total: usize,
}

impl Inference {
    /// Exact-zero fraction over all adapter bottleneck activations.
    pub fn sparsity(&self) -> f64 {
        if self.bottleneck_total == 0 {
            0.0
        } else {
            self.bottleneck_zeros as f64 / self.bottleneck_total as f64
        }
    }

    pub fn argmax(&self) -> Option<Vec<usize>> {
        self.probs.as_ref().map(argmax_rows)
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub head: HeadConfig,
    pub params: ParamStore,
}

impl Model {
    /// Freshly initialized, fully trainable backbone with no adapters and no
    /// heads.
    pub fn new_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, streams::BACKBONE_INIT);
        let (d, h, l) = (cfg.embed_dim, cfg.mlp_hidden, cfg.seq_len);
        let mut p = ParamStore::new();
        p.insert(
            "backbone.embed.weight",
            fan_in(&mut rng, d, cfg.token_dim),
            true,
        );
        p.insert("backbone.embed.bias", Tensor::zeros(&[d]), true);
        p.insert("backbone.cls", normal(&mut rng, &[d], 0.02), true);
        // Unit-scale positions: token slots carry the class signal, and near-zero
        // positions make attention average the slots away.
        p.insert("backbone.pos", normal(&mut rng, &[l, d], 1.0), true);
        for i in 0..cfg.num_blocks {
            p.insert(block(i, "ln1.gamma"), Tensor::full(&[d], 1.0), true);
            p.insert(block(i, "ln1.beta"), Tensor::zeros(&[d]), true);
            p.insert(
                block(i, "attn.qkv.weight"),
                fan_in(&mut rng, 3 * d, d),
                true,
            );
            p.insert(block(i, "attn.qkv.bias"), Tensor::zeros(&[3 * d]), true);
            p.insert(block(i, "attn.proj.weight"), fan_in(&mut rng, d, d), true);
            p.insert(block(i, "attn.proj.bias"), Tensor::zeros(&[d]), true);
            p.insert(block(i, "ln2.gamma"), Tensor::full(&[d], 1.0), true);
            p.insert(block(i, "ln2.beta"), Tensor::zeros(&[d]), true);
            p.insert(block(i, "mlp.fc1.weight"), fan_in(&mut rng, h, d), true);
            p.insert(block(i, "mlp.fc1.bias"), Tensor::zeros(&[h]), true);
            p.insert(block(i, "mlp.fc2.weight"), fan_in(&mut rng, d, h), true);
            p.insert(block(i, "mlp.fc2.bias"), Tensor::zeros(&[d]), true);
        }
        Ok(Model {
            backbone: cfg.clone(),
            adapter: AdapterConfig {
                adapted_blocks: 0,
                ..AdapterConfig::default()
            },
            head: HeadConfig::default(),
            params: p,
        })
    }

    pub fn freeze_backbone(&mut self) {
        self.params.set_trainable("backbone.", false);
    }

    pub fn drop_heads(&mut self) {
        self.params.remove_prefix("head.");
    }

    pub fn drop_adapters(&mut self) {
        self.params.remove_prefix("adapter.");
        self.adapter.adapted_blocks = 0;
    }

    /// Adds zero-output adapter branches to the top `adapted_blocks` blocks.
    /// The down projection is fan-in uniform; the up projection and its bias
    /// start at exactly zero.
    pub fn attach_adapters(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        cfg.validate(&self.backbone)?;
        self.drop_adapters();
        let mut rng = stream_rng(seed, streams::ADAPTER_INIT);
        let (d, r) = (self.backbone.embed_dim, cfg.bottleneck_dim);
        for i in 0..self.backbone.num_blocks {
            if !cfg.is_adapted(i, self.backbone.num_blocks) {
                continue;
            }
            self.params
                .insert(adapter(i, "ln.gamma"), Tensor::full(&[d], 1.0), true);
            self.params
                .insert(adapter(i, "ln.beta"), Tensor::zeros(&[d]), true);
            self.params
                .insert(adapter(i, "down.weight"), fan_in(&mut rng, r, d), true);
            self.params
                .insert(adapter(i, "down.bias"), Tensor::zeros(&[r]), true);
            self.params
                .insert(adapter(i, "up.weight"), Tensor::zeros(&[d, r]), true);
            self.params
                .insert(adapter(i, "up.bias"), Tensor::zeros(&[d]), true);
        }
        self.adapter = cfg.clone();
        Ok(())
    }

    /// Adds a projection MLP and randomly initialized prototypes.
    pub fn attach_heads(&mut self, cfg: &HeadConfig, seed: u64) -> Result<()> {
        if cfg.proj_dim == 0 || cfg.num_classes == 0 {
            return Err(Error::Config(
                "proj_dim and num_classes must be positive".into(),
            ));
        }
        self.drop_heads();
        let mut rng = stream_rng(seed, streams::HEAD_INIT);
        let d = self.backbone.embed_dim;
        let widths = [(d, d), (d, d), (cfg.proj_dim, d)];
        for (k, (out, inp)) in widths.into_iter().enumerate() {
            self.params.insert(
                format!("head.proj.{k}.weight"),
                fan_in(&mut rng, out, inp),
                true,
            );
            self.params
                .insert(format!("head.proj.{k}.bias"), Tensor::zeros(&[out]), true);
        }
        self.params.insert(
            "head.prototypes",
            normal(&mut rng, &[cfg.num_classes, d], 1.0),
            true,
        );
        self.head = cfg.clone();
        Ok(())
    }

    /// Backbone pass over `tokens`, a `[batch * (seq_len - 1), token_dim]`
    /// matrix of raw content tokens. The last block only computes the
    /// class-token rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        tokens: &Tensor,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let cfg = &self.backbone;
        let content = cfg.content_tokens();
        if tokens.shape().len() != 2
            || tokens.cols() != cfg.token_dim
            || tokens.rows() % content != 0
        {
            return Err(Error::dim(
                "backbone_forward",
                tokens.shape(),
                &[content, cfg.token_dim],
            ));
        }
        let batch = tokens.rows() / content;
        let l = cfg.seq_len;
        let x_in = tape.constant(tokens.clone());
        let emb = tape.linear(
            x_in,
            bind.var("backbone.embed.weight")?,
            Some(bind.var("backbone.embed.bias")?),
        )?;
        let mut x =
            tape.assemble_tokens(emb, bind.var("backbone.cls")?, bind.var("backbone.pos")?)?;
        let mut bottlenecks = Vec::new();
        for i in 0..cfg.num_blocks {
            let last = i + 1 == cfg.num_blocks;
            let ln1 = tape.layer_norm(
                x,
                bind.var(&block(i, "ln1.gamma"))?,
                bind.var(&block(i, "ln1.beta"))?,
                LN_EPS,
            )?;
            let qkv = tape.linear(
                ln1,
                bind.var(&block(i, "attn.qkv.weight"))?,
                Some(bind.var(&block(i, "attn.qkv.bias"))?),
            )?;
            let att = tape.attention(qkv, l, cfg.num_heads)?;
            let att = tape.linear(
                att,
                bind.var(&block(i, "attn.proj.weight"))?,
                Some(bind.var(&block(i, "attn.proj.bias"))?),
            )?;
            let mut xp = tape.add(x, att)?;
            if last {
                xp = tape.gather_rows(xp, (0..batch).map(|b| b * l).collect())?;
            }
            let adapter = if self.adapter.is_adapted(i, cfg.num_blocks) {
                Some(AdapterBranch::from_bindings(bind, i)?)
            } else {
                None
            };
            x = self.block_tail(
                tape,
                bind,
                i,
                xp,
                adapter.as_ref(),
                dropout.as_deref_mut(),
                &mut bottlenecks,
            )?;
        }
        Ok(Forward { h: x, bottlenecks })
    }

    /// `MLP(LN(x')) + x' + s_a * adapter(x')` for block `i`.
    #[allow(clippy::too_many_arguments)]
    fn block_tail(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        i: usize,
        xp: Var,
        adapter: Option<&AdapterBranch>,
        dropout: Option<&mut ChaCha8Rng>,
        bottlenecks: &mut Vec<Var>,
    ) -> Result<Var> {
        let ln2 = tape.layer_norm(
            xp,
            bind.var(&block(i, "ln2.gamma"))?,
            bind.var(&block(i, "ln2.beta"))?,
            LN_EPS,
        )?;
        let m = tape.linear(
            ln2,
            bind.var(&block(i, "mlp.fc1.weight"))?,
            Some(bind.var(&block(i, "mlp.fc1.bias"))?),
        )?;
        let m = tape.activation(m, ActivationKind::Gelu)?;
        let m = tape.linear(
            m,
            bind.var(&block(i, "mlp.fc2.weight"))?,
            Some(bind.var(&block(i, "mlp.fc2.bias"))?),
        )?;
        let out = tape.add(m, xp)?;
        let Some(branch) = adapter else {
            return Ok(out);
        };
        let rate = self.adapter.dropout;
        let branch_out = branch.forward(
            tape,
            self.adapter.activation,
            xp,
            dropout.map(|r| (rate, r)),
        )?;
        bottlenecks.push(branch_out.bottleneck);
        let scaled = tape.scale(branch_out.out, self.adapter.scale);
        tape.add(out, scaled)
    }

    /// Three-layer projection MLP followed by row normalization.
    pub fn project(&self, tape: &mut Tape, bind: &Bindings, h: Var) -> Result<Var> {
        let mut z = h;
        for k in 0..3 {
            if k > 0 {
                z = tape.activation(z, ActivationKind::Gelu)?;
            }
            z = tape.linear(
                z,
                bind.var(&format!("head.proj.{k}.weight"))?,
                Some(bind.var(&format!("head.proj.{k}.bias"))?),
            )?;
        }
        tape.l2_normalize(z)
    }

    pub fn logits(&self, tape: &mut Tape, bind: &Bindings, h: Var, tau: f64) -> Result<Var> {
        prototype_logits(tape, h, bind.var("head.prototypes")?, tau)
    }

    /// Gradient-free pass over a whole dataset in chunks of `chunk` samples.
    /// Class probabilities at temperature `tau` are included when given and
    /// the model has prototypes.
    pub fn infer(&self, samples: &Tensor, tau: Option<f64>, chunk: usize) -> Result<Inference> {
        let width = self.backbone.sample_width();
        if samples.shape().len() != 2 || samples.cols() != width {
            return Err(Error::dim("infer", samples.shape(), &[width]));
        }
        let n = samples.rows();
        let content = self.backbone.content_tokens();
        let tau = tau.filter(|_| self.params.contains("head.prototypes"));
        let mut features = Vec::with_capacity(n * self.backbone.embed_dim);
        let mut probs = Vec::new();
        let (mut zeros, mut total) = (0, 0);
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let tokens = samples
                .gather_rows(&idx)
                .reshape(&[(end - start) * content, self.backbone.token_dim])?;
            let mut tape = Tape::new();
            let bind = self.params.bind_frozen(&mut tape);
            let fwd = self.forward(&mut tape, &bind, &tokens, None)?;
            features.extend_from_slice(tape.value(fwd.h).data());
            for b in &fwd.bottlenecks {
                let v = tape.value(*b);
                zeros += zero_count(v.data());
                total += v.len();
            }
            if let Some(tau) = tau {
                let p = prototype_probs(&mut tape, fwd.h, bind.var("head.prototypes")?, tau)?;
                probs.extend_from_slice(tape.value(p).data());
            }
        }
        Ok(Inference {
            features: Tensor::new(vec![n, self.backbone.embed_dim], features)?,
            probs: match tau {
                Some(_) => Some(Tensor::new(vec![n, self.head.num_classes], probs)?),
                None => None,
            },
            bottleneck_zeros: zeros,
            bottleneck_total: total,
        })
    }
}
