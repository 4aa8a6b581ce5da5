//! Contrastive representation losses, self-distillation classification
//! losses with mean-entropy regularization, and distribution alignment.
//!
//! Every `log` of a probability goes through `log(max(p, EPS))`, so the
//! alignment path with `pi = 0` is bit-equal to the plain cross-entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bindings, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Probability floor inside every log.
pub const EPS: f64 = 1e-8;

/// Tolerance on row sums of probability inputs.
const ROW_SUM_TOL: f64 = 1e-6;

/// Denominator of the self-supervised contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// InfoNCE: the positive pair is part of the denominator.
    #[default]
    Standard,
    /// Only the negatives `n != i` appear in the denominator. Unbounded below.
    AsWritten,
}

impl fmt::Display for ContrastiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveMode::Standard => "standard",
            ContrastiveMode::AsWritten => "as_written",
        })
    }
}

impl FromStr for ContrastiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ContrastiveMode::Standard),
            "as_written" | "as-written" => Ok(ContrastiveMode::AsWritten),
            other => Err(Error::Config(format!("unknown contrastive mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub lambda_ent: f64,
    pub tau_u: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub s_d: f64,
    pub contrastive_mode: ContrastiveMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sup: 0.35,
            lambda_ent: 1.0,
            tau_u: 1.0,
            tau_c: 0.07,
            tau_s: 0.1,
            s_d: 0.2,
            contrastive_mode: ContrastiveMode::Standard,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_sup) {
            return Err(Error::Config(format!(
                "lambda_sup {} outside [0, 1]",
                self.lambda_sup
            )));
        }
        for (name, t) in [
            ("tau_u", self.tau_u),
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} = {t} must be positive")));
            }
        }
        if !(self.s_d >= 0.0 && self.s_d.is_finite()) {
            return Err(Error::Config(format!("s_d {} must be >= 0", self.s_d)));
        }
        if !self.lambda_ent.is_finite() {
            return Err(Error::Config("lambda_ent must be finite".into()));
        }
        Ok(())
    }
}

fn check_rows_normalized(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Precondition(format!(
                "row {i} of {what} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

fn off_diagonal(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

/// Self-supervised contrastive loss between two views' projections.
pub fn self_sup_contrastive(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: f64,
    mode: ContrastiveMode,
) -> Result<Var> {
    let b = tape.value(z).rows();
    if b < 2 {
        return Err(Error::Degenerate(format!(
            "contrastive batch of {b} samples"
        )));
    }
    let sim = tape.linear(z, z2, None)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let mask = match mode {
        ContrastiveMode::Standard => vec![true; b * b],
        ContrastiveMode::AsWritten => off_diagonal(b),
    };
    let lse = tape.masked_log_sum_exp(sim, mask)?;
    let pos = tape.mul(z, z2)?;
    let pos = tape.row_sum(pos)?;
    let pos = tape.scale(pos, 1.0 / tau);
    let per = tape.sub(lse, pos)?;
    tape.mean(per)
}

/// Supervised contrastive loss: for each anchor with at least one positive,
/// the mean over same-label positives of `-log softmax` over all other rows.
pub fn sup_contrastive(tape: &mut Tape, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = tape.value(z).rows();
    if labels.len() != n {
        return Err(Error::dim("sup_contrastive", &[n], &[labels.len()]));
    }
    let mut weights = vec![0.0; n * n];
    let mut anchors = Vec::new();
    for a in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != a && labels[p] == labels[a])
            .collect();
        if pos.is_empty() {
            continue;
        }
        for &p in &pos {
            weights[a * n + p] = 1.0 / pos.len() as f64;
        }
        anchors.push(a);
    }
    if anchors.is_empty() {
        return Err(Error::Degenerate(
            "no anchor has a same-label positive".into(),
        ));
    }
    let sim = tape.linear(z, z, None)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let lse = tape.masked_log_sum_exp(sim, off_diagonal(n))?;
    let w = tape.constant(Tensor::new(vec![n, n], weights)?);
    let pos = tape.mul(sim, w)?;
    let pos = tape.row_sum(pos)?;
    let per = tape.sub(lse, pos)?;
    let mut keep = vec![0.0; n];
    for &a in &anchors {
        keep[a] = 1.0;
    }
    let keep = tape.constant(Tensor::vector(keep));
    let per = tape.mul(per, keep)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, 1.0 / anchors.len() as f64))
}

/// `-sum_k q log(max(p + pi, EPS))` averaged over rows; `pi` broadcasts over
/// rows when given.
pub fn soft_cross_entropy(tape: &mut Tape, q: Var, p: Var, pi: Option<Var>) -> Result<Var> {
    let rows = tape.value(p).rows();
    if rows == 0 {
        return Err(Error::Degenerate("cross-entropy over zero rows".into()));
    }
    let shifted = match pi {
        Some(pi) => tape.add_bias(p, pi)?,
        None => p,
    };
    let clamped = tape.clamp_min(shifted, EPS);
    let logp = tape.log(clamped)?;
    let prod = tape.mul(q, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// Alignment loss: cross-entropy against `p + pi`, clamped before the log.
pub fn align_loss(tape: &mut Tape, q: Var, p: Var, pi: Var) -> Result<Var> {
    soft_cross_entropy(tape, q, p, Some(pi))
}

/// Entropy of a probability vector, `-sum p log(max(p, EPS))`.
pub fn entropy(tape: &mut Tape, p: Var) -> Result<Var> {
    let clamped = tape.clamp_min(p, EPS);
    let logp = tape.log(clamped)?;
    let prod = tape.mul(p, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Protocol(format!("label {y} outside [0, {k})")));
        }
        t.data_mut()[i * k + y] = 1.0;
    }
    Ok(t)
}

/// Self-distillation losses.
#[derive(Clone, Copy, Debug)]
pub struct ClsLosses {
    /// Cross-entropy on labeled rows; `None` when the batch has none.
    pub supervised: Option<Var>,
    pub unsupervised: Var,
    /// `H(p_bar)`, already subtracted inside `unsupervised`.
    pub entropy: Var,
}

/// Classification losses from student probabilities of both views (`p`,
/// `p2`) and the detached teacher targets `q2` of the second view.
/// `pi` switches the pseudo-label term to the alignment loss.
pub fn cls_losses(
    tape: &mut Tape,
    p: Var,
    p2: Var,
    q2: Var,
    labels: &[Option<usize>],
    lambda_ent: f64,
    pi: Option<Var>,
) -> Result<ClsLosses> {
    for (v, what) in [(p, "p"), (p2, "p'"), (q2, "q'")] {
        check_rows_normalized(tape.value(v), what)?;
    }
    let (b, k) = (tape.value(p).rows(), tape.value(p).cols());
    if labels.len() != b {
        return Err(Error::dim("cls_losses", &[b], &[labels.len()]));
    }
    let q2 = tape.detach(q2);
    let labeled: Vec<usize> = (0..b).filter(|&i| labels[i].is_some()).collect();
    let supervised = if labeled.is_empty() {
        None
    } else {
        let ys: Vec<usize> = labeled.iter().map(|&i| labels[i].unwrap()).collect();
        let target = tape.constant(one_hot(&ys, k)?);
        let pl = tape.gather_rows(p, labeled)?;
        Some(soft_cross_entropy(tape, target, pl, None)?)
    };
    let ce = soft_cross_entropy(tape, q2, p, pi)?;
    let both = tape.concat_rows(&[p, p2])?;
    let p_bar = tape.col_mean(both)?;
    let h = entropy(tape, p_bar)?;
    let reg = tape.scale(h, lambda_ent);
    let unsupervised = tape.sub(ce, reg)?;
    Ok(ClsLosses {
        supervised,
        unsupervised,
        entropy: h,
    })
}

/// Normalized sum of class probabilities at `tau_s` over every sample.
pub fn estimate_pi_v(model: &Model, samples: &Tensor, tau_s: f64) -> Result<Tensor> {
    if samples.rows() == 0 {
        return Err(Error::Degenerate(
            "estimating pi_v on an empty dataset".into(),
        ));
    }
    let inf = model.infer(samples, Some(tau_s), 256)?;
    let probs = inf
        .probs
        .ok_or_else(|| Error::Config("model has no prototype head".into()))?;
    normalized_col_sums(&probs)
}

pub(crate) fn normalized_col_sums(probs: &Tensor) -> Result<Tensor> {
    let k = probs.cols();
    let mut acc = vec![0.0; k];
    for i in 0..probs.rows() {
        for (a, v) in acc.iter_mut().zip(probs.row(i)) {
            *a += v;
        }
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("predicted mass sums to zero".into()));
    }
    Ok(Tensor::vector(acc.into_iter().map(|a| a / total).collect()))
}

/// `log(max(pi_v, EPS) / pi_b) * s_d`.
pub fn alignment_vector(pi_v: &Tensor, pi_b: &Tensor, s_d: f64) -> Result<Tensor> {
    if pi_v.shape() != pi_b.shape() {
        return Err(Error::dim("alignment_vector", pi_v.shape(), pi_b.shape()));
    }
    if pi_b.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Precondition("pi_b entries must be positive".into()));
    }
    let data = pi_v
        .data()
        .iter()
        .zip(pi_b.data())
        .map(|(&v, &b)| (v.max(EPS) / b).ln() * s_d)
        .collect();
    Ok(Tensor::new(pi_v.shape().to_vec(), data)?)
}

pub fn uniform_prior(k: usize) -> Tensor {
    Tensor::full(&[k], 1.0 / k as f64)
}

/// Where the alignment vector enters the pseudo-label loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Alignment {
    #[default]
    Off,
    /// Added to student probabilities before the log.
    Probs(Tensor),
    /// Added to student logits before the softmax.
    Logits(Tensor),
}

/// Scalar values of every component, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub rep_u: f64,
    pub rep_s: f64,
    pub cls_u: f64,
    pub cls_s: f64,
    pub entropy: f64,
}

impl LossValues {
    /// `(1 - lambda) (rep_u + cls_u) + lambda (rep_s + cls_s)`.
    pub fn recombine(&self, lambda_sup: f64) -> f64 {
        (1.0 - lambda_sup) * self.rep_u
            + lambda_sup * self.rep_s
            + ((1.0 - lambda_sup) * self.cls_u + lambda_sup * self.cls_s)
    }
}

pub struct Objective {
    pub total: Var,
    pub values: LossValues,
    /// Teacher targets of the second views, `[B, K]`.
    pub teacher: Tensor,
}

/// Per-step settings of [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub weights: &'a LossWeights,
    pub tau_t: f64,
    pub align: &'a Alignment,
    /// Fixed teacher targets replacing the ones derived from `h`. Finite
    /// difference checks need this, since the teacher carries no gradient.
    pub teacher: Option<&'a Tensor>,
}

/// Full objective `L_rep + L_cls` for a batch whose features `h` stack the
/// first views of all samples over their second views. `labels` covers one
/// view.
pub fn total_loss(
    tape: &mut Tape,
    model: &Model,
    bind: &Bindings,
    h: Var,
    labels: &[Option<usize>],
    ctx: LossContext<'_>,
) -> Result<Objective> {
    let weights = ctx.weights;
    let b = labels.len();
    if tape.value(h).rows() != 2 * b {
        return Err(Error::dim("total_loss", tape.value(h).shape(), &[2 * b]));
    }
    let first: Vec<usize> = (0..b).collect();
    let second: Vec<usize> = (b..2 * b).collect();

    let z = model.project(tape, bind, h)?;
    let z1 = tape.gather_rows(z, first.clone())?;
    let z2 = tape.gather_rows(z, second.clone())?;
    let rep_u = self_sup_contrastive(tape, z1, z2, weights.tau_u, weights.contrastive_mode)?;

    let labeled: Vec<usize> = (0..b).filter(|&i| labels[i].is_some()).collect();
    let rep_s = if labeled.is_empty() {
        None
    } else {
        let rows: Vec<usize> = labeled
            .iter()
            .copied()
            .chain(labeled.iter().map(|i| i + b))
            .collect();
        let ys: Vec<usize> = rows.iter().filter_map(|&r| labels[r % b]).collect();
        let zl = tape.gather_rows(z, rows)?;
        Some(sup_contrastive(tape, zl, &ys, weights.tau_c)?)
    };

    let cos = model.logits(tape, bind, h, 1.0)?;
    let student = tape.scale(cos, 1.0 / weights.tau_s);
    let q2 = match ctx.teacher {
        Some(t) => tape.constant(t.clone()),
        None => {
            let frozen = tape.detach(cos);
            let sharp = tape.scale(frozen, 1.0 / ctx.tau_t);
            let teacher = tape.softmax(sharp)?;
            tape.gather_rows(teacher, second.clone())?
        }
    };

    let (p, pi) = match ctx.align {
        Alignment::Off => (tape.softmax(student)?, None),
        Alignment::Probs(pi) => (tape.softmax(student)?, Some(tape.constant(pi.clone()))),
        Alignment::Logits(pi) => {
            let pi = tape.constant(pi.clone());
            let shifted = tape.add_bias(student, pi)?;
            (tape.softmax(shifted)?, None)
        }
    };
    let p1 = tape.gather_rows(p, first)?;
    let p2 = tape.gather_rows(p, second)?;
    let cls = cls_losses(tape, p1, p2, q2, labels, weights.lambda_ent, pi)?;

    let lam = weights.lambda_sup;
    let zero = tape.constant(Tensor::scalar(0.0));
    let rep_s = rep_s.unwrap_or(zero);
    let cls_s = cls.supervised.unwrap_or(zero);
    let a = tape.scale(rep_u, 1.0 - lam);
    let c = tape.scale(rep_s, lam);
    let rep = tape.add(a, c)?;
    let a = tape.scale(cls.unsupervised, 1.0 - lam);
    let c = tape.scale(cls_s, lam);
    let cls_total = tape.add(a, c)?;
    let total = tape.add(rep, cls_total)?;

    let values = LossValues {
        total: tape.value(total).item(),
        rep_u: tape.value(rep_u).item(),
        rep_s: tape.value(rep_s).item(),
        cls_u: tape.value(cls.unsupervised).item(),
        cls_s: tape.value(cls_s).item(),
        entropy: tape.value(cls.entropy).item(),
    };
    Ok(Objective {
        total,
        values,
        teacher: tape.value(q2).clone(),
    })
}
