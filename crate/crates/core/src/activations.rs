//! Activation functions for the adapter bottleneck, with exact derivatives and
//! an exact-zero sparsity statistic.
//!
//! Kinks of the ReLU family take the right-limit derivative (1 at the kink).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Magnitude at or below which an activation counts as zero.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Linear,
    Relu,
    /// Slope applied to negative inputs.
    LeakyRelu(f64),
    /// Inputs below the threshold are zeroed.
    ThresholdRelu(f64),
    /// Saturation magnitude for large negative inputs.
    Elu(f64),
    Sigmoid,
    Tanh,
    Swish,
    /// Exact erf form, not the tanh approximation.
    Gelu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu(a) if !(0.0..=1.0).contains(&a) => Err(Error::Config(
                format!("leaky_relu slope {a} outside [0, 1]"),
            )),
            ActivationKind::ThresholdRelu(t) if !t.is_finite() => Err(Error::Config(format!(
                "threshold_relu threshold {t} is not finite"
            ))),
            ActivationKind::Elu(b) if !(b >= 0.0 && b.is_finite()) => Err(Error::Config(format!(
                "elu scale {b} must be finite and >= 0"
            ))),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Linear => x,
            ActivationKind::Relu => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            ActivationKind::ThresholdRelu(t) => {
                if x >= t {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Elu(b) => {
                if x >= 0.0 {
                    x
                } else {
                    b * x.exp_m1()
                }
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Gelu => x * normal_cdf(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            ActivationKind::ThresholdRelu(t) => {
                if x >= t {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elu(b) => {
                if x >= 0.0 {
                    1.0
                } else {
                    b * x.exp()
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Gelu => normal_cdf(x) + x * normal_pdf(x),
        }
    }

    /// Points where the derivative jumps, if any.
    pub fn kink(&self) -> Option<f64> {
        match *self {
            ActivationKind::Relu | ActivationKind::LeakyRelu(_) | ActivationKind::Elu(_) => {
                Some(0.0)
            }
            ActivationKind::ThresholdRelu(t) => Some(t),
            _ => None,
        }
    }

    /// Swish and GeLU dip below zero before rising. Threshold-ReLU with a
    /// negative threshold jumps from negative outputs back up to zero at the
    /// threshold, so it is only monotonic for `t >= 0`.
    pub fn is_monotonic(&self) -> bool {
        match *self {
            ActivationKind::Swish | ActivationKind::Gelu => false,
            ActivationKind::ThresholdRelu(t) => t >= 0.0,
            _ => true,
        }
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        if !x.all_finite() {
            return Err(Error::Numeric(format!(
                "{self} applied to non-finite input"
            )));
        }
        Ok(x.map(|v| self.eval(v)))
    }
}

/// Records `kind(x)` on the tape.
pub fn apply(tape: &mut Tape, kind: ActivationKind, x: Var) -> Result<Var> {
    tape.activation(x, kind)
}

/// Fraction of entries whose magnitude is at most [`ZERO_TOL`].
pub fn sparsity(x: &Tensor) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Degenerate("sparsity of an empty tensor".into()));
    }
    Ok(zero_count(x.data()) as f64 / x.len() as f64)
}

pub(crate) fn zero_count(values: &[f64]) -> usize {
    values.iter().filter(|v| v.abs() <= ZERO_TOL).count()
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Linear => write!(f, "linear"),
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu(a) => write!(f, "leaky_relu:{a}"),
            ActivationKind::ThresholdRelu(t) => write!(f, "threshold_relu:{t}"),
            ActivationKind::Elu(b) => write!(f, "elu:{b}"),
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Swish => write!(f, "swish"),
            ActivationKind::Gelu => write!(f, "gelu"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (tag, param) = match s.split_once(':') {
            Some((t, p)) => (t, Some(p)),
            None => (s, None),
        };
        let num = |p: Option<&str>| -> Result<f64> {
            let p =
                p.ok_or_else(|| Error::Config(format!("activation `{tag}` needs a parameter")))?;
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad activation parameter `{p}`")))
        };
        let no_param = |k: ActivationKind| -> Result<ActivationKind> {
            match param {
                Some(_) => Err(Error::Config(format!(
                    "activation `{tag}` takes no parameter"
                ))),
                None => Ok(k),
            }
        };
        let kind = match tag.to_ascii_lowercase().as_str() {
            "linear" => no_param(ActivationKind::Linear)?,
            "relu" => no_param(ActivationKind::Relu)?,
            "leaky_relu" => ActivationKind::LeakyRelu(num(param)?),
            "threshold_relu" => ActivationKind::ThresholdRelu(num(param)?),
            "elu" => ActivationKind::Elu(num(param)?),
            "sigmoid" => no_param(ActivationKind::Sigmoid)?,
            "tanh" => no_param(ActivationKind::Tanh)?,
            "swish" => no_param(ActivationKind::Swish)?,
            "gelu" => no_param(ActivationKind::Gelu)?,
            other => return Err(Error::Config(format!("unknown activation `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceCheck {
    pub name: String,
    pub max_abs_diff: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub checks: Vec<EquivalenceCheck>,
}

impl EquivalenceReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn violations(&self) -> Vec<&EquivalenceCheck> {
        self.checks.iter().filter(|c| !c.holds).collect()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.all_hold() {
            return Ok(self);
        }
        let names: Vec<String> = self.violations().iter().map(|c| c.name.clone()).collect();
        Err(Error::Precondition(format!(
            "equivalence violated: {}",
            names.join(", ")
        )))
    }
}

/// Elementwise comparison of two kinds on `x` within `1e-12`.
pub fn compare_kinds(a: ActivationKind, b: ActivationKind, x: &Tensor) -> EquivalenceCheck {
    let max_abs_diff = x
        .data()
        .iter()
        .map(|&v| (a.eval(v) - b.eval(v)).abs())
        .fold(0.0, f64::max);
    EquivalenceCheck {
        name: format!("{a} == {b}"),
        max_abs_diff,
        holds: max_abs_diff <= 1e-12,
    }
}

/// The four limiting cases of the ReLU variants.
pub fn limit_equivalences(x: &Tensor) -> EquivalenceReport {
    use ActivationKind::*;
    EquivalenceReport {
        checks: vec![
            compare_kinds(LeakyRelu(0.0), Relu, x),
            compare_kinds(LeakyRelu(1.0), Linear, x),
            compare_kinds(ThresholdRelu(0.0), Relu, x),
            compare_kinds(Elu(0.0), Relu, x),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const ALL: [ActivationKind; 12] = [
        ActivationKind::Linear,
        ActivationKind::Relu,
        ActivationKind::LeakyRelu(0.01),
        ActivationKind::LeakyRelu(0.5),
        ActivationKind::ThresholdRelu(-1.0),
        ActivationKind::ThresholdRelu(1.0),
        ActivationKind::Elu(1.0),
        ActivationKind::Elu(2.0),
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Swish,
        ActivationKind::Gelu,
    ];

    #[test]
    fn closed_form_values() {
        assert_eq!(ActivationKind::LeakyRelu(0.5).eval(-2.0), -1.0);
        assert_eq!(ActivationKind::ThresholdRelu(1.0).eval(0.5), 0.0);
        assert_eq!(ActivationKind::ThresholdRelu(1.0).eval(1.5), 1.5);
        assert!((ActivationKind::Elu(1.0).eval(-1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        assert_eq!(ActivationKind::Sigmoid.eval(0.0), 0.5);
        assert_eq!(ActivationKind::Tanh.eval(0.0), 0.0);
        assert_eq!(ActivationKind::Swish.eval(0.0), 0.0);
        assert_eq!(ActivationKind::Gelu.eval(0.0), 0.0);
        for v in [-3.0, -0.1, 0.0, 2.5] {
            assert_eq!(ActivationKind::Linear.eval(v), v);
        }
    }

    #[test]
    fn negative_threshold_is_not_monotonic() {
        let k = ActivationKind::ThresholdRelu(-1.0);
        assert!(!k.is_monotonic());
        assert!(k.eval(-0.98) < k.eval(-13.0));
        assert!(ActivationKind::ThresholdRelu(0.5).is_monotonic());
    }

    #[test]
    fn elu_saturates_at_minus_beta() {
        assert!((ActivationKind::Elu(2.0).eval(-800.0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_uses_erf_form() {
        // x * Phi(x) at x = 1: Phi(1) = 0.841344746068543
        assert!((ActivationKind::Gelu.eval(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn sparsity_counts_exact_zeros() {
        let x = Tensor::vector(vec![-1.0, 2.0, -3.0, 4.0]);
        let y = ActivationKind::Relu.apply_tensor(&x).unwrap();
        assert_eq!(sparsity(&y).unwrap(), 0.5);
        let lin = ActivationKind::Linear
            .apply_tensor(&Tensor::vector(vec![0.3, -0.2, 1.1]))
            .unwrap();
        assert_eq!(sparsity(&lin).unwrap(), 0.0);
        assert!(matches!(
            sparsity(&Tensor::zeros(&[0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn threshold_sparsity_matches_normal_cdf() {
        // Monte-Carlo oracle: P(Z < 2) for Z ~ N(0, 1) is 0.97725.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..200_000).map(|_| rng.sample(StandardNormal)).collect();
        let y = ActivationKind::ThresholdRelu(2.0)
            .apply_tensor(&Tensor::vector(draws))
            .unwrap();
        let s = sparsity(&y).unwrap();
        assert!((s - 0.97725).abs() < 0.02, "sparsity {s}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(
            ActivationKind::Relu.apply_tensor(&x),
            Err(Error::Numeric(_))
        ));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        assert!(apply(&mut tape, ActivationKind::Tanh, v).is_err());
    }

    #[test]
    fn tags_round_trip() {
        for k in ALL {
            let parsed: ActivationKind = k.to_string().parse().unwrap();
            assert_eq!(parsed, k);
        }
        assert_eq!(
            "threshold_relu:-1".parse::<ActivationKind>().unwrap(),
            ActivationKind::ThresholdRelu(-1.0)
        );
        assert!("leaky_relu:1.5".parse::<ActivationKind>().is_err());
        assert!("elu:-1".parse::<ActivationKind>().is_err());
        assert!("relu:2".parse::<ActivationKind>().is_err());
        assert!("leaky_relu".parse::<ActivationKind>().is_err());
        assert!("softplus".parse::<ActivationKind>().is_err());
        let json = serde_json::to_string(&ActivationKind::Elu(2.0)).unwrap();
        assert_eq!(json, "\"elu:2\"");
    }

    #[test]
    fn equivalences_on_fixed_points() {
        let x = Tensor::vector(vec![-2.0, -0.5, 0.0, 0.5, 2.0]);
        let report = limit_equivalences(&x);
        assert_eq!(report.checks.len(), 4);
        assert!(report.all_hold());
        let bad = compare_kinds(ActivationKind::LeakyRelu(0.5), ActivationKind::Relu, &x);
        assert!(!bad.holds);
        let failing = EquivalenceReport { checks: vec![bad] };
        let err = failing.into_result().unwrap_err().to_string();
        assert!(err.contains("leaky_relu:0.5"), "{err}");
    }

    #[test]
    fn tape_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in ALL {
            for _ in 0..20 {
                let data: Vec<f64> = (0..6)
                    .map(|_| loop {
                        let v: f64 = rng.gen_range(-3.0..3.0);
                        if kind.kink().is_none_or(|k| (v - k).abs() > 1e-4) {
                            break v;
                        }
                    })
                    .collect();
                let x = Tensor::vector(data);
                let w = Tensor::vector(vec![0.7, -1.3, 0.4, 1.9, -0.6, 1.1]);
                let err = crate::tensor::grad_check(
                    |t, v| {
                        let y = apply(t, kind, v)?;
                        let wv = t.constant(w.clone());
                        let p = t.mul(y, wv)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-5, "{kind}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn equivalences_hold_on_random_inputs(xs in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            prop_assert!(limit_equivalences(&Tensor::vector(xs)).all_hold());
        }

        #[test]
        fn monotonic_kinds_preserve_order(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for k in ALL.iter().filter(|k| k.is_monotonic()) {
                prop_assert!(k.eval(lo) <= k.eval(hi), "{} broke order on {} {}", k, lo, hi);
            }
        }

        #[test]
        fn relu_sparsity_equals_negative_fraction(xs in proptest::collection::vec(-5.0f64..5.0, 1..128)) {
            let neg = xs.iter().filter(|&&v| v < 0.0 || v.abs() <= ZERO_TOL).count() as f64 / xs.len() as f64;
            let y = ActivationKind::Relu.apply_tensor(&Tensor::vector(xs)).unwrap();
            prop_assert_eq!(sparsity(&y).unwrap(), neg);
        }
    }
}
