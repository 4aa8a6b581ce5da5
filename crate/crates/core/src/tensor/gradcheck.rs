use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest magnitude used in the relative-error denominator, so that
/// coordinates whose true derivative is zero compare in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::dim("grad_check", t.shape(), &[]));
    }
    Ok(t.item())
}

/// Compares tape gradients of a scalar function of several tensors against
/// central differences. Returns the largest relative error over every
/// coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        scalar_of(&t, o)
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), h)
}
