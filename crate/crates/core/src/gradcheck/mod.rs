//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{OpKind, Tape, Tensor, Var};

pub mod suite;

pub use suite::{OpReport, SuiteReport, OPS, TOLERANCE};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst error over all inputs. For each input tensor the error is
    /// `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|)`.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compares `d f / d inputs` from the tape against central differences.
///
/// `f` receives a fresh tape and the inputs registered as parameters and
/// must return a scalar.
pub fn check<F>(inputs: &[Tensor], h: f64, fault: Option<OpKind>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("parameter gradient");
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        per_input.push(if scale > 0.0 { max_diff / scale } else { 0.0 });
    }
    Ok(GradCheck {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

/// Deterministic uniform tensor in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces a tensor to a scalar through a fixed random weighting, so every
/// output element contributes a distinct direction to the check.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
