//! Central finite-difference checks, replayed in 64-bit.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Largest `|analytic - fd| / max(1, |fd|)` over every element of every input.
///
/// `f` rebuilds the scalar loss on a fresh tape from the given input leaves.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(|g| g.data().to_vec());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[e]);
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
