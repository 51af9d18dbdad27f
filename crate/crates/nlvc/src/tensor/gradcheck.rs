//! Central finite-difference oracle for tape gradients.
//!
//! The oracle rebuilds the forward pass from plain input buffers, so it is
//! independent of the tape it checks: perturbing one coordinate re-runs the
//! whole computation.

use super::{Graph, TensorId};

pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss on a fresh graph from raw input buffers and returns
/// the loss id plus the leaf ids corresponding to the inputs.
pub type BuildFn<'a> = dyn Fn(&mut Graph, &[Vec<f64>]) -> (TensorId, Vec<TensorId>) + 'a;

/// Central finite differences of the scalar loss w.r.t. every coordinate of
/// every input buffer.
pub fn numerical_grads(build: &BuildFn, inputs: &[Vec<f64>], step: f64) -> Vec<Vec<f64>> {
    let eval = |bufs: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, bufs);
        g.data(loss)[0]
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += step;
            let mut minus = inputs.to_vec();
            minus[i][j] -= step;
            gi[j] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        grads.push(gi);
    }
    grads
}

/// Symmetric relative error used by every gradient check.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Runs the tape backward and compares against the finite-difference oracle.
/// Returns the worst relative error seen, or an error string locating the
/// first coordinate that exceeded `tol`.
pub fn check(build: &BuildFn, inputs: &[Vec<f64>], step: f64, tol: f64) -> Result<f64, String> {
    let mut g = Graph::new();
    let (loss, leaf_ids) = build(&mut g, inputs);
    g.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = leaf_ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.data(id).len()])
        })
        .collect();
    let numeric = numerical_grads(build, inputs, step);
    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = rel_err(av, nv);
            if e > tol {
                return Err(format!(
                    "gradient mismatch at input {i} coord {j}: tape={av:.9e} fd={nv:.9e} rel={e:.3e}"
                ));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
