//! Central finite-difference gradient oracle.
//!
//! The analytic side comes from the graph's own backward pass; the numeric
//! side re-runs the retained forward twice per probed coordinate. The oracle
//! never touches the per-op backward code it is checking.

use alloc::vec::Vec;

use rand::Rng;

use super::tensor::Tensor;
use super::{Graph, GraphError, NodeId};

const EPS_ABS: f64 = 1e-6;

/// Max relative error between analytic and central-difference gradients of a
/// random linear functional of `output` with respect to the leaf `wrt`.
/// Probes every coordinate of `wrt`, or a random subset of `max_probes`.
pub fn fd_check(
    g: &mut Graph,
    output: NodeId,
    wrt: NodeId,
    epsilon: f64,
    max_probes: Option<usize>,
    rng: &mut impl Rng,
) -> Result<f64, GraphError> {
    if epsilon <= 0.0 {
        return Err(GraphError::Shape(alloc::string::String::from(
            "fd_check: epsilon must be positive",
        )));
    }
    g.run_forward()?;
    if !g.value(output).all_finite() || !g.value(wrt).all_finite() {
        return Err(GraphError::NonFinite(alloc::string::String::from(
            "fd_check: probe point is not finite",
        )));
    }

    let out_shape = g.value(output).shape().to_vec();
    let weights: Vec<f64> = (0..g.value(output).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let seed = Tensor::from_vec(&out_shape, weights.clone())?;

    g.backward_node(output, &seed)?;
    let analytic = g
        .grad(wrt)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.value(wrt).shape()));

    let n = g.value(wrt).numel();
    let mut coords: Vec<usize> = (0..n).collect();
    if let Some(cap) = max_probes {
        if cap < n {
            for i in 0..cap {
                let j = rng.gen_range(i..n);
                coords.swap(i, j);
            }
            coords.truncate(cap);
        }
    }

    let objective = |g: &Graph| -> f64 {
        g.value(output)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&y, &w)| y * w)
            .sum()
    };

    let mut max_rel = 0.0f64;
    for &j in &coords {
        let orig = g.leaf_data_mut(wrt)?[j];
        g.leaf_data_mut(wrt)?[j] = orig + epsilon;
        g.run_forward()?;
        let f_plus = objective(g);
        g.leaf_data_mut(wrt)?[j] = orig - epsilon;
        g.run_forward()?;
        let f_minus = objective(g);
        g.leaf_data_mut(wrt)?[j] = orig;
        let central = (f_plus - f_minus) / (2.0 * epsilon);
        let rel = (analytic.data()[j] - central).abs() / (central.abs() + EPS_ABS);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    g.run_forward()?;
    Ok(max_rel)
}
