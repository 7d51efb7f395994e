//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::ModelGraph;
use super::layers::Mode;
use super::tensor::Tensor;
use crate::Result;

pub const FD_EPS: f64 = 1e-4;
/// Step of the retry taken when the first estimate disagrees: a ReLU or
/// max-pool kink within `FD_EPS` of the point biases the wider stencil.
pub const FD_EPS_FINE: f64 = 1e-6;
/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + FD_EPS;
    let fp = f(&xp);
    xp[i] = x[i] - FD_EPS;
    let fm = f(&xp);
    (fp - fm) / (2.0 * FD_EPS)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates that needed the fine-step retry.
    pub retried: usize,
    /// Parameter (or input) with the largest error.
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, name: &str, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = name.to_string();
        }
    }
}

fn projection(outputs: &[Tensor<f64>], weights: &[Vec<f64>]) -> f64 {
    outputs
        .iter()
        .zip(weights)
        .map(|(o, w)| o.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Relative error at `FD_EPS`, or at `FD_EPS_FINE` when that is smaller
/// and the wide stencil exceeded `1e-6`.
fn coordinate_error(
    analytic: f64,
    x0: f64,
    eval: &mut dyn FnMut(f64) -> Result<f64>,
    retried: &mut usize,
) -> Result<f64> {
    let mut at = |eps: f64| -> Result<f64> { Ok((eval(x0 + eps)? - eval(x0 - eps)?) / (2.0 * eps)) };
    let err = relative_error(analytic, at(FD_EPS)?);
    if err <= 1e-6 {
        return Ok(err);
    }
    *retried += 1;
    Ok(err.min(relative_error(analytic, at(FD_EPS_FINE)?)))
}

/// Checks every parameter tensor and every input of `graph` on up to
/// `per_tensor` random coordinates, using the objective `sum(w * outputs)`
/// with fixed random weights `w`.
pub fn check_graph(
    graph: &mut ModelGraph<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outs = graph.forward(inputs, mode)?;
    let weights: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| (0..o.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let out_grads: Vec<Tensor<f64>> = outs
        .iter()
        .zip(&weights)
        .map(|(o, w)| Tensor::from_vec(o.shape(), w.clone()).expect("output shape"))
        .collect();
    let grads = graph.backward(&out_grads)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        retried: 0,
        worst: String::new(),
    };

    let names: Vec<String> = graph.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<&Tensor<f64>> = grads.flat().collect();
    for (p, name) in names.iter().enumerate() {
        let len = analytic[p].len();
        for j in sample(&mut rng, len, per_tensor.min(len)) {
            let orig = graph.params().nth(p).expect("param").data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                graph.params_mut().nth(p).expect("param").data_mut()[j] = v;
                Ok(projection(&graph.infer(inputs, mode)?, &weights))
            };
            let err = coordinate_error(analytic[p].data()[j], orig, &mut eval, &mut report.retried);
            graph.params_mut().nth(p).expect("param").data_mut()[j] = orig;
            report.record(name, err?);
        }
    }

    for (k, input) in inputs.iter().enumerate() {
        for j in sample(&mut rng, input.len(), per_tensor.min(input.len())) {
            let mut perturbed = inputs.to_vec();
            let x0 = input.data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                perturbed[k].data_mut()[j] = v;
                Ok(projection(&graph.infer(&perturbed, mode)?, &weights))
            };
            let err = coordinate_error(grads.inputs[k].data()[j], x0, &mut eval, &mut report.retried)?;
            report.record(&format!("input{k}"), err);
        }
    }
    Ok(report)
}
