//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Adadelta,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Per-parameter optimizer state. For Adam the slots are the first and
/// second moments; for Adadelta the accumulated squared gradients and
/// squared updates.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    slot_a: Vec<Vec<T>>,
    slot_b: Vec<Vec<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new<'a>(kind: OptimizerKind, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = match kind {
            OptimizerKind::Sgd => Vec::new(),
            _ => params.into_iter().map(|p| vec![T::zero(); p.len()]).collect(),
        };
        OptState {
            kind,
            step: 0,
            slot_a: zeros.clone(),
            slot_b: zeros,
        }
    }

    /// Applies one update. `names` labels parameters in diagnostics. The
    /// update is rejected before any parameter changes if a gradient is not
    /// finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[&Tensor<T>],
        names: &[String],
        learning_rate: f64,
    ) -> Result<()> {
        let next = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                let param = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient { param, step: next });
            }
        }
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                let name = names.get(i).map_or("?", String::as_str);
                return Err(Error::shape(name, format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.step = next;
        let lr = T::of(learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let bc1 = T::one() - T::of(ADAM_BETA1.powi(next as i32));
                let bc2 = T::one() - T::of(ADAM_BETA2.powi(next as i32));
                let eps = T::of(ADAM_EPS);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.slot_a[i], &mut self.slot_b[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * d;
                        v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adadelta => {
                let rho = T::of(ADADELTA_RHO);
                let eps = T::of(ADADELTA_EPS);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (eg, ex) = (&mut self.slot_a[i], &mut self.slot_b[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        eg[j] = rho * eg[j] + (T::one() - rho) * d * d;
                        let dx = (ex[j] + eps).sqrt() / (eg[j] + eps).sqrt() * d;
                        ex[j] = rho * ex[j] + (T::one() - rho) * dx * dx;
                        *w -= lr * dx;
                    }
                }
            }
        }
        Ok(())
    }
}
