//! Mini-batch training loop with minimum-validation-loss checkpointing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::layers::Mode;
use super::optim::{OptState, OptimizerKind};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    #[default]
    MinValidationLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: String,
    pub seed: u64,
    pub checkpoint_policy: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            loss: "mse".into(),
            seed: 7,
            checkpoint_policy: CheckpointPolicy::MinValidationLoss,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a run can be used as a dry run.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inputs and targets, each a list of batch-major tensors with a shared
/// batch size.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, targets: Vec<Tensor<T>>) -> Result<Self> {
        let n = inputs.first().map_or(0, |t| t.batch());
        if inputs.iter().chain(&targets).any(|t| t.batch() != n) {
            return Err(Error::invalid("dataset tensors disagree on sample count"));
        }
        Ok(Dataset { inputs, targets })
    }

    /// Reconstruction dataset: the targets are the inputs.
    pub fn autoencoding(inputs: Vec<Tensor<T>>) -> Result<Self> {
        Self::new(inputs.clone(), inputs)
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.batch())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset<T> {
        Dataset {
            inputs: self.inputs.iter().map(|t| gather(t, idx)).collect(),
            targets: self.targets.iter().map(|t| gather(t, idx)).collect(),
        }
    }
}

/// Rows `idx` of a batch-major tensor.
pub fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(idx.len() * t.sample_len());
    for &i in idx {
        data.extend_from_slice(t.sample(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, data).expect("gathered shape")
}

/// Scalar training objective over graph outputs.
pub trait Objective<T: Scalar> {
    /// Returns the batch loss and its gradient with respect to each output.
    fn evaluate(&self, outputs: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

type Snapshot<T> = BTreeMap<String, Tensor<T>>;

fn snapshot<T: Scalar>(graph: &ModelGraph<T>) -> Snapshot<T> {
    graph.state().into_iter().map(|(k, v)| (k, v.clone())).collect()
}

/// Mean loss over `data` in evaluation mode.
pub fn evaluate<T: Scalar>(
    graph: &ModelGraph<T>,
    data: &Dataset<T>,
    batch_size: usize,
    objective: &dyn Objective<T>,
) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let batch = data.select(&idx);
        let out = graph.infer(&batch.inputs, Mode::EVAL)?;
        let (loss, _) = objective.evaluate(&out, &batch.targets)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains `graph` in place and leaves it holding the parameters of the
/// best epoch. With an empty validation set the training loss decides.
pub fn train<T: Scalar>(
    graph: &mut ModelGraph<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    config: &TrainConfig,
    objective: &dyn Objective<T>,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    let names: Vec<String> = graph.named_params().into_iter().map(|(n, _)| n).collect();
    let mut opt = OptState::new(config.optimizer, graph.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        best_loss: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best = snapshot(graph);
    let mut step: u64 = 0;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.select(chunk);
            let noise = config.seed ^ step.wrapping_mul(0xA24B_AED4_963E_E407);
            let out = graph.forward(&batch.inputs, Mode::train(noise))?;
            let (loss, grads) = objective.evaluate(&out, &batch.targets)?;
            if !loss.is_finite() {
                history.diverged = Some(format!("non-finite loss at epoch {epoch}, step {}", step + 1));
                break 'epochs;
            }
            let g = graph.backward(&grads)?;
            let flat: Vec<&Tensor<T>> = g.flat().collect();
            match opt.step(graph.params_mut(), &flat, &names, config.learning_rate) {
                Ok(()) => {}
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    history.diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        history.train_loss.push(train_loss);
        let monitored = match val_set {
            Some(v) => {
                let l = evaluate(graph, v, config.batch_size, objective)?;
                history.val_loss.push(l);
                l
            }
            None => train_loss,
        };
        log::debug!("epoch {epoch}: train {train_loss:.6} monitored {monitored:.6}");
        if !monitored.is_finite() {
            history.diverged = Some(format!("non-finite loss at epoch {epoch}"));
            break;
        }
        if monitored < history.best_loss || history.train_loss.len() == 1 {
            history.best_loss = monitored;
            history.best_epoch = epoch;
            best = snapshot(graph);
        }
    }
    if let Some(d) = &history.diverged {
        log::warn!("training diverged ({d}); restoring epoch {}", history.best_epoch);
    }
    graph.load_state(&best)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::GraphSpec;
    use crate::nn::layers::LayerSpec;

    struct Mse;
    impl Objective<f64> for Mse {
        fn evaluate(&self, out: &[Tensor<f64>], tgt: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
            let n = out[0].len() as f64;
            let mut g = out[0].clone();
            let mut loss = 0.0;
            for (v, &t) in g.data_mut().iter_mut().zip(tgt[0].data()) {
                loss += (*v - t).powi(2);
                *v = 2.0 * (*v - t) / n;
            }
            Ok((loss / n, vec![g]))
        }
    }

    fn dense_graph() -> ModelGraph<f64> {
        let mut g = GraphSpec::new();
        g.input("x", &[3]);
        g.add(
            "d",
            LayerSpec::Dense {
                in_features: 3,
                out_features: 3,
            },
            &["x"],
        );
        g.output("d");
        ModelGraph::new(g, 3).unwrap()
    }

    fn data() -> Dataset<f64> {
        let x = Tensor::from_vec(&[4, 3], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        Dataset::autoencoding(vec![x]).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut m = dense_graph();
        let before: Vec<_> = m.params().cloned().collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &data(), None, &cfg, &Mse).unwrap();
        assert_eq!(h.train_loss.len(), 1);
        assert_eq!(m.params().cloned().collect::<Vec<_>>(), before);
    }

    #[test]
    fn rejects_bad_config_and_empty_set() {
        let mut m = dense_graph();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut m, &data(), None, &cfg, &Mse).is_err());
        let empty = data().select(&[]);
        assert!(train(&mut m, &empty, None, &TrainConfig::default(), &Mse).is_err());
    }

    #[test]
    fn best_epoch_is_restored() {
        let mut m = dense_graph();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let d = data();
        let h = train(&mut m, &d, Some(&d), &cfg, &Mse).unwrap();
        let min = h.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_loss, min);
        let now = evaluate(&m, &d, 32, &Mse).unwrap();
        assert!((now - min).abs() < 1e-12);
    }
}
