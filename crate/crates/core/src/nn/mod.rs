//! Small CPU neural-network engine: tensors, layers, static graphs,
//! optimizers and training.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod train;

pub use graph::{GraphSpec, Gradients, ModelGraph, NodeSpec};
pub use layers::{LayerSpec, Mode};
pub use optim::{OptState, OptimizerKind};
pub use tensor::{Scalar, Tensor};
pub use train::{Dataset, Objective, TrainConfig, TrainHistory};
