//! Static computation graphs with a recorded tape for reverse-mode
//! differentiation.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Cache, LayerSpec, Mode};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<String>,
}

/// Serializable graph topology. Nodes are listed in evaluation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub outputs: Vec<String>,
}

impl GraphSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> String {
        self.add(name, LayerSpec::Input { shape: shape.to_vec() }, &[])
    }

    /// Appends a node and returns its name for chaining.
    pub fn add(&mut self, name: &str, layer: LayerSpec, inputs: &[&str]) -> String {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name.to_string()
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }
}

struct Tape<T> {
    values: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
}

/// Gradients from one backward pass, aligned with the graph's parameters
/// and inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Vec<Tensor<T>>>,
    pub inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }
}

pub struct ModelGraph<T> {
    spec: GraphSpec,
    edges: Vec<Vec<usize>>,
    input_nodes: Vec<usize>,
    output_nodes: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor<T>>>,
    buffers: Vec<Vec<Tensor<T>>>,
    tape: Option<Tape<T>>,
}

impl<T> std::fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("nodes", &self.spec.nodes.len())
            .field("outputs", &self.spec.outputs)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates the topology, infers shapes and initializes parameters
    /// from `seed`.
    pub fn new(spec: GraphSpec, seed: u64) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if index.insert(n.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate node name '{}'", n.name)));
            }
        }
        let mut edges = Vec::with_capacity(spec.nodes.len());
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
        let mut input_nodes = Vec::new();
        for (i, node) in spec.nodes.iter().enumerate() {
            node.layer.validate()?;
            let mut ins = Vec::with_capacity(node.inputs.len());
            for src in &node.inputs {
                match index.get(src.as_str()) {
                    None => return Err(Error::Config(format!("node '{}' reads unknown node '{src}'", node.name))),
                    Some(&j) if j >= i => {
                        return Err(Error::Config(format!("cycle: node '{}' reads '{src}', which depends on it", node.name)))
                    }
                    Some(&j) => ins.push(j),
                }
            }
            let in_shapes: Vec<&[usize]> = ins.iter().map(|&j| shapes[j].as_slice()).collect();
            shapes.push(node.layer.output_shape(&node.name, &in_shapes)?);
            if matches!(node.layer, LayerSpec::Input { .. }) {
                input_nodes.push(i);
            }
            edges.push(ins);
        }
        if spec.outputs.is_empty() {
            return Err(Error::Config("graph has no outputs".into()));
        }
        let output_nodes = spec
            .outputs
            .iter()
            .map(|o| {
                index
                    .get(o.as_str())
                    .copied()
                    .ok_or_else(|| Error::Config(format!("unknown output node '{o}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.nodes.iter().map(|n| n.layer.init_params(&mut rng)).collect();
        let buffers = spec.nodes.iter().map(|n| n.layer.init_buffers()).collect();
        Ok(ModelGraph {
            spec,
            edges,
            input_nodes,
            output_nodes,
            shapes,
            params,
            buffers,
            tape: None,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    /// Per-sample shapes of the graph inputs, in declaration order.
    pub fn input_shapes(&self) -> Vec<&[usize]> {
        self.input_nodes.iter().map(|&i| self.shapes[i].as_slice()).collect()
    }

    pub fn output_shapes(&self) -> Vec<&[usize]> {
        self.output_nodes.iter().map(|&i| self.shapes[i].as_slice()).collect()
    }

    /// Per-sample output shape of a named node.
    pub fn node_shape(&self, name: &str) -> Option<&[usize]> {
        self.spec
            .nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| self.shapes[i].as_slice())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|t| t.len()).sum()
    }

    /// Trainable parameters as `("node.param", tensor)`, in graph order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (node, ps) in self.spec.nodes.iter().zip(&self.params) {
            for ((pname, _), t) in node.layer.param_shapes().into_iter().zip(ps) {
                out.push((format!("{}.{pname}", node.name), t));
            }
        }
        out
    }

    /// Parameters and buffers, keyed by qualified name.
    pub fn state(&self) -> BTreeMap<String, &Tensor<T>> {
        let mut out: BTreeMap<String, &Tensor<T>> = self.named_params().into_iter().collect();
        for (node, bs) in self.spec.nodes.iter().zip(&self.buffers) {
            for ((bname, _), t) in node.layer.buffer_shapes().into_iter().zip(bs) {
                out.insert(format!("{}.{bname}", node.name), t);
            }
        }
        out
    }

    /// Replaces parameters and buffers; every entry must be present with a
    /// matching shape.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let expected = self.state().len();
        if state.len() != expected {
            return Err(Error::Checkpoint(format!(
                "state has {} tensors, graph expects {expected}",
                state.len()
            )));
        }
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let slots = node
                .layer
                .param_shapes()
                .into_iter()
                .map(|s| (s, false))
                .chain(node.layer.buffer_shapes().into_iter().map(|s| (s, true)));
            let (mut pi, mut bi) = (0, 0);
            for ((name, shape), is_buffer) in slots {
                let key = format!("{}.{name}", node.name);
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{key}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                if is_buffer {
                    self.buffers[i][bi] = t.clone();
                    bi += 1;
                } else {
                    self.params[i][pi] = t.clone();
                    pi += 1;
                }
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }

    /// Converts to another scalar type, keeping all values.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        let conv = |v: &Vec<Vec<Tensor<T>>>| v.iter().map(|ts| ts.iter().map(|t| t.cast()).collect()).collect();
        ModelGraph {
            spec: self.spec.clone(),
            edges: self.edges.clone(),
            input_nodes: self.input_nodes.clone(),
            output_nodes: self.output_nodes.clone(),
            shapes: self.shapes.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            tape: None,
        }
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.input_nodes.len() {
            return Err(Error::shape(
                "graph",
                format!("expected {} inputs, got {}", self.input_nodes.len(), inputs.len()),
            ));
        }
        let batch = inputs[0].batch();
        for (&node, t) in self.input_nodes.iter().zip(inputs) {
            let name = &self.spec.nodes[node].name;
            if t.shape().len() != self.shapes[node].len() + 1 || t.sample_shape() != self.shapes[node].as_slice() {
                return Err(Error::shape(
                    name,
                    format!("expected N x {:?}, got {:?}", self.shapes[node], t.shape()),
                ));
            }
            if t.batch() != batch || batch == 0 {
                return Err(Error::shape(name, format!("batch {} differs or is empty", t.batch())));
            }
        }
        Ok(())
    }

    fn run(&self, inputs: &[Tensor<T>], mode: Mode, keep: bool) -> Result<(Tape<T>, Vec<Option<Vec<Tensor<T>>>>)> {
        self.check_inputs(inputs)?;
        let n = self.spec.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut caches = Vec::with_capacity(n);
        let mut updates = Vec::with_capacity(n);
        // Last consumer of each node, so values can be dropped early when no
        // tape is kept.
        let mut last_use = vec![0usize; n];
        for (i, ins) in self.edges.iter().enumerate() {
            for &j in ins {
                last_use[j] = i;
            }
        }
        for &o in &self.output_nodes {
            last_use[o] = usize::MAX;
        }
        let mut next_input = inputs.iter();
        for i in 0..n {
            let node = &self.spec.nodes[i];
            if matches!(node.layer, LayerSpec::Input { .. }) {
                values[i] = next_input.next().cloned();
                caches.push(Cache::None);
                updates.push(None);
                continue;
            }
            let ins: Vec<&Tensor<T>> = self.edges[i]
                .iter()
                .map(|&j| values[j].as_ref().expect("inputs evaluated first"))
                .collect();
            let out = layers::forward(&node.layer, &self.params[i], &self.buffers[i], &ins, mode, i)?;
            values[i] = Some(out.output);
            caches.push(if keep { out.cache } else { Cache::None });
            updates.push(out.buffers);
            if !keep {
                for &j in &self.edges[i] {
                    if last_use[j] == i {
                        values[j] = None;
                    }
                }
            }
        }
        Ok((Tape { values, caches }, updates))
    }

    fn collect_outputs(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.output_nodes
            .iter()
            .map(|&o| tape.values[o].clone().expect("outputs are kept"))
            .collect()
    }

    /// Evaluates the graph and records a tape for [`ModelGraph::backward`].
    /// Training mode also updates batchnorm running statistics.
    pub fn forward(&mut self, inputs: &[Tensor<T>], mode: Mode) -> Result<Vec<Tensor<T>>> {
        let (tape, updates) = self.run(inputs, mode, true)?;
        if mode.training {
            for (slot, up) in self.buffers.iter_mut().zip(updates) {
                if let Some(b) = up {
                    *slot = b;
                }
            }
        }
        let outs = self.collect_outputs(&tape);
        self.tape = Some(tape);
        Ok(outs)
    }

    /// Evaluates without recording a tape or touching any state.
    pub fn infer(&self, inputs: &[Tensor<T>], mode: Mode) -> Result<Vec<Tensor<T>>> {
        let (tape, _) = self.run(inputs, mode, false)?;
        Ok(self.collect_outputs(&tape))
    }

    /// Back-propagates gradients of a scalar objective with respect to each
    /// output. Consumes the tape of the preceding forward pass.
    pub fn backward(&mut self, output_grads: &[Tensor<T>]) -> Result<Gradients<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward pass".into()))?;
        if output_grads.len() != self.output_nodes.len() {
            return Err(Error::shape(
                "graph",
                format!("expected {} output gradients, got {}", self.output_nodes.len(), output_grads.len()),
            ));
        }
        let n = self.spec.nodes.len();
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (&o, g) in self.output_nodes.iter().zip(output_grads) {
            let v = tape.values[o].as_ref().expect("outputs are kept");
            if g.shape() != v.shape() {
                return Err(Error::shape(
                    &self.spec.nodes[o].name,
                    format!("gradient shape {:?} != output shape {:?}", g.shape(), v.shape()),
                ));
            }
            accumulate(&mut node_grads[o], g.clone());
        }
        let mut params: Vec<Vec<Tensor<T>>> = self
            .params
            .iter()
            .map(|ps| ps.iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        for i in (0..n).rev() {
            let Some(dy) = node_grads[i].take() else { continue };
            let node = &self.spec.nodes[i];
            if matches!(node.layer, LayerSpec::Input { .. }) {
                node_grads[i] = Some(dy);
                continue;
            }
            let ins: Vec<&Tensor<T>> = self.edges[i]
                .iter()
                .map(|&j| tape.values[j].as_ref().expect("tape keeps values"))
                .collect();
            let out = tape.values[i].as_ref().expect("tape keeps values");
            let dins = layers::backward(&node.layer, &self.params[i], &ins, out, &tape.caches[i], &dy, &mut params[i]);
            for (&j, g) in self.edges[i].iter().zip(dins) {
                accumulate(&mut node_grads[j], g);
            }
        }
        let inputs = self
            .input_nodes
            .iter()
            .map(|&i| {
                node_grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(tape.values[i].as_ref().expect("input").shape()))
            })
            .collect();
        Ok(Gradients { params, inputs })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GraphSpec {
        let mut g = GraphSpec::new();
        g.input("x", &[1, 4, 4]);
        g.add(
            "conv",
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            &["x"],
        );
        g.add("act", LayerSpec::Relu, &["conv"]);
        g.output("act");
        g
    }

    #[test]
    fn rejects_unknown_and_cyclic_inputs() {
        let mut g = tiny();
        g.nodes[1].inputs = vec!["missing".into()];
        assert!(ModelGraph::<f32>::new(g, 0).unwrap_err().to_string().contains("unknown"));
        let mut g = tiny();
        g.nodes[1].inputs = vec!["act".into()];
        assert!(ModelGraph::<f32>::new(g, 0).unwrap_err().to_string().contains("cycle"));
        let mut g = tiny();
        g.nodes[2].name = "conv".into();
        assert!(ModelGraph::<f32>::new(g, 0).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = GraphSpec::new();
        g.input("x", &[3, 8, 8]);
        g.add(
            "enc1",
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            &["x"],
        );
        g.output("enc1");
        let err = ModelGraph::<f32>::new(g, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { ref layer, .. } if layer == "enc1"));
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = ModelGraph::<f32>::new(tiny(), 1).unwrap();
        assert!(matches!(m.backward(&[Tensor::zeros(&[1, 2, 4, 4])]), Err(Error::State(_))));
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        m.forward(&[x], Mode::EVAL).unwrap();
        assert!(m.backward(&[Tensor::zeros(&[1, 2, 4, 4])]).is_ok());
        assert!(m.backward(&[Tensor::zeros(&[1, 2, 4, 4])]).is_err());
    }

    #[test]
    fn input_shape_checked_at_run_time() {
        let m = ModelGraph::<f32>::new(tiny(), 1).unwrap();
        let err = m.infer(&[Tensor::zeros(&[1, 1, 5, 4])], Mode::EVAL).unwrap_err();
        assert!(err.to_string().contains('x'));
    }

    #[test]
    fn same_seed_same_params() {
        let a = ModelGraph::<f32>::new(tiny(), 5).unwrap();
        let b = ModelGraph::<f32>::new(tiny(), 5).unwrap();
        let c = ModelGraph::<f32>::new(tiny(), 6).unwrap();
        assert_eq!(a.params().collect::<Vec<_>>(), b.params().collect::<Vec<_>>());
        assert_ne!(a.params().collect::<Vec<_>>(), c.params().collect::<Vec<_>>());
        assert_eq!(a.param_count(), 2 * 9 + 2);
    }
}
