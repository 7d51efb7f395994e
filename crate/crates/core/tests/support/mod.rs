//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdd_core::losses::{self, LossKind, LossResult};
use sdd_core::models::{build_model, FusionConfig, Variant};
use sdd_core::nn::gradcheck::{central_difference, check_graph, relative_error};
use sdd_core::nn::{GraphSpec, LayerSpec, Mode, ModelGraph, Tensor};

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [1, 2, 3];

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub struct Case {
    pub name: &'static str,
    pub spec: GraphSpec,
    pub inputs: Vec<Vec<usize>>,
    pub mode: Mode,
}

/// Worst relative error over the checked coordinates, and where.
pub struct Worst {
    pub error: f64,
    pub at: String,
}

fn single(name: &'static str, layer: LayerSpec, shape: &[usize], mode: Mode) -> Case {
    let mut g = GraphSpec::new();
    g.input("x", &shape[1..]);
    g.add("layer", layer, &["x"]);
    g.output("layer");
    Case { name, spec: g, inputs: vec![shape.to_vec()], mode }
}

/// One graph per layer kind (and mode, where behaviour differs).
pub fn layer_cases() -> Vec<Case> {
    let conv = |i, o, k, s, p| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: p };
    let mut cases = vec![
        single("conv2d", conv(2, 3, 3, 2, 1), &[2, 2, 7, 7], Mode::EVAL),
        single("conv2d 1x1", conv(3, 2, 1, 1, 0), &[2, 3, 4, 4], Mode::EVAL),
        single("maxpool2d", LayerSpec::MaxPool2d { size: 2 }, &[2, 2, 4, 4], Mode::EVAL),
        single("avgpool2d", LayerSpec::AvgPool2d { size: 2 }, &[2, 2, 4, 4], Mode::EVAL),
        single("upsample2d", LayerSpec::Upsample2d { factor: 2 }, &[2, 2, 3, 3], Mode::EVAL),
        single("batchnorm train", LayerSpec::BatchNorm { channels: 3 }, &[4, 3, 3, 3], Mode::train(0)),
        single("batchnorm eval", LayerSpec::BatchNorm { channels: 3 }, &[4, 3, 3, 3], Mode::EVAL),
        single("batchnorm dense", LayerSpec::BatchNorm { channels: 5 }, &[6, 5], Mode::train(0)),
        single("relu", LayerSpec::Relu, &[2, 2, 3, 3], Mode::EVAL),
        single("sigmoid", LayerSpec::Sigmoid, &[2, 2, 3, 3], Mode::EVAL),
        single("dense", LayerSpec::Dense { in_features: 6, out_features: 4 }, &[3, 6], Mode::EVAL),
        single("self attention", LayerSpec::Attention { dim: 4, heads: 2 }, &[2, 4, 2, 3], Mode::EVAL),
        single(
            "residual identity skip",
            LayerSpec::ResidualBlock { in_channels: 3, out_channels: 3, stride: 1 },
            &[3, 3, 4, 4],
            Mode::train(0),
        ),
        single(
            "residual projection skip",
            LayerSpec::ResidualBlock { in_channels: 2, out_channels: 3, stride: 2 },
            &[3, 2, 6, 6],
            Mode::train(0),
        ),
    ];

    let mut g = GraphSpec::new();
    g.input("a", &[2, 3, 3]);
    g.input("b", &[2, 3, 3]);
    g.add("cat_c", LayerSpec::Concat { axis: 1 }, &["a", "b"]);
    g.add("cat_h", LayerSpec::Concat { axis: 2 }, &["a", "b"]);
    g.add("slice", LayerSpec::Slice { axis: 2, start: 1, len: 3 }, &["cat_h"]);
    g.add("sum", LayerSpec::Add { average: true }, &["a", "slice"]);
    g.add("flat", LayerSpec::Reshape { shape: vec![18] }, &["sum"]);
    g.add("flat_c", LayerSpec::Reshape { shape: vec![36] }, &["cat_c"]);
    g.output("flat");
    g.output("flat_c");
    cases.push(Case {
        name: "concat/slice/add/reshape",
        spec: g,
        inputs: vec![vec![2, 2, 3, 3], vec![2, 2, 3, 3]],
        mode: Mode::EVAL,
    });

    let att = LayerSpec::Attention { dim: 4, heads: 2 };
    let mut g = GraphSpec::new();
    g.input("x", &[4, 3, 2]);
    g.input("ctx", &[4, 5, 1]);
    g.add("cross", att.clone(), &["x", "ctx"]);
    g.output("cross");
    cases.push(Case { name: "cross attention", spec: g, inputs: vec![vec![2, 4, 3, 2], vec![2, 4, 5, 1]], mode: Mode::EVAL });

    let mut g = GraphSpec::new();
    g.input("x", &[4, 2, 2]);
    g.add("tokens", LayerSpec::LearnedTokens { dim: 4, tokens: 3 }, &["x"]);
    g.add("gather", att.clone(), &["tokens", "x"]);
    g.add("scatter", att, &["x", "gather"]);
    g.output("scatter");
    cases.push(Case { name: "learned tokens", spec: g, inputs: vec![vec![2, 4, 2, 2]], mode: Mode::EVAL });

    let mut g = GraphSpec::new();
    g.input("mu", &[3]);
    g.input("logvar", &[3]);
    g.add("z", LayerSpec::Sampling, &["mu", "logvar"]);
    g.output("z");
    cases.push(Case { name: "sampling", spec: g, inputs: vec![vec![2, 3], vec![2, 3]], mode: Mode::train(42) });
    cases
}

pub fn check_case(case: &Case, seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 101);
    let inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|s| random(s, &mut rng, -1.0, 1.0)).collect();
    let mut g = ModelGraph::<f64>::new(case.spec.clone(), seed).unwrap();
    let r = check_graph(&mut g, &inputs, case.mode, 5, seed).unwrap();
    assert!(r.checked > 0, "{}: nothing checked", case.name);
    Worst { error: r.max_rel_error, at: r.worst }
}

fn loss_error(f: &dyn Fn(&Tensor<f64>, &Tensor<f64>) -> LossResult<f64>, shape: &[usize], seed: u64) -> Worst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = random(shape, &mut rng, 0.0, 1.0);
    let y_hat = random(shape, &mut rng, 0.0, 1.0);
    let r = f(&y, &y_hat);
    let x0 = y_hat.data().to_vec();
    let mut eval = |x: &[f64]| f(&y, &Tensor::from_vec(shape, x.to_vec()).unwrap()).value;
    let mut worst = Worst { error: 0.0, at: String::new() };
    for _ in 0..5 {
        let i = rng.random_range(0..x0.len());
        let err = relative_error(r.grad.data()[i], central_difference(&mut eval, &x0, i));
        if err > worst.error {
            worst = Worst { error: err, at: format!("index {i}") };
        }
    }
    worst
}

/// The four reconstruction losses and the sparsity penalty.
pub fn loss_cases(seed: u64) -> Vec<(String, Worst)> {
    let mut out: Vec<(String, Worst)> = LossKind::ALL
        .iter()
        .map(|&k| (k.id().to_string(), loss_error(&|y, p| k.compute(y, p).unwrap(), &[2, 16, 16], seed)))
        .collect();
    let sparsity = |_: &Tensor<f64>, p: &Tensor<f64>| losses::sparsity_penalty(&p.map(|v| v - 0.5), 0.3).unwrap();
    out.push(("sparsity".into(), loss_error(&sparsity, &[40], seed)));
    out
}

/// Narrow enough for exhaustive-ish checks, same topology as full width.
pub fn tiny(v: Variant) -> FusionConfig {
    let mut c = FusionConfig::new(v).with_widths([4, 4], 4);
    c.attention_heads = 2;
    c.bottleneck_tokens = 2;
    c
}

/// Whole-model forward+backward on a 2-sample batch in training mode.
pub fn variant_error(v: Variant, seed: u64) -> Worst {
    let mut m = build_model::<f64>(&tiny(v), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = m
        .graph
        .input_shapes()
        .iter()
        .map(|s| random(&[&[2][..], s].concat(), &mut rng, 0.0, 1.0))
        .collect();
    let r = check_graph(&mut m.graph, &inputs, Mode::train(seed), 2, seed).unwrap();
    assert!(r.checked > 0);
    Worst { error: r.max_rel_error, at: r.worst }
}
