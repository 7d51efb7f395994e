//! Whole-model gradient checks for every architecture and the
//! reconstruction objective.

mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdd_core::losses::LossKind;
use sdd_core::models::{build_model, Variant};
use sdd_core::nn::gradcheck::{central_difference, relative_error};
use sdd_core::nn::{Objective, Tensor};
use support::{random, tiny, variant_error, TOL};

#[test]
fn every_variant_backpropagates_exactly() {
    for v in Variant::ALL {
        for seed in [11u64, 12, 13] {
            let w = variant_error(v, seed);
            assert!(w.error < TOL, "{v} seed {seed}: {:.3e} at {}", w.error, w.at);
        }
    }
}

#[test]
fn objective_gradient_matches_differences() {
    for (v, sparsity) in [(Variant::Cvae, None), (Variant::Maa3Pool, Some(0.05)), (Variant::MonoAud, None)] {
        for loss in LossKind::ALL {
            let mut cfg = tiny(v);
            cfg.sparsity_weight = sparsity;
            cfg.kl_weight = 50.0;
            let m = build_model::<f64>(&cfg, 3).unwrap();
            let obj = m.objective(loss);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut outputs: Vec<Tensor<f64>> =
                m.graph.output_shapes().iter().map(|s| random(&[&[2][..], s].concat(), &mut rng, 0.0, 1.0)).collect();
            if let Some((_, lv)) = m.layout.posterior {
                outputs[lv] = outputs[lv].map(|x| x - 0.5);
            }
            let targets: Vec<Tensor<f64>> =
                m.graph.input_shapes().iter().map(|s| random(&[&[2][..], s].concat(), &mut rng, 0.0, 1.0)).collect();
            let (_, grads) = obj.evaluate(&outputs, &targets).unwrap();
            for k in 0..outputs.len() {
                let x0 = outputs[k].data().to_vec();
                let shape = outputs[k].shape().to_vec();
                let mut f = |x: &[f64]| {
                    let mut o = outputs.clone();
                    o[k] = Tensor::from_vec(&shape, x.to_vec()).unwrap();
                    obj.evaluate(&o, &targets).unwrap().0
                };
                for _ in 0..4 {
                    let i = rng.random_range(0..x0.len());
                    let numeric = central_difference(&mut f, &x0, i);
                    let err = relative_error(grads[k].data()[i], numeric);
                    assert!(err < TOL, "{v} {} output {k} index {i}: {err:.3e}", loss.id());
                }
            }
        }
    }
}
