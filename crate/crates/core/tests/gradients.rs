use std::collections::BTreeSet;

use proptest::prelude::*;
use tte_core::gradcheck::{check_gradients, numeric_gradient, relative_error, RandomGraph};
use tte_core::{EnsembleModel, Model, Tape, Tensor, TransformSpec};

#[test]
fn random_graphs_match_finite_differences() {
    let mut seen = BTreeSet::new();
    for seed in 0..100 {
        let g = RandomGraph::sample(seed).unwrap();
        // h small enough that the stencil rarely straddles a ReLU kink
        let errs = check_gradients(&g, 1e-6).unwrap();
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 1e-4, "seed {seed} ({:?}): relative error {worst:e}", g.primitives());
        seen.extend(g.primitives().iter().copied());
    }
    for p in [
        "add", "sub", "mul", "scale", "relu", "neg", "exp", "log", "sign", "conv2d", "channel_bias", "pad2d",
        "slice2d", "flip_width", "avg_pool2", "reshape", "matmul", "row_bias", "sum", "mean", "cross_entropy",
        "cross_entropy_each", "dlr_targeted", "flip", "padcrop", "flippadcrop", "gaussian", "ensemble",
    ] {
        assert!(seen.contains(p), "primitive {p} never sampled");
    }
}

fn image(seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(&[1, 1, 8, 8], |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

#[test]
fn ensemble_input_gradient_matches_finite_differences() {
    let base = tte_core::Classifier::init(tte_core::Architecture::new(1, 8, 8, 4), 5).unwrap();
    let transforms = vec![TransformSpec::Flip, TransformSpec::PadCrop { o_x: 1, o_y: 3, pad: 2 }];
    let tte = EnsembleModel::wrap(&base, transforms.clone());
    let x = image(1);
    let loss = |x: &Tensor| -> tte_core::Result<f64> {
        let t = Tape::new();
        let s = tte.forward(&t, t.leaf(x.clone()))?;
        Ok(t.softmax_cross_entropy(s, &[2])?.value().item())
    };
    let numeric = numeric_gradient(&loss, &x, 1e-5).unwrap();
    let t = Tape::new();
    let v = t.leaf(x.clone());
    let s = tte.forward(&t, v).unwrap();
    let l = t.softmax_cross_entropy(s, &[2]).unwrap();
    let analytic = t.backward(l).unwrap().wrt(v);
    assert!(relative_error(&analytic, &numeric) < 1e-4);
}

#[test]
fn ensemble_score_gradient_is_mean_of_member_gradients() {
    let base = tte_core::Classifier::init(tte_core::Architecture::new(1, 8, 8, 4), 9).unwrap();
    let members = [TransformSpec::Identity, TransformSpec::Flip, TransformSpec::FlipPadCrop { o_x: 4, o_y: 0, pad: 2 }];
    let tte = EnsembleModel::wrap(&base, members[1..].to_vec());
    let x = image(4);
    // gradient of score[0][1] w.r.t. the input
    let grad = |m: &dyn Model| {
        let t = Tape::new();
        let v = t.leaf(x.clone());
        let s = m.forward(&t, v).unwrap();
        let pick = t.leaf(Tensor::from_fn(&[1, 4], |i| if i == 1 { 1.0 } else { 0.0 }));
        let l = s.mul(pick).unwrap().sum().unwrap();
        t.backward(l).unwrap().wrt(v)
    };
    let whole = grad(&tte);
    let mut mean = Tensor::zeros(x.shape());
    for spec in members {
        let g = grad(&tte_core::Transformed::new(&base, spec).unwrap());
        for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += v / members.len() as f64;
        }
    }
    assert!(whole.max_abs_diff(&mean) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // <pad(x), y> == <x, pad*(y)>, where the adjoint of padding is the interior slice
    #[test]
    fn pad_and_interior_slice_are_adjoint(seed in 0u64..1000, pad in 1usize..4) {
        let x = image(seed);
        let t = Tape::new();
        let padded = t.pad2d(t.leaf(x.clone()), pad).unwrap();
        let side = 8 + 2 * pad;
        let y = Tensor::from_fn(&[1, 1, side, side], |i| ((i * 31 + seed as usize) % 17) as f64 - 8.0);
        let lhs = padded.value().dot(&y);
        let t2 = Tape::new();
        let inner = t2.slice2d(t2.leaf(y), pad, pad, 8).unwrap();
        let rhs = x.dot(&inner.value());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn flip_is_an_involution(seed in 0u64..1000) {
        let x = image(seed);
        let once = TransformSpec::Flip.apply_tensor(&x).unwrap();
        prop_assert!(TransformSpec::Flip.apply_tensor(&once).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn flip_commutes_with_mirrored_crop(seed in 0u64..1000, ox in 0usize..9, oy in 0usize..9) {
        let x = image(seed);
        let pad = 4;
        let lhs = TransformSpec::Flip.apply_tensor(&TransformSpec::PadCrop { o_x: ox, o_y: oy, pad }.apply_tensor(&x).unwrap()).unwrap();
        let rhs = TransformSpec::PadCrop { o_x: 2 * pad - ox, o_y: oy, pad }.apply_tensor(&TransformSpec::Flip.apply_tensor(&x).unwrap()).unwrap();
        prop_assert!(lhs.bitwise_eq(&rhs));
    }
}
