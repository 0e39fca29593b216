use alloc::vec;
use alloc::vec::Vec;

use super::gradcheck::{self, FD_REL_TOL};
use super::*;
use crate::rng::{self, stream, Stream};

fn randv(rng: &mut rng::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng::uniform(rng, lo, hi)).collect()
}

/// He-style uniform init used across the tests.
fn randw(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    randv(rng, n, -0.5, 0.5)
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
    assert!(!t.is_finite());
}

#[test]
fn softmax_symmetry_and_saturation() {
    let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let s = softmax(&x, 1).unwrap();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = Tensor::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
    let s = softmax(&x, 1).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!(s.data()[1] < 1e-12 && s.data()[2] < 1e-12);

    let x = Tensor::new(
        vec![1, 3],
        vec![crate::math::ln(2.0), crate::math::ln(1.0), crate::math::ln(1.0)],
    )
    .unwrap();
    let s = softmax(&x, 1).unwrap();
    assert!((s.data()[0] - 0.5).abs() < 1e-12);
    assert!((s.data()[1] - 0.25).abs() < 1e-12);
    assert!((s.data()[2] - 0.25).abs() < 1e-12);

    // axis 0 normalizes columns
    let x = Tensor::new(vec![2, 2], vec![0.0, 5.0, 0.0, 5.0]).unwrap();
    let s = softmax(&x, 0).unwrap();
    for j in 0..2 {
        assert!((s.data()[j] + s.data()[2 + j] - 1.0).abs() < 1e-12);
        assert!((s.data()[j] - 0.5).abs() < 1e-12);
    }

    let bad = Tensor::new(vec![1, 2], vec![f64::INFINITY, 0.0]).unwrap();
    assert!(softmax(&bad, 1).is_err());
}

#[test]
fn cross_entropy_examples() {
    // perfect one-hot logits scaled by 1e3
    let mut logits = Tensor::zeros(vec![3, 1, 2]);
    let labels = vec![1u16, 2u16];
    logits.data_mut()[1 * 2] = 1e3; // class 1, pixel 0
    logits.data_mut()[2 * 2 + 1] = 1e3; // class 2, pixel 1
    let loss = cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
    assert!(loss < 1e-6, "loss {loss}");

    // uniform logits, K = 4 -> ln 4
    let logits = Tensor::zeros(vec![4, 2, 2]);
    let labels = vec![0u16, 1, 2, 3];
    let loss = cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
    assert!((loss - crate::math::ln(4.0)).abs() < 1e-12);

    // 2 pixels, one ignored -> equals the single-pixel NLL by hand
    let logits = Tensor::new(vec![2, 1, 2], vec![0.3, 9.0, -0.2, -9.0]).unwrap();
    let labels = vec![1u16, IGNORE_LABEL];
    let loss = cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
    // pixel 0 logits: class0 = 0.3, class1 = -0.2, label 1
    let z = crate::math::exp(0.3) + crate::math::exp(-0.2);
    let by_hand = crate::math::ln(z) - (-0.2);
    assert!((loss - by_hand).abs() < 1e-12);

    // all ignored -> exactly zero
    let labels = vec![IGNORE_LABEL, IGNORE_LABEL];
    assert_eq!(cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap(), 0.0);

    // out-of-range label is an error
    let labels = vec![5u16, 0];
    assert!(cross_entropy(&logits, &labels, IGNORE_LABEL).is_err());
}

#[test]
fn backward_sum_gives_ones_and_square_gives_2x() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.0]);
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![3], vec![1.0, 2.0, 3.0]);
    let sq = tape.mul(x, x);
    let s = tape.sum_all(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_foreign_and_nonscalar_vars() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![2], vec![1.0, 2.0]);
    assert!(matches!(tape.backward(x), Err(crate::Error::ShapeMismatch(_))));

    let mut t2 = Tape::new(&store, true);
    let _ = t2.leaf(vec![1], vec![1.0]);
    let bogus = {
        let mut t3 = Tape::new(&store, true);
        let a = t3.leaf(vec![1], vec![1.0]);
        let b = t3.leaf(vec![1], vec![1.0]);
        let c = t3.add_n(&[a, b]);
        let d = t3.add_n(&[c, a]);
        let _ = d;
        // a Var whose index is beyond t2's single node
        d
    };
    assert!(matches!(t2.backward(bogus), Err(crate::Error::NotOnTape)));
}

/// FD oracle over a scalar random projection of a primitive's output,
/// differentiating w.r.t. the input map.
fn check_primitive_input_grad(kind: PrimitiveKind, c_in: usize, c_out: usize, h: usize, w: usize, stride: usize, seed: u64) {
    let mut rng = stream(seed, Stream::NetInit);
    let mut store = ParamStore::new();
    let weights = alloc_weights_for(kind, &mut store, c_in, c_out, &mut rng);
    let x0 = randv(&mut rng, c_in * h * w, -1.0, 1.0);
    let (oc, oh, ow) = out_dims(kind, c_in, c_out, h, w, stride);
    let proj = randv(&mut rng, oc * oh * ow, -1.0, 1.0);

    let eval = |xv: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let x = tape.leaf(vec![c_in, h, w], xv.to_vec());
        let y = apply_primitive(&mut tape, kind, x, weights.as_ref(), stride, c_out).unwrap();
        let s = tape.dot_const(y, proj.clone());
        tape.scalar(s)
    };

    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![c_in, h, w], x0.clone());
    let y = apply_primitive(&mut tape, kind, x, weights.as_ref(), stride, c_out).unwrap();
    let s = tape.dot_const(y, proj.clone());
    let grads = tape.backward(s).unwrap();
    let analytic = grads.leaf(x).unwrap().to_vec();
    let worst = gradcheck::check(eval, &x0, &analytic);
    assert!(worst < FD_REL_TOL, "{}: input grad rel err {worst}", kind.name());
}

fn out_dims(kind: PrimitiveKind, c_in: usize, c_out: usize, h: usize, w: usize, stride: usize) -> (usize, usize, usize) {
    match kind {
        PrimitiveKind::BilinearUpsampleX2 => (c_in, 2 * h, 2 * w),
        PrimitiveKind::TransposedConvX2 => (c_out, 2 * h, 2 * w),
        PrimitiveKind::Skip | PrimitiveKind::MaxPool3x3 => (c_in, h / stride, w / stride),
        _ => (c_out, h / stride, w / stride),
    }
}

fn alloc_weights_for(
    kind: PrimitiveKind,
    store: &mut ParamStore,
    c_in: usize,
    c_out: usize,
    rng: &mut rng::Rng,
) -> Option<PrimitiveWeights> {
    match kind {
        PrimitiveKind::Conv3x3 => Some(PrimitiveWeights::Conv {
            w: store.add(vec![c_out, c_in, 3, 3], randw(rng, c_out * c_in * 9), true),
            bn: BnParams::alloc(store, c_out),
        }),
        PrimitiveKind::Conv1x1 => Some(PrimitiveWeights::Conv {
            w: store.add(vec![c_out, c_in, 1, 1], randw(rng, c_out * c_in), true),
            bn: BnParams::alloc(store, c_out),
        }),
        PrimitiveKind::SepConv3x3 | PrimitiveKind::DilSepConv3x3 { .. } => Some(PrimitiveWeights::SepConv {
            dw: store.add(vec![c_in, 3, 3], randw(rng, c_in * 9), true),
            pw: store.add(vec![c_out, c_in, 1, 1], randw(rng, c_out * c_in), true),
            bn: BnParams::alloc(store, c_out),
        }),
        PrimitiveKind::GlobalPool { .. } => Some(PrimitiveWeights::GlobalPool {
            w: store.add(vec![c_out, c_in, 1, 1], randw(rng, c_out * c_in), true),
            b: store.add(vec![c_out], randw(rng, c_out), true),
        }),
        PrimitiveKind::TransposedConvX2 => Some(PrimitiveWeights::TConv {
            w: store.add(vec![c_in, c_out, 2, 2], randw(rng, c_in * c_out * 4), true),
            bn: BnParams::alloc(store, c_out),
        }),
        _ => None,
    }
}

#[test]
fn primitive_input_gradients_match_finite_differences() {
    check_primitive_input_grad(PrimitiveKind::Conv3x3, 3, 4, 6, 8, 1, 21);
    check_primitive_input_grad(PrimitiveKind::Conv3x3, 4, 4, 8, 8, 2, 22);
    check_primitive_input_grad(PrimitiveKind::Conv1x1, 3, 5, 5, 7, 1, 23);
    check_primitive_input_grad(PrimitiveKind::SepConv3x3, 4, 4, 6, 6, 1, 24);
    check_primitive_input_grad(PrimitiveKind::DilSepConv3x3 { dilation: 2 }, 3, 3, 8, 10, 1, 25);
    check_primitive_input_grad(PrimitiveKind::DilSepConv3x3 { dilation: 4 }, 2, 2, 12, 12, 2, 26);
    check_primitive_input_grad(PrimitiveKind::MaxPool3x3, 3, 3, 6, 8, 1, 27);
    check_primitive_input_grad(PrimitiveKind::MaxPool3x3, 3, 3, 8, 8, 2, 28);
    check_primitive_input_grad(PrimitiveKind::GlobalPool { k: 2 }, 3, 4, 6, 8, 1, 29);
    check_primitive_input_grad(PrimitiveKind::BilinearUpsampleX2, 3, 3, 5, 6, 1, 30);
    check_primitive_input_grad(PrimitiveKind::TransposedConvX2, 3, 4, 5, 6, 1, 31);
}

#[test]
fn conv3x3_weight_gradients_match_finite_differences() {
    // the stated oracle case: (4,8,8) input, d sum(out) / d every weight
    let mut rng = stream(97, Stream::NetInit);
    let (c_in, c_out, h, w) = (4, 4, 8, 8);
    let x0 = randv(&mut rng, c_in * h * w, -1.0, 1.0);
    let w0 = randw(&mut rng, c_out * c_in * 9);

    let mut store = ParamStore::new();
    let wid = store.add(vec![c_out, c_in, 3, 3], w0.clone(), true);
    let bn = BnParams::alloc(&mut store, c_out);
    let weights = PrimitiveWeights::Conv { w: wid, bn };

    let eval_with = |stored: &mut ParamStore, wv: &[f64]| -> f64 {
        stored.value_mut(wid).copy_from_slice(wv);
        let mut tape = Tape::new(stored, true);
        let x = tape.leaf(vec![c_in, h, w], x0.clone());
        let y = apply_primitive(&mut tape, PrimitiveKind::Conv3x3, x, Some(&weights), 1, c_out).unwrap();
        let s = tape.sum_all(y);
        tape.scalar(s)
    };

    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![c_in, h, w], x0.clone());
    let y = apply_primitive(&mut tape, PrimitiveKind::Conv3x3, x, Some(&weights), 1, c_out).unwrap();
    let s = tape.sum_all(y);
    let grads = tape.backward(s).unwrap();
    let analytic = grads.params[wid.index()].clone().unwrap();

    let numeric = gradcheck::central_diff(|wv| eval_with(&mut store, wv), &w0, gradcheck::FD_EPS);
    let worst = gradcheck::max_rel_err(&analytic, &numeric, gradcheck::FD_ABS_GUARD);
    assert!(worst < FD_REL_TOL, "conv3x3 weight grad rel err {worst}");
}

#[test]
fn composite_conv_relu_sum_matches_finite_differences() {
    let mut rng = stream(41, Stream::NetInit);
    let (c, h, w) = (3, 6, 6);
    let x0 = randv(&mut rng, c * h * w, -1.0, 1.0);
    let w0 = randw(&mut rng, 2 * c * 9);
    let mut store = ParamStore::new();
    let wid = store.add(vec![2, c, 3, 3], w0, true);

    let eval = |xv: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let x = tape.leaf(vec![c, h, w], xv.to_vec());
        let wv = tape.param(wid);
        let y = tape.conv2d(x, wv, None, 1, 1);
        let y = tape.relu(y);
        let s = tape.sum_all(y);
        tape.scalar(s)
    };

    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![c, h, w], x0.clone());
    let wv = tape.param(wid);
    let y = tape.conv2d(x, wv, None, 1, 1);
    let y = tape.relu(y);
    let s = tape.sum_all(y);
    let grads = tape.backward(s).unwrap();
    let analytic = grads.leaf(x).unwrap().to_vec();
    let worst = gradcheck::check(eval, &x0, &analytic);
    assert!(worst < FD_REL_TOL, "composite rel err {worst}");
}

#[test]
fn ce_and_bn_and_matmul_gradients_match_finite_differences() {
    let mut rng = stream(55, Stream::NetInit);
    let store = ParamStore::new();

    // cross entropy w.r.t. logits (one ignored pixel)
    let logits0 = randv(&mut rng, 3 * 2 * 2, -1.0, 1.0);
    let labels = vec![0u16, 2, IGNORE_LABEL, 1];
    let eval = |lv: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let l = tape.leaf(vec![3, 2, 2], lv.to_vec());
        let (s, _) = tape.ce_sum(l, labels.clone(), IGNORE_LABEL).unwrap();
        tape.scalar(s)
    };
    let mut tape = Tape::new(&store, true);
    let l = tape.leaf(vec![3, 2, 2], logits0.clone());
    let (s, count) = tape.ce_sum(l, labels.clone(), IGNORE_LABEL).unwrap();
    assert_eq!(count, 3);
    let grads = tape.backward(s).unwrap();
    let worst = gradcheck::check(eval, &logits0, grads.leaf(l).unwrap());
    assert!(worst < FD_REL_TOL, "ce rel err {worst}");

    // batchnorm (train mode) w.r.t. input, gamma, beta via leafs
    let x0 = randv(&mut rng, 2 * 4 * 4, -2.0, 2.0);
    let g0 = vec![1.3, 0.7];
    let proj = randv(&mut rng, 2 * 4 * 4, -1.0, 1.0);
    let eval_bn = |xv: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let x = tape.leaf(vec![2, 4, 4], xv.to_vec());
        let g = tape.leaf(vec![2], g0.clone());
        let b = tape.leaf(vec![2], vec![0.1, -0.2]);
        let y = tape.batchnorm(x, g, b, None);
        let s = tape.dot_const(y, proj.clone());
        tape.scalar(s)
    };
    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![2, 4, 4], x0.clone());
    let g = tape.leaf(vec![2], g0.clone());
    let b = tape.leaf(vec![2], vec![0.1, -0.2]);
    let y = tape.batchnorm(x, g, b, None);
    let s = tape.dot_const(y, proj.clone());
    let grads = tape.backward(s).unwrap();
    let worst = gradcheck::check(eval_bn, &x0, grads.leaf(x).unwrap());
    assert!(worst < FD_REL_TOL, "bn input rel err {worst}");

    // matmul + add_row + softmax chain w.r.t. the left matrix
    let a0 = randv(&mut rng, 4 * 3, -1.0, 1.0);
    let b0 = randv(&mut rng, 3 * 5, -1.0, 1.0);
    let r0 = randv(&mut rng, 5, -0.5, 0.5);
    let proj2 = randv(&mut rng, 4 * 5, -1.0, 1.0);
    let eval_mm = |av: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let a = tape.leaf(vec![4, 3], av.to_vec());
        let bm = tape.constant(vec![3, 5], b0.clone());
        let r = tape.constant(vec![5], r0.clone());
        let y = tape.matmul(a, bm);
        let y = tape.add_row(y, r);
        let y = tape.softmax_rows(y);
        let s = tape.dot_const(y, proj2.clone());
        tape.scalar(s)
    };
    let mut tape = Tape::new(&store, true);
    let a = tape.leaf(vec![4, 3], a0.clone());
    let bm = tape.constant(vec![3, 5], b0.clone());
    let r = tape.constant(vec![5], r0.clone());
    let y = tape.matmul(a, bm);
    let y = tape.add_row(y, r);
    let y = tape.softmax_rows(y);
    let s = tape.dot_const(y, proj2.clone());
    let grads = tape.backward(s).unwrap();
    let worst = gradcheck::check(eval_mm, &a0, grads.leaf(a).unwrap());
    assert!(worst < FD_REL_TOL, "matmul chain rel err {worst}");
}

#[test]
fn mix_gradients_match_finite_differences() {
    let mut rng = stream(66, Stream::NetInit);
    let store = ParamStore::new();
    let n = 12;
    let srcs: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, n, -1.0, 1.0)).collect();
    let z0 = vec![0.2, 0.5, 0.3];
    let proj = randv(&mut rng, n, -1.0, 1.0);
    let eval = |zv: &[f64]| -> f64 {
        let mut tape = Tape::new(&store, true);
        let z = tape.leaf(vec![1, 3], zv.to_vec());
        let terms: Vec<Option<Var>> = srcs
            .iter()
            .map(|sv| Some(tape.constant(vec![3, 2, 2], sv.clone())))
            .collect();
        let y = tape.mix(z, 0, &terms);
        let s = tape.dot_const(y, proj.clone());
        tape.scalar(s)
    };
    let mut tape = Tape::new(&store, true);
    let z = tape.leaf(vec![1, 3], z0.clone());
    let terms: Vec<Option<Var>> = srcs
        .iter()
        .map(|sv| Some(tape.constant(vec![3, 2, 2], sv.clone())))
        .collect();
    let y = tape.mix(z, 0, &terms);
    let s = tape.dot_const(y, proj.clone());
    let grads = tape.backward(s).unwrap();
    let worst = gradcheck::check(eval, &z0, grads.leaf(z).unwrap());
    assert!(worst < FD_REL_TOL, "mix rel err {worst}");
}

#[test]
fn mix_one_hot_collapse_is_bitwise() {
    let mut rng = stream(77, Stream::NetInit);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, true);
    let srcs: Vec<Var> = (0..4)
        .map(|_| {
            let d = randv(&mut rng, 8, -1.0, 1.0);
            tape.constant(vec![2, 2, 2], d)
        })
        .collect();
    let z = tape.constant(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]);
    let terms: Vec<Option<Var>> = srcs.iter().map(|&v| Some(v)).collect();
    let y = tape.mix(z, 0, &terms);
    assert_eq!(tape.value(y), tape.value(srcs[2]));
}

#[test]
fn spec_primitive_examples() {
    let store = ParamStore::new();
    let mut rng = stream(9, Stream::NetInit);

    // skip at stride 1 is the identity
    let mut tape = Tape::new(&store, true);
    let xv = randv(&mut rng, 3 * 4 * 4, -1.0, 1.0);
    let x = tape.leaf(vec![3, 4, 4], xv.clone());
    let y = apply_primitive(&mut tape, PrimitiveKind::Skip, x, None, 1, 3).unwrap();
    assert_eq!(tape.value(y), xv.as_slice());

    // zero at stride 2 gives an all-zero (8,8,16) map from (8,16,32)
    let mut tape = Tape::new(&store, true);
    let x = tape.zeros(vec![8, 16, 32]);
    let y = apply_primitive(&mut tape, PrimitiveKind::Zero, x, None, 2, 8).unwrap();
    assert_eq!(tape.shape(y), &[8, 8, 16]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    // stride-2 skip must be rejected (remapped upstream)
    let mut tape = Tape::new(&store, true);
    let x = tape.zeros(vec![4, 8, 8]);
    assert!(matches!(
        apply_primitive(&mut tape, PrimitiveKind::Skip, x, None, 2, 4),
        Err(crate::Error::InvalidStride { .. })
    ));

    // parametric op without weights
    let mut tape = Tape::new(&store, true);
    let x = tape.zeros(vec![4, 8, 8]);
    assert!(matches!(
        apply_primitive(&mut tape, PrimitiveKind::Conv3x3, x, None, 1, 4),
        Err(crate::Error::MissingWeights(_))
    ));

    // odd extents cannot take stride 2
    let mut tape = Tape::new(&store, true);
    let x = tape.zeros(vec![4, 7, 8]);
    assert!(matches!(
        apply_primitive(&mut tape, PrimitiveKind::Zero, x, None, 2, 4),
        Err(crate::Error::InvalidStride { .. })
    ));
}

#[test]
fn raw_conv_is_linear_without_normalization() {
    let mut rng = stream(13, Stream::NetInit);
    let (cin, cout, h, w) = (3, 4, 6, 8);
    let wv = randw(&mut rng, cout * cin * 9);
    let xv = randv(&mut rng, cin * h * w, -1.0, 1.0);
    let yv = randv(&mut rng, cin * h * w, -1.0, 1.0);
    let (a, b) = (1.7, -0.6);

    let mut store = ParamStore::new();
    let wid = store.add(vec![cout, cin, 3, 3], wv, true);

    let run = |input: Vec<f64>| -> Vec<f64> {
        let mut tape = Tape::new(&store, true);
        let x = tape.constant(vec![cin, h, w], input);
        let wvar = tape.param(wid);
        let y = tape.conv2d(x, wvar, None, 1, 1);
        tape.value(y).to_vec()
    };

    let combo: Vec<f64> = xv.iter().zip(yv.iter()).map(|(&x, &y)| a * x + b * y).collect();
    let lhs = run(combo);
    let fx = run(xv.clone());
    let fy = run(yv.clone());
    for i in 0..lhs.len() {
        let rhs = a * fx[i] + b * fy[i];
        assert!((lhs[i] - rhs).abs() < 1e-10, "linearity at {i}");
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let build = || -> Vec<f64> {
        let mut rng = stream(31, Stream::NetInit);
        let mut store = ParamStore::new();
        let wid = store.add(vec![4, 3, 3, 3], randw(&mut rng, 4 * 27), true);
        let bn = BnParams::alloc(&mut store, 4);
        let weights = PrimitiveWeights::Conv { w: wid, bn };
        let xv = randv(&mut rng, 3 * 8 * 8, -1.0, 1.0);
        let mut tape = Tape::new(&store, true);
        let x = tape.leaf(vec![3, 8, 8], xv);
        let y = apply_primitive(&mut tape, PrimitiveKind::Conv3x3, x, Some(&weights), 1, 4).unwrap();
        tape.value(y).to_vec()
    };
    let a = build();
    let b = build();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn maxpool_preserves_shape_at_stride_1_and_bilinear_preserves_constants() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, true);
    let x = tape.constant(vec![2, 5, 7], vec![1.5; 70]);
    let y = tape.maxpool3(x, 1);
    assert_eq!(tape.shape(y), &[2, 5, 7]);

    let up = tape.bilinear(x, 10, 14);
    assert!(tape.value(up).iter().all(|&v| (v - 1.5).abs() < 1e-15));
    let down = tape.bilinear(x, 3, 4);
    assert!(tape.value(down).iter().all(|&v| (v - 1.5).abs() < 1e-15));
}

#[test]
fn gradients_accumulate_across_shared_uses() {
    // x used twice: d(sum(x + x))/dx = 2
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, true);
    let x = tape.leaf(vec![3], vec![1.0, 2.0, 3.0]);
    let y = tape.add_n(&[x, x]);
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[2.0, 2.0, 2.0]);
}
