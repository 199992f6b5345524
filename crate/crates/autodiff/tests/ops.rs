use nerfcodec_autodiff::{AutodiffError, Boundary, Tape, Tensor};

#[test]
fn square_of_three() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.value(y).item(), 9.0);
    assert_eq!(t.backward(y).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn matmul_of_ones() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::ones([2, 3]));
    let b = t.leaf(Tensor::ones([3, 1]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 1]);
    assert_eq!(t.value(c).data(), &[3.0, 3.0]);
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut t = Tape::<f32>::new();
    let x = Tensor::from_fn([1, 5, 7], |i| (i as f32 * 0.37).sin());
    let mut k = Tensor::zeros([1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let (xv, kv) = (t.leaf(x.clone()), t.constant(k));
    let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
    assert!(t.value(y).bit_eq(&x));
}

#[test]
fn gather_outside_zero_boundary_is_zero_with_zero_gradient() {
    let mut t = Tape::<f32>::new();
    let p = t.leaf(Tensor::ones([2, 3, 3]));
    let g = t.gather2d(p, &[[-5.0, 1.0], [1.0, 9.0]], Boundary::Zero).unwrap();
    assert!(t.value(g).data().iter().all(|&v| v == 0.0));
    let s = t.sum(g).unwrap();
    let grads = t.backward(s).unwrap();
    assert!(grads.wrt(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gather_on_node_is_exact() {
    let mut t = Tape::<f32>::new();
    let plane = Tensor::from_fn([1, 4, 4], |i| i as f32 * 1.25 - 3.0);
    let p = t.constant(plane.clone());
    let g = t.gather2d(p, &[[2.0, 3.0], [0.0, 0.0]], Boundary::Clamp).unwrap();
    assert_eq!(t.value(g).data(), &[plane.at(&[0, 2, 3]), plane.at(&[0, 0, 0])]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let unused = t.leaf(Tensor::ones([2, 2]));
    let y = t.square(x).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), Tensor::zeros([2, 2]));
}

#[test]
fn frozen_inputs_receive_nothing() {
    let mut t = Tape::<f32>::new();
    let w = t.constant(Tensor::full([2, 2], 0.5));
    let x = t.leaf(Tensor::ones([2, 2]));
    let d = t.detach(x);
    let y = t.matmul(w, x).unwrap();
    let z = t.mul(y, d).unwrap();
    let s = t.sum(z).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(w).is_none());
    assert!(g.get(d).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::ones([3]));
    assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::ones([2, 3]));
    let b = t.leaf(Tensor::ones([2, 3]));
    assert!(matches!(t.matmul(a, b), Err(AutodiffError::Shape { op: "matmul", .. })));
    let c = t.leaf(Tensor::ones([3]));
    assert!(matches!(t.add(a, c), Err(AutodiffError::Shape { .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut t = Tape::<f32>::new().with_finite_check(true);
    let x = t.leaf(Tensor::scalar(0.0));
    match t.log(x) {
        Err(AutodiffError::NonFinite { op, node }) => {
            assert_eq!(op, "log");
            assert_eq!(node, 1);
        }
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn masked_mean_ignores_input_order() {
    let views: Vec<Tensor<f32>> = (0..5)
        .map(|v| Tensor::from_fn([3, 4], |i| ((v * 31 + i) as f32 * 0.713).sin() * 1e3))
        .collect();
    let masks: Vec<Tensor<f32>> = (0..5)
        .map(|v| Tensor::from_fn([4], |i| ((v + i) % 3 != 0) as u8 as f32))
        .collect();
    let run = |order: &[usize]| {
        let mut t = Tape::<f32>::new();
        let vs: Vec<_> = order.iter().map(|&i| t.constant(views[i].clone())).collect();
        let ms: Vec<_> = order.iter().map(|&i| masks[i].clone()).collect();
        let m = t.masked_mean(&vs, &ms).unwrap();
        t.value(m).clone()
    };
    let base = run(&[0, 1, 2, 3, 4]);
    for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]] {
        assert!(run(&order).bit_eq(&base));
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let build = || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_fn([8, 8], |i| (i as f32).cos()));
        let w = t.leaf(Tensor::from_fn([8, 8], |i| (i as f32 * 0.1).sin()));
        let y = t.matmul(x, w).unwrap();
        let y = t.softplus(y).unwrap();
        let y = t.sum(y).unwrap();
        let g = t.backward(y).unwrap();
        (g.wrt(x), g.wrt(w))
    };
    let (a, b) = (build(), build());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
}

#[test]
fn seeded_backward_chains_tapes() {
    let mut up = Tape::<f32>::new();
    let x = up.leaf(Tensor::from_fn([3], |i| i as f32 + 1.0));
    let y = up.square(x).unwrap();
    let mut down = Tape::<f32>::new();
    let yv = down.leaf(up.value(y).clone());
    let s = down.sum(yv).unwrap();
    let seed = down.backward(s).unwrap().wrt(yv);
    let g = up.backward_with(vec![(y, seed)]).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}
