use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen() {
            v
        } else {
            -v
        }
    })
}

#[test]
fn matmul_hand_checked() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 2]);
    assert_eq!(tape.value(c).data(), &[4.0, 5.0, 10.0, 11.0]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [2, 3]);
        }
        e => panic!("{e}"),
    }
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, c).is_err());
    assert!(tape.reshape(a, &[5]).is_err());
    assert!(tape.slice(a, 1, 2, 2).is_err());
}

#[test]
fn leaky_relu_and_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    let z = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax(z);
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[6, 16], |_| rng.gen_range(-20.0..20.0)));
    let s = tape.softmax(x);
    for row in tape.value(s).data().chunks(16) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let g = tape.constant(Tensor::from_fn(&[16], |_| 1.0));
    let b = tape.constant(Tensor::zeros(&[16]));
    let n = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for row in tape.value(n).data().chunks(16) {
        let m = row.iter().sum::<f32>() / 16.0;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 16.0;
        assert!(m.abs() < 1e-5, "{m}");
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn backward_of_linear_function() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.scale(x, 2.0);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).data(), &[2.0]);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Validation(_))));
}

#[test]
fn disjoint_graph_gets_zero_grad() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let b = tape.leaf(t(&[2], &[3.0, 4.0]), true);
    let la = tape.sum(a);
    let bb = tape.scale(b, 5.0);
    let _lb = tape.sum(bb);
    let g = tape.backward(la).unwrap();
    assert_eq!(g.get(a).data(), &[1.0, 1.0]);
    assert_eq!(g.get(b).data(), &[0.0, 0.0]);
    assert!(g.raw(b).is_none());
}

#[test]
fn mse_of_affine_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w0 = rand_t(&mut rng, &[3, 3]);
    let x = rand_t(&mut rng, &[3, 3]);
    let y = rand_t(&mut rng, &[3, 3]);
    let err = grad_check(
        |tape, w| {
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let p = tape.matmul(w, xv)?;
            let e = tape.squared_error(p, yv)?;
            Ok(tape.mean(e))
        },
        &w0,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_t(&mut rng, &[5]);
    let sq = grad_check(
        |tape, v| {
            let z = tape.constant(Tensor::zeros(&[5]));
            let e = tape.squared_error(v, z)?;
            Ok(tape.sum(e))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(sq < 1e-6, "{sq}");
    let pick = grad_check(
        |tape, v| {
            let s = tape.softmax(v);
            let one = tape.slice(s, 0, 2, 1)?;
            Ok(tape.sum(one))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(pick < 1e-4, "{pick}");
    let constant = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-3).unwrap();
    assert_eq!(constant, 0.0);
}

/// Reduces any tensor to a scalar through fixed random weights so that every
/// output element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let e = tape.squared_error(v, w)?;
    Ok(tape.mean(e))
}

type OpCase = (
    &'static str,
    Vec<usize>,
    Box<dyn Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var>>,
);

const GRAD_EPS: f64 = 1e-5;

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            vec![3, 4],
            Box::new(|tp, x, r| {
                let w = tp.constant(rand_t(r, &[4, 2]));
                tp.matmul(x, w)
            }),
        ),
        (
            "matmul_rhs",
            vec![4, 2],
            Box::new(|tp, x, r| {
                let a = tp.constant(rand_t(r, &[3, 4]));
                tp.matmul(a, x)
            }),
        ),
        (
            "add",
            vec![2, 3],
            Box::new(|tp, x, r| {
                let b = tp.constant(rand_t(r, &[2, 3]));
                tp.add(x, b)
            }),
        ),
        (
            "sub",
            vec![2, 3],
            Box::new(|tp, x, r| {
                let b = tp.constant(rand_t(r, &[2, 3]));
                tp.sub(b, x)
            }),
        ),
        ("scale", vec![4], Box::new(|tp, x, _| Ok(tp.scale(x, -1.7)))),
        (
            "concat",
            vec![2, 3],
            Box::new(|tp, x, r| {
                let b = tp.constant(rand_t(r, &[2, 2]));
                tp.concat(&[x, b, x], 1)
            }),
        ),
        (
            "linear",
            vec![3, 4],
            Box::new(|tp, x, r| {
                let w = tp.constant(rand_t(r, &[4, 5]));
                let b = tp.constant(rand_t(r, &[5]));
                tp.linear(x, w, b)
            }),
        ),
        (
            "linear_bias",
            vec![5],
            Box::new(|tp, b, r| {
                let x = tp.constant(rand_t(r, &[3, 4]));
                let w = tp.constant(rand_t(r, &[4, 5]));
                tp.linear(x, w, b)
            }),
        ),
        (
            "softmax",
            vec![3, 5],
            Box::new(|tp, x, _| Ok(tp.softmax(x))),
        ),
        (
            "layer_norm",
            vec![3, 6],
            Box::new(|tp, x, r| {
                let g = tp.constant(rand_t(r, &[6]));
                let b = tp.constant(rand_t(r, &[6]));
                tp.layer_norm(x, g, b, 1e-5)
            }),
        ),
        (
            "layer_norm_gain",
            vec![6],
            Box::new(|tp, g, r| {
                let x = tp.constant(rand_t(r, &[3, 6]));
                let b = tp.constant(rand_t(r, &[6]));
                tp.layer_norm(x, g, b, 1e-5)
            }),
        ),
        (
            "conv2d_input",
            vec![1, 2, 5, 5],
            Box::new(|tp, x, r| {
                let w = tp.constant(rand_t(r, &[3, 2, 3, 3]));
                let b = tp.constant(rand_t(r, &[3]));
                tp.conv2d(x, w, b, 2, 1)
            }),
        ),
        (
            "conv2d_weight",
            vec![3, 2, 3, 3],
            Box::new(|tp, w, r| {
                let x = tp.constant(rand_t(r, &[2, 2, 4, 4]));
                let b = tp.constant(rand_t(r, &[3]));
                tp.conv2d(x, w, b, 1, 1)
            }),
        ),
        (
            "conv2d_bias",
            vec![3],
            Box::new(|tp, b, r| {
                let x = tp.constant(rand_t(r, &[1, 2, 4, 4]));
                let w = tp.constant(rand_t(r, &[3, 2, 3, 3]));
                tp.conv2d(x, w, b, 2, 1)
            }),
        ),
        (
            "reshape",
            vec![2, 6],
            Box::new(|tp, x, _| tp.reshape(x, &[3, 4])),
        ),
        (
            "transpose",
            vec![2, 5],
            Box::new(|tp, x, _| tp.transpose(x)),
        ),
        (
            "slice",
            vec![4, 3],
            Box::new(|tp, x, _| tp.slice(x, 0, 1, 2)),
        ),
        (
            "gather_rows",
            vec![4, 3],
            Box::new(|tp, x, _| tp.gather_rows(x, &[3, 0, 3])),
        ),
        ("mean", vec![7], Box::new(|tp, x, _| Ok(tp.mean(x)))),
        ("sum", vec![7], Box::new(|tp, x, _| Ok(tp.sum(x)))),
        (
            "squared_error",
            vec![2, 4],
            Box::new(|tp, x, r| {
                let y = tp.constant(rand_t(r, &[2, 4]));
                tp.squared_error(x, y)
            }),
        ),
        (
            "displacement_mean",
            vec![3, 5, 2],
            Box::new(|tp, x, r| {
                let y = tp.constant(rand_t(r, &[3, 5, 2]));
                tp.displacement_mean(x, y, 1e-12)
            }),
        ),
        (
            "upsample",
            vec![2, 4, 2],
            Box::new(|tp, x, _| tp.upsample(x)),
        ),
    ]
}

#[test]
fn every_op_passes_grad_check_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shape, op) in op_cases() {
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let x = rand_t(&mut rng, &shape);
            let seed: u64 = rng.gen();
            let err = grad_check(
                |tape, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let y = op(tape, v, &mut r)?;
                    project(tape, y, seed ^ trial)
                },
                &x,
                GRAD_EPS,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: {worst}");
    }
}

#[test]
fn leaky_relu_grad_check_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let x = rand_away_from_zero(&mut rng, &[10], 1e-2);
        let err = grad_check(
            |tape, v| {
                let y = tape.leaky_relu(v, 0.01);
                project(tape, y, 5)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn conv_with_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[2, 3, 4, 5]);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn concat_then_slice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_t(&mut rng, &[2, 3, 4]);
    let b = rand_t(&mut rng, &[2, 5, 4]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.concat(&[av, bv], 1).unwrap();
    let a2 = tape.slice(c, 1, 0, 3).unwrap();
    let b2 = tape.slice(c, 1, 3, 5).unwrap();
    assert_eq!(tape.value(a2), &a);
    assert_eq!(tape.value(b2), &b);
}

#[test]
fn upsample_layout() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[2, 2], &[0.2, 0.0, 0.4, 0.2]));
    let f = tape.upsample(c).unwrap();
    assert_eq!(tape.value(f).shape(), &[4, 2]);
    assert_eq!(
        tape.value(f).data(),
        &[0.1, 0.0, 0.2, 0.0, 0.30000000000000004, 0.1, 0.4, 0.2]
    );
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_fn(&[1, 2, 6, 6], |_| rng.gen_range(-1.0..1.0)),
            true,
        );
        let w = tape.leaf(
            Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0)),
            true,
        );
        let b = tape.leaf(Tensor::zeros(&[4]), true);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.reshape(y, &[4, 36]).unwrap();
        let s = tape.softmax(r);
        let l = tape.mean(s);
        let g = tape.backward(l).unwrap();
        (tape.value(s).clone(), g.get(w))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}
