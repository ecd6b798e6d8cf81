use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| 0.2 + rng.random::<f64>()).collect()).unwrap()
}

/// Away from kinks: every |entry| >= 0.05.
fn off_kink(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    random(rng, r, c).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Runs `f` through a weighted sum so every output entry contributes.
fn check_op(seed: u64, input: impl Fn(&mut ChaCha8Rng) -> Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let x = input(&mut rng);
        let wseed = rng.random::<u64>();
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                let (r, c) = t.value(y).shape();
                let w = t.constant(random(&mut ChaCha8Rng::seed_from_u64(wseed), r, c));
                let p = t.mul(y, w)?;
                t.sum(p)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel error {} at {}", report.max_rel_error, report.worst_index);
    }
}

#[test]
fn forward_fixtures() {
    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = t.constant(random(&mut rng, 3, 4));
    let i = t.constant(Tensor::identity(3));
    let ia = t.matmul(i, a).unwrap();
    assert_eq!(t.value(ia), t.value(a));

    let eq = t.constant(Tensor::filled(1, 5, 0.7));
    let s = t.softmax_rows(eq).unwrap();
    for v in t.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }

    let v = t.constant(random(&mut rng, 1, 6));
    let n = t.l2_normalize_rows(v).unwrap();
    assert!((t.value(n).dot(t.value(n)) - 1.0).abs() < 1e-14);
}

#[test]
fn error_paths() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 3));
    assert!(t.matmul(a, b).is_err());
    let c = t.constant(Tensor::zeros(3, 2));
    assert!(t.add(a, c).is_err());
    let neg = t.constant(Tensor::row(vec![1.0, -1.0]));
    assert!(t.log(neg).is_err());
    assert!(t.sqrt(neg).is_err());
    let zero = t.constant(Tensor::row(vec![0.0]));
    assert!(t.log(zero).is_err());
    let big = t.param(Tensor::row(vec![1000.0]));
    assert!(matches!(t.exp(big), Err(crate::error::Error::NonFinite(_))));
    let p = t.param(Tensor::zeros(2, 2));
    assert!(t.backward(p).is_err());
}

#[test]
fn sum_of_product_gradient_is_other_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let w = t.param(random(&mut rng, 4, 3));
    let x = t.constant(random(&mut rng, 4, 3));
    let p = t.mul(w, x).unwrap();
    let l = t.sum(p).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap(), t.value(x));
    assert!(g.get(x).is_none());
}

#[test]
fn quadratic_form_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let a = random(&mut rng, 5, 4);
        let xv = random(&mut rng, 4, 1);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let x = t.param(xv.clone());
        let ax = t.matmul(av, x).unwrap();
        let sq = t.square(ax).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        let expect = a.transpose().matmul(&a).unwrap().matmul(&xv).unwrap().scaled(2.0);
        for (u, v) in g.get(x).unwrap().data().iter().zip(expect.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn unreached_leaf_gets_zero() {
    let mut t = Tape::new();
    let a = t.param(Tensor::row(vec![1.0, 2.0]));
    let b = t.param(Tensor::row(vec![3.0]));
    let l = t.sum(a).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get_or_zeros(&t, b), Tensor::zeros(1, 1));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = off_kink(&mut rng, 3, 4);
    let grad_of = |alpha: f64, beta: f64| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sigmoid(x).unwrap();
        let f = t.sum(s).unwrap();
        let sq = t.square(x).unwrap();
        let r = t.relu(sq).unwrap();
        let g = t.mean(r).unwrap();
        let af = t.scale(f, alpha).unwrap();
        let bg = t.scale(g, beta).unwrap();
        let l = t.add(af, bg).unwrap();
        t.backward(l).unwrap().get(x).unwrap().clone()
    };
    let (a, b) = (0.7, -1.3);
    let combined = grad_of(a, b);
    let mut sep = grad_of(1.0, 0.0).scaled(a);
    sep.axpy(b, &grad_of(0.0, 1.0));
    for (u, v) in combined.data().iter().zip(sep.data()) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![0.0, 1.0, -1.0]));
    let r = t.relu(x).unwrap();
    let l = t.sum(r).unwrap();
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_op(10, |r| off_kink(r, 3, 4), |t, x| t.relu(x));
    check_op(11, |r| random(r, 3, 4), |t, x| t.sigmoid(x));
    check_op(12, |r| random(r, 3, 4), |t, x| t.exp(x));
    check_op(13, |r| positive(r, 3, 4), |t, x| t.log(x));
    check_op(14, |r| positive(r, 3, 4), |t, x| t.sqrt(x));
    check_op(15, |r| off_kink(r, 3, 4), |t, x| t.abs(x));
    check_op(16, |r| random(r, 3, 4), |t, x| t.square(x));
    check_op(17, |r| random(r, 3, 4), |t, x| t.scale(x, -2.5));
    check_op(18, |r| random(r, 3, 4), |t, x| t.add_scalar(x, 0.3));
    check_op(19, |r| random(r, 3, 4), |t, x| t.clamp(x, -0.9, 0.9));
}

#[test]
fn reductions_pass_grad_check() {
    check_op(20, |r| random(r, 3, 4), |t, x| t.sum(x));
    check_op(21, |r| random(r, 3, 4), |t, x| t.mean(x));
    check_op(22, |r| random(r, 5, 4), |t, x| t.mean_rows(x));
    check_op(23, |r| random(r, 5, 4), |t, x| t.sum_cols(x));
    check_op(24, |r| random(r, 3, 5), |t, x| t.softmax_rows(x));
    check_op(25, |r| random(r, 3, 5), |t, x| t.l2_normalize_rows(x));
    check_op(26, |r| random(r, 6, 3), |t, x| t.context_norm(x));
    check_op(27, |r| random(r, 3, 4), |t, x| t.transpose(x));
}

#[test]
fn binary_ops_pass_grad_check() {
    let other = |seed: u64, r: usize, c: usize| random(&mut ChaCha8Rng::seed_from_u64(seed), r, c);
    check_op(30, |r| random(r, 3, 4), |t, x| {
        let b = t.constant(other(1, 4, 2));
        t.matmul(x, b)
    });
    check_op(31, |r| random(r, 4, 2), |t, x| {
        let a = t.constant(other(2, 3, 4));
        t.matmul(a, x)
    });
    check_op(32, |r| random(r, 3, 4), |t, x| {
        let b = t.constant(other(3, 3, 4));
        let s = t.add(x, b)?;
        let d = t.sub(s, x)?;
        let m = t.mul(x, d)?;
        t.sub(m, x)
    });
    check_op(33, |r| random(r, 1, 4), |t, x| {
        let a = t.constant(other(4, 5, 4));
        let s = t.add_row(a, x)?;
        let d = t.sub_row(s, x)?;
        let m = t.mul_row(a, x)?;
        t.add(d, m)
    });
    check_op(34, |r| random(r, 5, 3), |t, x| {
        let row = t.constant(other(5, 1, 3));
        let a = t.add_row(x, row)?;
        let b = t.sub_row(x, row)?;
        let c = t.mul_row(x, row)?;
        let ab = t.mul(a, b)?;
        t.add(ab, c)
    });
    check_op(35, |r| random(r, 5, 1), |t, w| {
        let a = t.constant(other(6, 5, 3));
        t.mul_col(a, w)
    });
    check_op(36, |r| random(r, 5, 3), |t, x| {
        let w = t.constant(other(7, 5, 1));
        t.mul_col(x, w)
    });
    check_op(37, |r| positive(r, 3, 3), |t, x| {
        let s = t.sum(x)?;
        t.div_scalar(x, s)
    });
    check_op(38, |r| random(r, 4, 2), |t, x| {
        let b = t.constant(other(8, 4, 3));
        let sq = t.square(x)?;
        t.concat_cols(&[x, b, sq])
    });
}

#[test]
fn indexing_ops_pass_grad_check() {
    check_op(40, |r| random(r, 4, 3), |t, x| t.gather_rows(x, &[3, 0, 0, 2, 1, 3]));
    let idx = [0, 1, 2, 1, 2, 3, 2, 3, 0, 3, 0, 1];
    check_op(41, |r| random(r, 4, 3), move |t, x| t.neighbor_mean(x, &idx, 3));
    check_op(42, |r| random(r, 4, 3), move |t, x| t.neighbor_max(x, &idx, 3));
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    crate::geometry::sample_random_transform(rng, 360.0, 0.0).rotation
}

#[test]
fn polar_rotation_recovers_rotation_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..20 {
        let r = random_rotation(&mut rng);
        let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(3.0, 2.0, 0.5));
        let q = random_rotation(&mut rng);
        let m = r * q * s * q.transpose();
        let mut t = Tape::new();
        let mv = t.constant(Tensor::new(3, 3, tape::matrix_to_row_major(&m)).unwrap());
        let rv = t.polar_rotation(mv).unwrap();
        let got = Matrix3::from_row_slice(t.value(rv).data());
        assert!((got - r).abs().max() < 1e-12);
    }
}

#[test]
fn polar_rotation_corrects_reflections() {
    let m = Matrix3::from_diagonal(&nalgebra::Vector3::new(2.0, 1.0, -0.5));
    let mut t = Tape::new();
    let mv = t.constant(Tensor::new(3, 3, tape::matrix_to_row_major(&m)).unwrap());
    let rv = t.polar_rotation(mv).unwrap();
    let r = Matrix3::from_row_slice(t.value(rv).data());
    assert!((r.determinant() - 1.0).abs() < 1e-12);
    assert!((r - Matrix3::identity()).abs().max() < 1e-12);
}

#[test]
fn polar_rotation_passes_grad_check() {
    check_op(51, |r| random(r, 3, 3), |t, x| t.polar_rotation(x));
    // negative determinant inputs take the reflected branch
    check_op(
        52,
        |r| {
            let mut m = random(r, 3, 3);
            let det = Matrix3::from_row_slice(m.data()).determinant();
            if det > 0.0 {
                for v in m.data_mut()[..3].iter_mut() {
                    *v = -*v;
                }
            }
            m
        },
        |t, x| t.polar_rotation(x),
    );
}

#[test]
fn custom_op_and_negative_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let x = random(&mut rng, 2, 3);
    let good = |t: &mut Tape, v: Var| {
        let value = t.value(v).map(|a| a * a);
        let y = t.custom(&[v], value, |g, xs, _| vec![g.zip_map(xs[0], |u, a| 2.0 * u * a)])?;
        t.sum(y)
    };
    assert!(grad_check(good, &x, 1e-5, 1e-4).unwrap().passed);
    let wrong = |t: &mut Tape, v: Var| {
        let value = t.value(v).map(|a| a * a);
        let y = t.custom(&[v], value, |g, xs, _| vec![g.zip_map(xs[0], |u, a| 3.0 * u * a)])?;
        t.sum(y)
    };
    assert!(!grad_check(wrong, &x, 1e-5, 1e-4).unwrap().passed);
}

#[test]
fn grad_check_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = random(&mut rng, 3, 3);
    let sq = |t: &mut Tape, v: Var| {
        let s = t.square(v)?;
        t.sum(s)
    };
    assert!(grad_check(sq, &x, 1e-5, 1e-4).unwrap().passed);
    let x = off_kink(&mut rng, 3, 3);
    let relu = |t: &mut Tape, v: Var| {
        let r = t.relu(v)?;
        t.sum(r)
    };
    assert!(grad_check(relu, &x, 1e-5, 1e-4).unwrap().passed);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut t = Tape::new();
        let a = t.param(random(&mut rng, 16, 8));
        let b = t.constant(random(&mut rng, 8, 8));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(m).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}
