use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::sparse::{CsrMatrix, LinearOp};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, &[NodeId]) -> crate::Result<NodeId>;

/// Compares tape gradients of the scalar built by `build` with central
/// differences of step `1e-6`, leaf by leaf.
fn check_fd(inputs: &[Tensor], build: &Build, tol: f64) {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone()).unwrap()).collect();
        let out = build(&mut tape, &ids).unwrap();
        tape.value(out).unwrap().data()[0]
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone()).unwrap()).collect();
    let out = build(&mut tape, &ids).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    for (k, id) in ids.iter().enumerate() {
        let g = grads.get(*id).unwrap();
        assert_eq!(g.shape(), inputs[k].shape());
        let mut fd = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            fd[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let err: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(err / scale <= tol, "input {k}: relative error {:.3e}", err / scale);
    }
}

/// `sum(op(x) * r)` with a fixed random weight `r`, so every output entry matters.
fn weighted(tape: &mut Tape, y: NodeId, seed: u64) -> crate::Result<NodeId> {
    let shape = tape.value(y)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(&shape, &mut rng))?;
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

fn small_linear_op(rng: &mut ChaCha8Rng) -> LinearOp {
    let mut rows = vec![Vec::new(); 5];
    for row in rows.iter_mut() {
        for c in 0..12u32 {
            if rng.gen_bool(0.4) {
                row.push((c, rng.gen_range(-1.0..1.0)));
            }
        }
    }
    LinearOp::new(CsrMatrix::from_rows(12, rows).unwrap(), vec![3, 4], vec![5]).unwrap()
}

#[test]
fn record_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.leaf(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).unwrap().data(), &[4.0, 6.0]);

    let x = tape.leaf(Tensor::vector(vec![0.5, -1.5, 2.0])).unwrap();
    let id = LinearOp::new(CsrMatrix::identity(3), vec![3], vec![3]).unwrap();
    let y = tape.matvec(&id, x).unwrap();
    assert_eq!(tape.value(y).unwrap(), tape.value(x).unwrap());

    let eps = 1e-6;
    let u = tape.leaf(Tensor::filled(&[5, 7], 0.3)).unwrap();
    let tv = tape.smoothed_tv(u, eps).unwrap();
    assert!((tape.value(tv).unwrap().data()[0] - 35.0 * eps).abs() < 1e-18);
}

#[test]
fn record_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    let mut other = Tape::new();
    let foreign = (0..4).map(|_| other.leaf(Tensor::scalar(0.0)).unwrap()).last().unwrap();
    assert!(matches!(tape.record(Op::Sum, &[foreign]), Err(Error::UnknownNode(3))));
    assert!(tape.record(Op::Add, &[a]).is_err());
    assert!(tape.leaf(Tensor::raw(vec![1], vec![f64::NAN])).is_err());
    assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.0, 5.0])).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarOutput(_))));
}

#[test]
fn unused_leaves_and_constants() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let unused = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p).unwrap();
    let late = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    assert_eq!(g.get(late).unwrap(), &Tensor::zeros(&[]));
    assert!(g.get(c).is_none());
    assert_eq!(g.len(), 3);
}

#[test]
fn norm_of_affine_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let op = small_linear_op(&mut rng);
    let x = random(&[3, 4], &mut rng);
    let y = random(&[5], &mut rng);
    let build = move |t: &mut Tape, ids: &[NodeId]| {
        let wx = t.matvec(&op, ids[0])?;
        let r = t.sub(wx, ids[1])?;
        t.norm(r)
    };
    check_fd(&[x, y], &build, 1e-5);
}

#[test]
fn smoothed_tv_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = random(&[4, 4], &mut rng);
    check_fd(&[u], &|t, ids| t.smoothed_tv(ids[0], 1e-6), 1e-4);
}

#[test]
fn elementwise_ops_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let s = random(&[1], &mut rng);
    check_fd(&[a.clone(), b.clone()], &|t, ids| {
        let y = t.add(ids[0], ids[1])?;
        weighted(t, y, 10)
    }, 1e-6);
    check_fd(&[a.clone(), b.clone()], &|t, ids| {
        let y = t.sub(ids[0], ids[1])?;
        weighted(t, y, 11)
    }, 1e-6);
    check_fd(&[a.clone(), b.clone()], &|t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        weighted(t, y, 12)
    }, 1e-6);
    check_fd(&[a.clone()], &|t, ids| {
        let y = t.scale(ids[0], -2.5)?;
        weighted(t, y, 13)
    }, 1e-6);
    check_fd(&[s, a.clone()], &|t, ids| {
        let y = t.scale_by(ids[0], ids[1])?;
        weighted(t, y, 14)
    }, 1e-6);
    check_fd(&[a.clone()], &|t, ids| {
        let y = t.relu(ids[0])?;
        weighted(t, y, 15)
    }, 1e-6);
    check_fd(&[a.clone()], &|t, ids| {
        let y = t.sigmoid(ids[0])?;
        weighted(t, y, 16)
    }, 1e-6);
    check_fd(&[a.clone()], &|t, ids| t.squared_norm(ids[0]), 1e-6);
    check_fd(&[a.clone()], &|t, ids| t.norm(ids[0]), 1e-6);
    check_fd(&[a], &|t, ids| {
        let y = t.reshape(ids[0], &[20])?;
        weighted(t, y, 17)
    }, 1e-6);
}

#[test]
fn cross_entropy_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(&[6], &mut rng);
    for target in [0.0, 1.0, 0.3] {
        check_fd(&[z.clone()], &move |t, ids| {
            let p = t.sigmoid(ids[0])?;
            t.binary_cross_entropy(p, target)
        }, 1e-5);
    }
}

#[test]
fn image_ops_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = random(&[5, 6], &mut rng);
    let field = random(&[2, 5, 6], &mut rng);
    check_fd(&[u.clone()], &|t, ids| {
        let y = t.gradient2d(ids[0])?;
        weighted(t, y, 20)
    }, 1e-6);
    check_fd(&[field.clone()], &|t, ids| {
        let y = t.gradient2d_adjoint(ids[0])?;
        weighted(t, y, 21)
    }, 1e-6);
    check_fd(&[field], &|t, ids| {
        let y = t.normalize_field(ids[0], 0.1)?;
        weighted(t, y, 22)
    }, 1e-5);
    check_fd(&[u.clone()], &|t, ids| {
        let y = t.smoothed_tv_gradient(ids[0], 0.05)?;
        weighted(t, y, 23)
    }, 1e-5);
    let kernel: Arc<[f64]> = vec![0.2, -0.5, 1.0, 0.3, -0.1].into();
    check_fd(&[u], &move |t, ids| {
        let y = t.correlate1d(ids[0], kernel.clone())?;
        weighted(t, y, 24)
    }, 1e-6);
}

#[test]
fn conv_and_pool_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 5, 4], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check_fd(&[x.clone(), k.clone(), b], &|t, ids| {
        let y = t.correlate2d(ids[0], ids[1], Some(ids[2]))?;
        weighted(t, y, 30)
    }, 1e-6);
    check_fd(&[x.clone(), k], &|t, ids| {
        let y = t.correlate2d(ids[0], ids[1], None)?;
        let y = t.relu(y)?;
        let y = t.mean_pool(y)?;
        weighted(t, y, 31)
    }, 1e-6);
    check_fd(&[x], &|t, ids| {
        let y = t.mean_pool(ids[0])?;
        weighted(t, y, 32)
    }, 1e-6);
}

#[test]
fn conv_same_padding_by_hand() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let mut k = vec![0.0; 9];
    k[5] = 1.0; // right neighbour
    let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap()).unwrap();
    let y = tape.correlate2d(x, k, None).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[2.0, 0.0, 4.0, 0.0]);
}

#[test]
fn matvec_gradient_is_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let op = small_linear_op(&mut rng);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[5], &mut rng);
    let mut tape = Tape::new();
    let xi = tape.leaf(x).unwrap();
    let y = tape.matvec(&op, xi).unwrap();
    let wi = tape.constant(w.clone()).unwrap();
    let p = tape.mul(y, wi).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let mut expect = vec![0.0; 12];
    op.matrix().transpose().mul_vec(w.data(), &mut expect);
    assert_eq!(g.get(xi).unwrap().data(), expect.as_slice());
}

#[test]
fn norm_gradient_at_origin_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4])).unwrap();
    let n = tape.norm(x).unwrap();
    let g = tape.backward(n).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0; 4]);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = random(&[8, 8], &mut rng);
    let mut tape = Tape::new();
    let ui = tape.leaf(u).unwrap();
    let g1 = tape.smoothed_tv_gradient(ui, 1e-3).unwrap();
    let a = tape.add(g1, ui).unwrap();
    let n = tape.norm(a).unwrap();
    let first = tape.backward(n).unwrap();
    let second = tape.backward(n).unwrap();
    let bits = |g: &Gradients| g.get(ui).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tv_gradient_fd_random(seed in any::<u64>(), h in 2usize..7, w in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random(&[h, w], &mut rng);
        check_fd(&[u], &|t, ids| t.smoothed_tv(ids[0], 1e-2), 1e-4);
    }

    #[test]
    fn gradient_adjoint_pair(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random(&[h, w], &mut rng);
        let p = random(&[2, h, w], &mut rng);
        let mut du = vec![0.0; 2 * h * w];
        grad2d(u.data(), h, w, &mut du);
        let mut dtp = vec![0.0; h * w];
        grad2d_adjoint(p.data(), h, w, &mut dtp);
        let lhs: f64 = du.iter().zip(p.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(&dtp).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
