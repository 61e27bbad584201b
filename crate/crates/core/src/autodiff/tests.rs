use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softplus_at_zero_is_ln2() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    assert!(close(x.softplus().item(), std::f64::consts::LN_2, 1e-15));
}

#[test]
fn softmax_of_equal_pair_is_half() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![3.7, 3.7]));
    let y = x.softmax(1).unwrap();
    assert_eq!(y.to_tensor().data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = x.sigmoid();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 0.25);
}

#[test]
fn fan_out_accumulates() {
    // y = x + x + 1 has dy/dx = 2
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.3));
    let y = x.add(x).unwrap().shift(1.0);
    assert!(close(y.item(), 3.6, 1e-15));
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.param(Tensor::scalar(3.0));
    let y = c.mul(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn shape_errors_surface() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(a.matmul(a).is_err());
    assert!(a.add(b).is_err());
    assert!(tape.backward(a).is_err());
}

#[test]
fn softmax_rows_and_columns_normalise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[5, 7], 4.0, &mut rng));
    for axis in 0..2 {
        let y = x.softmax(axis).unwrap().to_tensor();
        let (r, c) = y.dims2();
        let groups = if axis == 1 { r } else { c };
        for k in 0..groups {
            let s: f64 = if axis == 1 {
                y.row_slice(k).iter().sum()
            } else {
                (0..r).map(|i| y.get(i, k)).sum()
            };
            assert!(close(s, 1.0, 1e-10));
        }
    }
}

#[test]
fn masked_softmax_zeroes_dropped_entries() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![0.1, 2.0, -1.0, 1.5]));
    let keep = Rc::new(top_m_mask(&x.to_tensor(), 2));
    assert_eq!(*keep, vec![false, true, false, true]);
    let y = x.mask_fill(keep, f64::NEG_INFINITY).unwrap().softmax(1).unwrap().to_tensor();
    assert_eq!(y.data()[0], 0.0);
    assert_eq!(y.data()[2], 0.0);
    assert!(close(y.data()[1] + y.data()[3], 1.0, 1e-12));
}

#[test]
fn top_m_ties_go_to_lower_index() {
    let t = Tensor::row(vec![1.0, 1.0, 1.0]);
    assert_eq!(top_m_mask(&t, 2), vec![true, true, false]);
}

fn points(shape: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5).map(|_| Tensor::randn(shape, 1.0, &mut rng)).collect()
}

fn check_all<F>(name: &str, shape: &[usize], f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    for (i, x) in points(shape, name.len() as u64).into_iter().enumerate() {
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name} point {i}: error {err}");
    }
}

#[test]
fn primitives_pass_gradient_check() {
    for (name, err) in check_primitives(5, 11, 1e-5).unwrap() {
        assert!(err < 1e-4, "{name}: error {err}");
    }
}

#[test]
fn composite_gradient_check() {
    // a small two-layer network with a squared-error loss
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let w2 = Tensor::randn(&[5, 1], 1.0, &mut rng);
    check_all("mlp", &[3, 5], |t, w1| {
        let h = t.constant(input.clone()).matmul(w1)?.tanh();
        let y = h.matmul(t.constant(w2.clone()))?.sigmoid();
        Ok(y.shift(-0.5).square().mean())
    });
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![3.0, -2.0]));
    let mut opt = Adam::new(0.1);
    for _ in 0..500 {
        let tape = Tape::new();
        let w = store.bind(&tape)[0];
        let loss = w.shift(-1.0).square().sum();
        let g = tape.backward(loss).unwrap();
        opt.step(&mut store, &[g.wrt(w).cloned()]);
    }
    for &v in store.get(id).data() {
        assert!(close(v, 1.0, 1e-3), "{v}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let mut store = ParamStore::new();
    store.add("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap());
    store.add("b", Tensor::scalar(7.0));
    let meta = serde_json::json!({"hidden": 16});
    write_checkpoint(&path, &meta, &store).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.params, store);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(read_checkpoint(&path).is_err());
}
