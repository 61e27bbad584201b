use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{top_m_mask, Tape, Tensor, Var};
use crate::error::Result;

/// Central differences of a scalar function at `x`.
pub fn finite_difference_grad<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(t);
        Ok(f(&tape, v)?.item())
    };
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(out)
}

/// Largest relative disagreement between tape and finite-difference
/// gradients: `max |a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&tape, v)?;
    let analytic = tape.backward(y)?.wrt_or_zeros(v);
    let numeric = finite_difference_grad(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max))
}

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>;

/// One primitive wrapped into a scalar function of a single input.
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub f: ScalarFn,
}

// weight the output so every entry carries a distinct gradient
fn wsum<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    let c = y.tape().constant(w.clone());
    Ok(y.mul(c)?.sum())
}

/// Every tape primitive, each exercised through at least one scalar
/// function. Broadcasting variants of the binary ops get their own entry.
pub fn primitive_checks(seed: u64) -> Vec<PrimitiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let row = Tensor::randn(&[1, 3], 1.0, &mut rng);
    let col = Tensor::randn(&[2, 1], 1.0, &mut rng);
    let pos = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(0.5..2.0)).collect())
        .expect("2x3");
    let weights = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let idx = Rc::new(vec![1, 0, 1, 1]);
    let cols = Rc::new(vec![2, 0, 2]);

    let mut out = Vec::new();
    let mut add = |name: &'static str, shape: &[usize], f: ScalarFn| {
        out.push(PrimitiveCheck {
            name,
            input_shape: shape.to_vec(),
            f,
        })
    };
    {
        let w = w.clone();
        add("matmul_lhs", &[2, 3], Box::new(move |t, x| {
            wsum(x.matmul(t.constant(w.clone()))?, &Tensor::full(&[2, 4], 0.7))
        }));
    }
    {
        let a = weights.clone();
        add("matmul_rhs", &[3, 4], Box::new(move |t, x| {
            wsum(t.constant(a.clone()).matmul(x)?, &Tensor::full(&[2, 4], -0.6))
        }));
    }
    {
        let (row, ws) = (row.clone(), weights.clone());
        add("add_row", &[2, 3], Box::new(move |t, x| wsum(x.add(t.constant(row.clone()))?.square(), &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("add_row_rhs", &[1, 3], Box::new(move |t, x| wsum(t.constant(p.clone()).add(x)?.square(), &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("sub_col_rhs", &[2, 1], Box::new(move |t, x| wsum(t.constant(p.clone()).sub(x)?.square(), &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("sub_scalar_rhs", &[], Box::new(move |t, x| wsum(t.constant(p.clone()).sub(x)?.square(), &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("mul", &[2, 3], Box::new(move |t, x| wsum(x.mul(t.constant(p.clone()))?, &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("mul_col_rhs", &[2, 1], Box::new(move |t, x| wsum(t.constant(p.clone()).mul(x)?, &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("div_lhs", &[2, 3], Box::new(move |t, x| wsum(x.div(t.constant(p.clone()))?, &ws)));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("div_rhs", &[2, 3], Box::new(move |t, x| {
            wsum(t.constant(ws.clone()).div(x.square().shift(1.0))?, &p)
        }));
    }
    {
        let (p, ws) = (pos.clone(), weights.clone());
        add("div_row_rhs", &[1, 3], Box::new(move |t, x| {
            wsum(t.constant(p.clone()).div(x.square().shift(0.5))?, &ws)
        }));
    }
    {
        let ws = weights.clone();
        add("scale_neg", &[2, 3], Box::new(move |_, x| wsum(x.scale(-1.7).neg(), &ws)));
    }
    {
        let ws = weights.clone();
        add("shift", &[2, 3], Box::new(move |_, x| wsum(x.shift(0.4).square(), &ws)));
    }
    add("sum", &[2, 3], Box::new(|_, x| Ok(x.square().sum())));
    add("mean", &[2, 3], Box::new(|_, x| Ok(x.square().mean())));
    {
        let row = row.clone();
        add("sum_axis0", &[2, 3], Box::new(move |_, x| wsum(x.sum_axis(0)?, &row)));
    }
    {
        let col = col.clone();
        add("sum_axis1", &[2, 3], Box::new(move |_, x| wsum(x.sum_axis(1)?, &col)));
    }
    let unary: [(&'static str, fn(Var<'_>) -> Var<'_>); 7] = [
        ("relu", |x| x.relu()),
        ("leaky_relu", |x| x.leaky_relu(0.2)),
        ("sigmoid", |x| x.sigmoid()),
        ("tanh", |x| x.tanh()),
        ("softplus", |x| x.softplus()),
        ("exp", |x| x.exp()),
        ("clamp", |x| x.clamp(-0.8, 0.8)),
    ];
    for (name, op) in unary {
        let ws = weights.clone();
        add(name, &[2, 3], Box::new(move |_, x| wsum(op(x), &ws)));
    }
    {
        let ws = weights.clone();
        add("log", &[2, 3], Box::new(move |_, x| wsum(x.square().shift(0.3).log(), &ws)));
    }
    {
        let ws = weights.clone();
        add("softmax_rows", &[2, 3], Box::new(move |_, x| wsum(x.softmax(1)?, &ws)));
    }
    {
        let ws = weights.clone();
        add("softmax_cols", &[2, 3], Box::new(move |_, x| wsum(x.softmax(0)?, &ws)));
    }
    {
        let idx = idx.clone();
        add("gather_rows", &[2, 3], Box::new(move |_, x| {
            wsum(x.gather_rows(idx.clone())?, &Tensor::full(&[4, 3], 0.4))
        }));
    }
    {
        let (idx, ws) = (idx.clone(), weights.clone());
        add("scatter_add_rows", &[4, 3], Box::new(move |_, x| {
            wsum(x.scatter_add_rows(idx.clone(), 2)?.square(), &ws)
        }));
    }
    add("gather_cols", &[2, 3], Box::new(move |_, x| {
        wsum(x.gather_cols(cols.clone())?.square(), &Tensor::full(&[2, 3], 1.1))
    }));
    {
        let ws = weights.clone();
        add("mask_fill", &[2, 3], Box::new(move |_, x| {
            let keep = Rc::new(vec![true, false, true, true, false, true]);
            wsum(x.mask_fill(keep, 0.0)?.square(), &ws)
        }));
    }
    {
        let ws = weights.clone();
        add("masked_softmax", &[2, 3], Box::new(move |_, x| {
            let keep = Rc::new(top_m_mask(&x.to_tensor(), 2));
            wsum(x.mask_fill(keep, f64::NEG_INFINITY)?.softmax(1)?, &ws)
        }));
    }
    add("reshape", &[2, 3], Box::new(move |_, x| {
        wsum(x.reshape(&[3, 2])?.reshape(&[2, 3])?.square(), &weights)
    }));
    out
}

/// Worst [`grad_check`] error of every primitive over `points` standard
/// normal inputs.
pub fn check_primitives(points: usize, seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_checks(seed)
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for _ in 0..points {
                let x = Tensor::randn(&c.input_shape, 1.0, &mut rng);
                worst = worst.max(grad_check(&c.f, &x, h)?);
            }
            Ok((c.name, worst))
        })
        .collect()
}
