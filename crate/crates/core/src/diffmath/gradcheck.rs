//! Central finite-difference oracle for tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::sparse::Csr;
use super::tape::{AttnBlock, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let [r, c] = tape.shape(out);
    if r != 1 || c != 1 {
        return Err(Error::NonScalar(r, c));
    }
    Ok(tape.value(out).item())
}

/// Checks the tape gradient of `f` at `theta` against central differences and
/// returns the maximum relative error over all entries.
pub fn grad_check<F>(mut f: F, theta: &Array, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut max_err: f64 = 0.0;
    let mut tape = Tape::new();
    let x = tape.leaf(Arc::new(theta.clone()));
    let out = f(&mut tape, x)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out);
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Array::zeros(theta.rows(), theta.cols()));

    let mut eval = |p: &Array| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.constant(p.clone());
        let o = f(&mut t, v)?;
        scalar_output(&t, o)
    };
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        max_err = max_err.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(max_err)
}

/// Multi-array variant: `f` receives one leaf per entry of `params` and the
/// check covers every entry of every array.
pub fn grad_check_many<F>(mut f: F, params: &[Array], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(Arc::new(p.clone()))).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)?;
    let mut grads = tape.backward(out);
    let analytic: Vec<Array> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Array::zeros(p.rows(), p.cols())))
        .collect();

    let mut probe: Vec<Array> = params.to_vec();
    let mut eval = |ps: &[Array]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        scalar_output(&t, o)
    };
    let mut max_err: f64 = 0.0;
    for a in 0..params.len() {
        for i in 0..params[a].len() {
            let orig = probe[a].data()[i];
            probe[a].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[a].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[a].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(relative_error(analytic[a].data()[i], numeric));
        }
    }
    Ok(max_err)
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Array::from_vec(r, c, data).expect("length matches shape")
}

/// Random linear functional of `out`, so checked gradients are not all-ones.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = tape.shape(out);
    let w = tape.constant(uniform(&mut ChaCha8Rng::seed_from_u64(seed), r, c));
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;

/// Gradient check of every differentiable tape primitive on random inputs.
/// Returns `(case, max relative error)` per case.
pub fn primitive_suite() -> Result<Vec<(String, f64)>> {
    let unary: Vec<(&str, Unary)> = vec![
        ("exp", |t, x| t.exp(x)),
        ("log", |t, x| {
            let sq = t.mul(x, x)?;
            let half = t.constant(Array::scalar(0.5));
            let p = t.add(sq, half)?;
            t.log(p)
        }),
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("relu", |t, x| Ok(t.relu(x))),
        ("softplus", |t, x| Ok(t.softplus(x))),
        ("abs", |t, x| Ok(t.abs(x))),
        ("neg", |t, x| Ok(t.neg(x))),
        ("scale", |t, x| Ok(t.scale(x, -1.7))),
        ("softmax", |t, x| Ok(t.softmax(x))),
        ("log_softmax", |t, x| Ok(t.log_softmax(x))),
        ("layer_norm", |t, x| Ok(t.layer_norm(x, 1e-5))),
        ("sum", |t, x| Ok(t.sum(x))),
        ("mean", |t, x| Ok(t.mean(x))),
        ("row_sums", |t, x| Ok(t.row_sums(x))),
        ("col_sums", |t, x| Ok(t.col_sums(x))),
        ("row_means", |t, x| Ok(t.row_means(x))),
        ("col_means", |t, x| Ok(t.col_means(x))),
        ("slice_cols", |t, x| t.slice_cols(x, 1..3)),
        ("slice_rows", |t, x| t.slice_rows(x, 1..3)),
        ("gather_rows", |t, x| t.gather_rows(x, &[2, 0, 2, 1])),
        ("embedding_lookup", |t, x| t.embedding_lookup(x, &[1, 1, 0])),
        ("scatter_add_rows", |t, x| t.scatter_add_rows(x, &[1, 1, 0], 2)),
        ("gather_elems", |t, x| t.gather_elems(x, &[0, 5, 5, 11], 2, 2)),
        ("concat", |t, x| {
            let s = t.scale(x, 2.0);
            let c = t.concat_cols(&[x, s])?;
            t.concat_rows(&[c, c])
        }),
        ("spmm", |t, x| {
            let m = Csr::from_row_lists(3, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]])?;
            t.spmm(Arc::new(m), x)
        }),
    ];
    let mut out = Vec::new();
    for (i, (name, f)) in unary.into_iter().enumerate() {
        let theta = uniform(&mut ChaCha8Rng::seed_from_u64(100 + i as u64), 3, 4);
        let err = grad_check(
            |t, x| {
                let y = f(t, x)?;
                probe(t, y, 7)
            },
            &theta,
            DEFAULT_STEP,
        )?;
        out.push((name.to_string(), err));
    }

    let shapes = [([3, 4], [3, 4]), ([3, 4], [1, 4]), ([3, 4], [3, 1]), ([1, 1], [3, 4])];
    for (i, (sa, sb)) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let a = uniform(&mut rng, sa[0], sa[1]);
        let b = uniform(&mut rng, sb[0], sb[1]).map(|v| v + 2.0 * v.signum());
        for (op, name) in ["add", "sub", "mul", "div"].iter().enumerate() {
            let err = grad_check_many(
                |t, v| {
                    let y = match op {
                        0 => t.add(v[0], v[1])?,
                        1 => t.sub(v[0], v[1])?,
                        2 => t.mul(v[0], v[1])?,
                        _ => t.div(v[0], v[1])?,
                    };
                    probe(t, y, 5)
                },
                &[a.clone(), b.clone()],
                DEFAULT_STEP,
            )?;
            out.push((format!("{name} {sa:?}x{sb:?}"), err));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { uniform(&mut rng, 4, 3) } else { uniform(&mut rng, 3, 4) };
        let b = if tb { uniform(&mut rng, 2, 4) } else { uniform(&mut rng, 4, 2) };
        let err = grad_check_many(
            |t, v| {
                let y = t.matmul_t(v[0], ta, v[1], tb)?;
                probe(t, y, 1)
            },
            &[a, b],
            DEFAULT_STEP,
        )?;
        out.push((format!("matmul ta={ta} tb={tb}"), err));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = uniform(&mut rng, 5, 4);
    let k = uniform(&mut rng, 5, 4);
    let v = uniform(&mut rng, 5, 6);
    let blocks = vec![AttnBlock { q: 0..2, k: 0..2 }, AttnBlock { q: 2..5, k: 2..5 }];
    for (name, b) in [("attention", None), ("attention blocked", Some(blocks))] {
        let err = grad_check_many(
            |t, x| {
                let y = t.attention(x[0], x[1], x[2], 2, 0.7, b.clone())?;
                probe(t, y, 2)
            },
            &[q.clone(), k.clone(), v.clone()],
            DEFAULT_STEP,
        )?;
        out.push((name.to_string(), err));
    }
    Ok(out)
}
