//! Central finite-difference gradient checking.
//!
//! The reference gradient is computed purely from forward evaluations
//! (two per perturbed coordinate), so it shares nothing with the tape's
//! backward pass.

use super::{Array, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Relative error with an absolute floor of 1e-6: values smaller than the
/// floor are compared absolutely, since finite differences cannot resolve
/// them anyway.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff_gradient(
    x: &[f64],
    step: f64,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares tape gradients against central finite differences for a
/// scalar-valued graph builder over the given leaf inputs. The step sits
/// near the f64 optimum for central differences (cbrt of machine epsilon),
/// balancing truncation against cancellation.
pub fn check_gradients(
    name: &str,
    inputs: &[Array<f64>],
    tol: f64,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let step = 1e-5;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.len()],
        };
        let mut eval = |flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let arr = if j == i {
                        Array::new(a.shape().to_vec(), flat.to_vec()).expect("same shape")
                    } else {
                        a.clone()
                    };
                    t.leaf(arr, false)
                })
                .collect();
            let l = build(&mut t, &vs).expect("forward failed during finite differences");
            t.value(l).data()[0]
        };
        let fd = finite_diff_gradient(input.data(), step, &mut eval);
        for (&a, &f) in analytic.iter().zip(&fd) {
            max_rel = max_rel.max(rel_err(a, f));
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, tol })
}

fn rand_array(rng: &mut Rng, shape: &[usize]) -> Array<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights; plain `sum` would hide
/// transposition mistakes and gives softmax a structurally zero gradient.
pub fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = Rng::seed_from(seed);
    let w = t.constant(rand_array(&mut rng, &shape));
    let prod = t.mul(y, w)?;
    t.sum(prod)
}

/// Finite-difference checks for every tape operation, sized per the unit
/// examples. Tolerances: 1e-6 for linear/index ops, 1e-5 for the curvier
/// nonlinearities.
pub fn op_suite() -> Result<Vec<CheckReport>> {
    let mut rng = Rng::seed_from(0x9e3779b97f4a7c15);
    let mut reports = Vec::new();

    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[4, 2]);
    reports.push(check_gradients("matmul", &[a, b], 1e-6, &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 1)
    })?);

    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[2, 4]);
    reports.push(check_gradients("matmul_nt", &[a, b], 1e-6, &|t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y, 2)
    })?);

    let x = rand_array(&mut rng, &[2, 5]);
    reports.push(check_gradients("softmax", &[x], 1e-6, &|t, v| {
        let y = t.softmax(v[0], 1)?;
        weighted_sum(t, y, 3)
    })?);

    let x = rand_array(&mut rng, &[3, 4]);
    let gain = rand_array(&mut rng, &[4]);
    let bias = rand_array(&mut rng, &[4]);
    reports.push(check_gradients("layer_norm", &[x, gain, bias], 1e-5, &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(t, y, 4)
    })?);

    let x = rand_array(&mut rng, &[2, 3]);
    reports.push(check_gradients("gelu", &[x], 1e-5, &|t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, 5)
    })?);

    let a = rand_array(&mut rng, &[2, 3]);
    let b = rand_array(&mut rng, &[2, 3]);
    reports.push(check_gradients("add", &[a.clone(), b.clone()], 1e-5, &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 6)
    })?);
    reports.push(check_gradients("mul", &[a, b], 1e-5, &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 7)
    })?);

    let x = rand_array(&mut rng, &[2, 3]);
    reports.push(check_gradients("scale", &[x], 1e-5, &|t, v| {
        let y = t.scale(v[0], 1.7)?;
        weighted_sum(t, y, 8)
    })?);

    let x = rand_array(&mut rng, &[3, 4]);
    let row = rand_array(&mut rng, &[4]);
    reports.push(check_gradients("add_row", &[x.clone(), row.clone()], 1e-5, &|t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y, 9)
    })?);
    reports.push(check_gradients("mul_row", &[x, row], 1e-5, &|t, v| {
        let y = t.mul_row(v[0], v[1])?;
        weighted_sum(t, y, 10)
    })?);

    let x = rand_array(&mut rng, &[4, 3]);
    reports.push(check_gradients("gather_rows", &[x], 1e-6, &|t, v| {
        // A repeated index checks gradient accumulation into the same row.
        let y = t.gather_rows(v[0], &[2, 0, 2])?;
        weighted_sum(t, y, 11)
    })?);

    let a = rand_array(&mut rng, &[2, 2]);
    let b = rand_array(&mut rng, &[2, 3]);
    reports.push(check_gradients("concat_cols", &[a, b], 1e-6, &|t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y, 12)
    })?);

    let x = rand_array(&mut rng, &[3, 5]);
    reports.push(check_gradients("slice_cols", &[x], 1e-6, &|t, v| {
        let y = t.slice_cols(v[0], 1, 3)?;
        weighted_sum(t, y, 13)
    })?);

    let msgs = rand_array(&mut rng, &[5, 2]);
    reports.push(check_gradients("scatter_mean", &[msgs], 1e-6, &|t, v| {
        // Slot 3 stays empty: the zero-row convention must not break backward.
        let y = t.scatter_mean(v[0], &[0, 2, 0, 1, 2], 4)?;
        weighted_sum(t, y, 14)
    })?);

    let p = rand_array(&mut rng, &[3, 2]);
    let q = rand_array(&mut rng, &[3, 2]);
    reports.push(check_gradients("mse", &[p, q], 1e-6, &|t, v| t.mse(v[0], v[1]))?);

    let x = rand_array(&mut rng, &[2, 4]);
    reports.push(check_gradients("sum", &[x], 1e-6, &|t, v| t.sum(v[0]))?);

    Ok(reports)
}
