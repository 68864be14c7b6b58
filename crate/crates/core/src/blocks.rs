//! Transformer building blocks on the tape: multi-head attention, pre-norm
//! self-attention blocks, perceiver cross-attention blocks, and the
//! scale/shift/gate feature modulation that injects conditions.
//!
//! Modulation convention: modulate(x; scale, shift) = x ⊙ (1 + scale) + shift,
//! and every branch output is multiplied by a gate before the residual add.
//! The projections producing (scale, shift, gate) are zero-initialized, so a
//! freshly initialized conditioned block is exactly the identity map.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Per-feature affine parameters of one layer norm (rows `[1, h]`).
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
}

/// Projections for multi-head scaled dot-product attention. All four weights
/// are `[h, h]` with `[1, h]` biases; heads are contiguous column slices of
/// width h / n_heads.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Two-layer feed-forward net, h → 4h → h with GELU between.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Linear map from the condition row to the concatenated modulation rows:
/// 6h for a transformer block (scale/shift/gate for attention and MLP),
/// 8h for a perceiver block (the extra 2h modulate the normalized context).
#[derive(Clone, Copy, Debug)]
pub struct DitModulation {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerBlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
    pub dit: Option<DitModulation>,
}

#[derive(Clone, Copy, Debug)]
pub struct PerceiverBlockParams {
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
    pub dit: Option<DitModulation>,
}

const LN_EPS: f64 = 1e-6;

/// x ⊙ (1 + scale) + shift with `[1, h]` modulation rows.
pub fn modulate(tape: &mut Tape<f64>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let scaled = tape.mul_row(x, scale)?;
    let x = tape.add(x, scaled)?;
    tape.add_row(x, shift)
}

/// linear → GELU → linear.
pub fn mlp_forward(tape: &mut Tape<f64>, x: Var, params: &MlpParams) -> Result<Var> {
    let hidden = tape.linear(x, params.w1, params.b1)?;
    let hidden = tape.gelu(hidden)?;
    tape.linear(hidden, params.w2, params.b2)
}

/// Multi-head attention from `q` rows onto `kv` rows. Output row i depends on
/// q row i and on all kv rows, never on other q rows.
pub fn attention(tape: &mut Tape<f64>, q: Var, kv: Var, params: &AttentionParams) -> Result<Var> {
    let h = tape.shape(q)[1];
    if tape.shape(kv)[1] != h {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("q width {h} != kv width {}", tape.shape(kv)[1]),
        });
    }
    if params.n_heads == 0 || h % params.n_heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("width {h} not divisible by {} heads", params.n_heads),
        });
    }
    let head_dim = h / params.n_heads;
    let qp = tape.linear(q, params.wq, params.bq)?;
    let kp = tape.linear(kv, params.wk, params.bk)?;
    let vp = tape.linear(kv, params.wv, params.bv)?;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    for i in 0..params.n_heads {
        let qh = tape.slice_cols(qp, i * head_dim, head_dim)?;
        let kh = tape.slice_cols(kp, i * head_dim, head_dim)?;
        let vh = tape.slice_cols(vp, i * head_dim, head_dim)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, inv_sqrt)?;
        let weights = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let mixed = tape.concat_cols(&heads)?;
    tape.linear(mixed, params.wo, params.bo)
}

/// Splits the modulation projection output into `[1, h]` rows.
fn modulation_rows(
    tape: &mut Tape<f64>,
    condition: Var,
    dit: &DitModulation,
    h: usize,
    count: usize,
) -> Result<Vec<Var>> {
    let m = tape.linear(condition, dit.w, dit.b)?;
    let width = tape.shape(m)[1];
    if width != count * h {
        return Err(Error::Shape {
            op: "modulation",
            detail: format!("projection emits {width} columns, block needs {count}*{h}"),
        });
    }
    (0..count).map(|i| tape.slice_cols(m, i * h, h)).collect()
}

fn check_conditioning(condition: Option<Var>, dit: Option<&DitModulation>) -> Result<()> {
    match (condition.is_some(), dit.is_some()) {
        (true, false) => Err(Error::InvalidArg(
            "condition given but block has no modulation parameters".into(),
        )),
        (false, true) => Err(Error::InvalidArg(
            "block has modulation parameters but no condition was given".into(),
        )),
        _ => Ok(()),
    }
}

/// Pre-norm self-attention block. With a condition: both sub-layers are
/// modulated and gated; without: the plain residual block.
pub fn transformer_block(
    tape: &mut Tape<f64>,
    x: Var,
    condition: Option<Var>,
    params: &TransformerBlockParams,
) -> Result<Var> {
    check_conditioning(condition, params.dit.as_ref())?;
    let h = tape.shape(x)[1];
    let rows = match (condition, &params.dit) {
        (Some(c), Some(dit)) => Some(modulation_rows(tape, c, dit, h, 6)?),
        _ => None,
    };

    let xn = tape.layer_norm(x, params.ln1.gain, params.ln1.bias, LN_EPS)?;
    let xn = match &rows {
        Some(r) => modulate(tape, xn, r[0], r[1])?,
        None => xn,
    };
    let branch = attention(tape, xn, xn, &params.attn)?;
    let branch = match &rows {
        Some(r) => tape.mul_row(branch, r[2])?,
        None => branch,
    };
    let x = tape.add(x, branch)?;

    let yn = tape.layer_norm(x, params.ln2.gain, params.ln2.bias, LN_EPS)?;
    let yn = match &rows {
        Some(r) => modulate(tape, yn, r[3], r[4])?,
        None => yn,
    };
    let branch = mlp_forward(tape, yn, &params.mlp)?;
    let branch = match &rows {
        Some(r) => tape.mul_row(branch, r[5])?,
        None => branch,
    };
    tape.add(x, branch)
}

/// Cross-attention block: queries attend onto context, residual on the query
/// path, then a gated MLP. The query path gets the usual six modulation rows;
/// the normalized context gets its own scale and shift (rows 6 and 7).
pub fn perceiver_block(
    tape: &mut Tape<f64>,
    queries: Var,
    context: Var,
    condition: Option<Var>,
    params: &PerceiverBlockParams,
) -> Result<Var> {
    check_conditioning(condition, params.dit.as_ref())?;
    let h = tape.shape(queries)[1];
    let rows = match (condition, &params.dit) {
        (Some(c), Some(dit)) => Some(modulation_rows(tape, c, dit, h, 8)?),
        _ => None,
    };

    let qn = tape.layer_norm(queries, params.ln_q.gain, params.ln_q.bias, LN_EPS)?;
    let qn = match &rows {
        Some(r) => modulate(tape, qn, r[0], r[1])?,
        None => qn,
    };
    let kvn = tape.layer_norm(context, params.ln_kv.gain, params.ln_kv.bias, LN_EPS)?;
    let kvn = match &rows {
        Some(r) => modulate(tape, kvn, r[6], r[7])?,
        None => kvn,
    };
    let branch = attention(tape, qn, kvn, &params.attn)?;
    let branch = match &rows {
        Some(r) => tape.mul_row(branch, r[2])?,
        None => branch,
    };
    let x = tape.add(queries, branch)?;

    let yn = tape.layer_norm(x, params.ln_mlp.gain, params.ln_mlp.bias, LN_EPS)?;
    let yn = match &rows {
        Some(r) => modulate(tape, yn, r[3], r[4])?,
        None => yn,
    };
    let branch = mlp_forward(tape, yn, &params.mlp)?;
    let branch = match &rows {
        Some(r) => tape.mul_row(branch, r[5])?,
        None => branch,
    };
    tape.add(x, branch)
}

/// Finite-difference gradient checks of both block types with random
/// parameters (random modulation too: zero-initialized gates would silence
/// the very gradients being checked).
pub fn gradcheck_suite() -> Result<Vec<crate::tensor::gradcheck::CheckReport>> {
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{check_gradients, weighted_sum};
    use crate::tensor::Array;

    let make_inputs = |shapes: &[[usize; 2]], seed: u64| -> Vec<Array<f64>> {
        let mut rng = Rng::seed_from(seed);
        shapes
            .iter()
            .map(|s| {
                let data: Vec<f64> = (0..s[0] * s[1]).map(|_| rng.normal() * 0.4).collect();
                Array::new(*s, data).unwrap()
            })
            .collect()
    };
    let attn_shapes = |h: usize| -> Vec<[usize; 2]> {
        vec![[h, h], [1, h], [h, h], [1, h], [h, h], [1, h], [h, h], [1, h]]
    };
    let attn_vars = |vars: &[Var], at: usize| AttentionParams {
        n_heads: 2,
        wq: vars[at],
        bq: vars[at + 1],
        wk: vars[at + 2],
        bk: vars[at + 3],
        wv: vars[at + 4],
        bv: vars[at + 5],
        wo: vars[at + 6],
        bo: vars[at + 7],
    };

    let (h, c, n, m) = (8usize, 4usize, 3usize, 4usize);
    let mut reports = Vec::new();

    let mut shapes: Vec<[usize; 2]> = vec![[1, h], [1, h]];
    shapes.extend(attn_shapes(h));
    shapes.extend([[1, h], [1, h], [h, 4 * h], [1, 4 * h], [4 * h, h], [1, h]]);
    shapes.extend([[c, 6 * h], [1, 6 * h], [n, h], [1, c]]);
    let inputs = make_inputs(&shapes, 10);
    reports.push(check_gradients("transformer_block", &inputs, 1e-4, &|tape, vars| {
        let params = TransformerBlockParams {
            ln1: LayerNormParams { gain: vars[0], bias: vars[1] },
            attn: attn_vars(vars, 2),
            ln2: LayerNormParams { gain: vars[10], bias: vars[11] },
            mlp: MlpParams { w1: vars[12], b1: vars[13], w2: vars[14], b2: vars[15] },
            dit: Some(DitModulation { w: vars[16], b: vars[17] }),
        };
        let out = transformer_block(tape, vars[18], Some(vars[19]), &params)?;
        weighted_sum(tape, out, 99)
    })?);

    let mut shapes: Vec<[usize; 2]> = vec![[1, h], [1, h], [1, h], [1, h]];
    shapes.extend(attn_shapes(h));
    shapes.extend([[1, h], [1, h], [h, 4 * h], [1, 4 * h], [4 * h, h], [1, h]]);
    shapes.extend([[c, 8 * h], [1, 8 * h], [m - 2, h], [n, h], [1, c]]);
    let inputs = make_inputs(&shapes, 11);
    reports.push(check_gradients("perceiver_block", &inputs, 1e-4, &|tape, vars| {
        let params = PerceiverBlockParams {
            ln_q: LayerNormParams { gain: vars[0], bias: vars[1] },
            ln_kv: LayerNormParams { gain: vars[2], bias: vars[3] },
            attn: attn_vars(vars, 4),
            ln_mlp: LayerNormParams { gain: vars[12], bias: vars[13] },
            mlp: MlpParams { w1: vars[14], b1: vars[15], w2: vars[16], b2: vars[17] },
            dit: Some(DitModulation { w: vars[18], b: vars[19] }),
        };
        let out = perceiver_block(tape, vars[20], vars[21], Some(vars[22]), &params)?;
        weighted_sum(tape, out, 7)
    })?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Array;

    fn rand_leaf(tape: &mut Tape<f64>, rng: &mut Rng, shape: [usize; 2], s: f64) -> Var {
        let data: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.normal() * s).collect();
        tape.leaf(Array::new(shape, data).unwrap(), true)
    }

    fn rand_attention(
        tape: &mut Tape<f64>,
        rng: &mut Rng,
        h: usize,
        n_heads: usize,
    ) -> AttentionParams {
        AttentionParams {
            n_heads,
            wq: rand_leaf(tape, rng, [h, h], 0.4),
            bq: rand_leaf(tape, rng, [1, h], 0.1),
            wk: rand_leaf(tape, rng, [h, h], 0.4),
            bk: rand_leaf(tape, rng, [1, h], 0.1),
            wv: rand_leaf(tape, rng, [h, h], 0.4),
            bv: rand_leaf(tape, rng, [1, h], 0.1),
            wo: rand_leaf(tape, rng, [h, h], 0.4),
            bo: rand_leaf(tape, rng, [1, h], 0.1),
        }
    }

    fn plain_ln(tape: &mut Tape<f64>, h: usize) -> LayerNormParams {
        LayerNormParams {
            gain: tape.leaf(Array::new([1, h], vec![1.0; h]).unwrap(), true),
            bias: tape.leaf(Array::zeros([1, h]), true),
        }
    }

    fn rand_mlp(tape: &mut Tape<f64>, rng: &mut Rng, h: usize) -> MlpParams {
        MlpParams {
            w1: rand_leaf(tape, rng, [h, 4 * h], 0.3),
            b1: rand_leaf(tape, rng, [1, 4 * h], 0.1),
            w2: rand_leaf(tape, rng, [4 * h, h], 0.3),
            b2: rand_leaf(tape, rng, [1, h], 0.1),
        }
    }

    #[test]
    fn single_kv_row_ignores_query_content() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(1);
        let h = 8;
        let params = rand_attention(&mut tape, &mut rng, h, 2);
        let q = rand_leaf(&mut tape, &mut rng, [3, h], 1.0);
        let kv = rand_leaf(&mut tape, &mut rng, [1, h], 1.0);
        let out = attention(&mut tape, q, kv, &params).unwrap();
        // With one context row the softmax is 1, so every output row is
        // output_proj(value_proj(kv)).
        let v = tape.linear(kv, params.wv, params.bv).unwrap();
        let expect = tape.linear(v, params.wo, params.bo).unwrap();
        let out = tape.value(out);
        let expect = tape.value(expect);
        for i in 0..3 {
            for j in 0..h {
                assert!((out.at2(i, j) - expect.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_kv_rows_change_nothing() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(2);
        let h = 8;
        let params = rand_attention(&mut tape, &mut rng, h, 4);
        let q = rand_leaf(&mut tape, &mut rng, [2, h], 1.0);
        let row: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let kv1 = tape.constant(Array::new([1, h], row.clone()).unwrap());
        let kv2 = tape.constant(Array::new([2, h], [row.clone(), row].concat()).unwrap());
        let a = attention(&mut tape, q, kv1, &params).unwrap();
        let b = attention(&mut tape, q, kv2, &params).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn query_rows_do_not_interact() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(3);
        let h = 8;
        let params = rand_attention(&mut tape, &mut rng, h, 2);
        let r1: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let r2: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let kv = rand_leaf(&mut tape, &mut rng, [5, h], 1.0);
        let both = tape.constant(Array::new([2, h], [r1.clone(), r2.clone()].concat()).unwrap());
        let one = tape.constant(Array::new([1, h], r1).unwrap());
        let two = tape.constant(Array::new([1, h], r2).unwrap());
        let ab = attention(&mut tape, both, kv, &params).unwrap();
        let a = attention(&mut tape, one, kv, &params).unwrap();
        let b = attention(&mut tape, two, kv, &params).unwrap();
        let ab = tape.value(ab);
        let a = tape.value(a);
        let b = tape.value(b);
        for j in 0..h {
            assert!((ab.at2(0, j) - a.at2(0, j)).abs() < 1e-6);
            assert!((ab.at2(1, j) - b.at2(0, j)).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(4);
        let params = rand_attention(&mut tape, &mut rng, 8, 3);
        let q = rand_leaf(&mut tape, &mut rng, [2, 8], 1.0);
        assert!(attention(&mut tape, q, q, &params).is_err());
        let params = rand_attention(&mut tape, &mut rng, 8, 2);
        let kv = rand_leaf(&mut tape, &mut rng, [2, 6], 1.0);
        assert!(attention(&mut tape, q, kv, &params).is_err());
    }

    fn rand_transformer(
        tape: &mut Tape<f64>,
        rng: &mut Rng,
        h: usize,
        c: usize,
        zero_dit: bool,
    ) -> TransformerBlockParams {
        let dit = if zero_dit {
            DitModulation {
                w: tape.leaf(Array::zeros([c, 6 * h]), true),
                b: tape.leaf(Array::zeros([1, 6 * h]), true),
            }
        } else {
            DitModulation {
                w: rand_leaf(tape, rng, [c, 6 * h], 0.2),
                b: rand_leaf(tape, rng, [1, 6 * h], 0.1),
            }
        };
        TransformerBlockParams {
            ln1: plain_ln(tape, h),
            attn: rand_attention(tape, rng, h, 2),
            ln2: plain_ln(tape, h),
            mlp: rand_mlp(tape, rng, h),
            dit: Some(dit),
        }
    }

    fn rand_perceiver(
        tape: &mut Tape<f64>,
        rng: &mut Rng,
        h: usize,
        c: usize,
        zero_dit: bool,
    ) -> PerceiverBlockParams {
        let dit = if zero_dit {
            DitModulation {
                w: tape.leaf(Array::zeros([c, 8 * h]), true),
                b: tape.leaf(Array::zeros([1, 8 * h]), true),
            }
        } else {
            DitModulation {
                w: rand_leaf(tape, rng, [c, 8 * h], 0.2),
                b: rand_leaf(tape, rng, [1, 8 * h], 0.1),
            }
        };
        PerceiverBlockParams {
            ln_q: plain_ln(tape, h),
            ln_kv: plain_ln(tape, h),
            attn: rand_attention(tape, rng, h, 2),
            ln_mlp: plain_ln(tape, h),
            mlp: rand_mlp(tape, rng, h),
            dit: Some(dit),
        }
    }

    #[test]
    fn zero_initialized_conditioned_blocks_are_identity() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(5);
        let (h, c) = (8, 4);
        let cond = rand_leaf(&mut tape, &mut rng, [1, c], 1.0);
        let x = rand_leaf(&mut tape, &mut rng, [5, h], 1.0);
        let tb = rand_transformer(&mut tape, &mut rng, h, c, true);
        let out = transformer_block(&mut tape, x, Some(cond), &tb).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());

        let queries = rand_leaf(&mut tape, &mut rng, [3, h], 1.0);
        let context = rand_leaf(&mut tape, &mut rng, [6, h], 1.0);
        let pb = rand_perceiver(&mut tape, &mut rng, h, c, true);
        let out = perceiver_block(&mut tape, queries, context, Some(cond), &pb).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(queries).data());
    }

    #[test]
    fn transformer_block_is_permutation_equivariant() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(6);
        let (h, c, n) = (8, 4, 6);
        let cond = rand_leaf(&mut tape, &mut rng, [1, c], 1.0);
        let params = rand_transformer(&mut tape, &mut rng, h, c, false);
        let data: Vec<f64> = (0..n * h).map(|_| rng.normal()).collect();
        let x = tape.constant(Array::new([n, h], data.clone()).unwrap());
        let out = transformer_block(&mut tape, x, Some(cond), &params).unwrap();
        let out = tape.value(out).clone();

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * h..(i + 1) * h].to_vec()).collect();
        let xp = tape.constant(Array::new([n, h], permuted).unwrap());
        let outp = transformer_block(&mut tape, xp, Some(cond), &params).unwrap();
        let outp = tape.value(outp);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..h {
                assert!((outp.at2(new_row, j) - out.at2(old_row, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn perceiver_ignores_context_order() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(7);
        let (h, c, n) = (8, 4, 7);
        let cond = rand_leaf(&mut tape, &mut rng, [1, c], 1.0);
        let params = rand_perceiver(&mut tape, &mut rng, h, c, false);
        let queries = rand_leaf(&mut tape, &mut rng, [3, h], 1.0);
        let data: Vec<f64> = (0..n * h).map(|_| rng.normal()).collect();
        let ctx = tape.constant(Array::new([n, h], data.clone()).unwrap());
        let out = perceiver_block(&mut tape, queries, ctx, Some(cond), &params).unwrap();
        let out = tape.value(out).clone();

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * h..(i + 1) * h].to_vec()).collect();
        let ctxp = tape.constant(Array::new([n, h], permuted).unwrap());
        let outp = perceiver_block(&mut tape, queries, ctxp, Some(cond), &params).unwrap();
        let outp = tape.value(outp);
        for (a, b) in out.data().iter().zip(outp.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn perceiver_uniform_context_matches_single_row() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(8);
        let (h, c) = (8, 4);
        let cond = rand_leaf(&mut tape, &mut rng, [1, c], 1.0);
        let params = rand_perceiver(&mut tape, &mut rng, h, c, false);
        let queries = rand_leaf(&mut tape, &mut rng, [4, h], 1.0);
        let row: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        let one = tape.constant(Array::new([1, h], row.clone()).unwrap());
        let many = tape.constant(Array::new([5, h], row.repeat(5)).unwrap());
        let a = perceiver_block(&mut tape, queries, one, Some(cond), &params).unwrap();
        let b = perceiver_block(&mut tape, queries, many, Some(cond), &params).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn conditioning_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(9);
        let (h, c) = (8, 4);
        let cond = rand_leaf(&mut tape, &mut rng, [1, c], 1.0);
        let x = rand_leaf(&mut tape, &mut rng, [2, h], 1.0);
        let params = rand_transformer(&mut tape, &mut rng, h, c, false);
        assert!(transformer_block(&mut tape, x, None, &params).is_err());
        let plain = TransformerBlockParams { dit: None, ..params };
        assert!(transformer_block(&mut tape, x, Some(cond), &plain).is_err());
        assert!(transformer_block(&mut tape, x, None, &plain).is_ok());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for report in gradcheck_suite().unwrap() {
            assert!(report.passed(), "{report:?}");
        }
    }
}
