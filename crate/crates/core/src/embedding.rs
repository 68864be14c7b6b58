//! Sine-cosine positional embeddings (each coordinate dimension embedded
//! separately, then concatenated) and the scalar-condition embedding MLP.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Var};

/// Frequency layout for positional embeddings. Positions are expected in
/// [0, 200]; with the default base the longest wavelength comfortably exceeds
/// that range, so embeddings stay injective over it.
#[derive(Clone, Debug)]
pub struct PosEmbedConfig {
    pub h: usize,
    pub dim: usize,
    /// Max wavelength scale; frequencies run from 1 down to roughly 1/base.
    pub base: f64,
}

impl PosEmbedConfig {
    pub fn new(h: usize, dim: usize) -> Result<Self> {
        Self::with_base(h, dim, 10_000.0)
    }

    pub fn with_base(h: usize, dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || h == 0 || h % (2 * dim) != 0 {
            return Err(Error::InvalidArg(format!(
                "embed width {h} not divisible by 2*dim (dim = {dim})"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::InvalidArg(format!("embedding base must exceed 1, got {base}")));
        }
        Ok(Self { h, dim, base })
    }

    /// Channels per dimension: m sines then m cosines, m = h / (2 dim),
    /// at frequencies base^(-j/m) for j = 0..m.
    pub fn embed(&self, positions: &Array<f64>) -> Result<Array<f64>> {
        if positions.cols() != self.dim {
            return Err(Error::Shape {
                op: "sincos_embed",
                detail: format!("positions have dim {}, config has {}", positions.cols(), self.dim),
            });
        }
        let n = positions.rows();
        let m = self.h / (2 * self.dim);
        let freqs: Vec<f64> =
            (0..m).map(|j| self.base.powf(-(j as f64) / m as f64)).collect();
        let mut out = vec![0.0; n * self.h];
        for i in 0..n {
            let row = &mut out[i * self.h..(i + 1) * self.h];
            for d in 0..self.dim {
                let x = positions.at2(i, d);
                let block = &mut row[d * 2 * m..(d + 1) * 2 * m];
                for (j, &w) in freqs.iter().enumerate() {
                    block[j] = (w * x).sin();
                    block[m + j] = (w * x).cos();
                }
            }
        }
        Array::new([n, self.h], out)
    }
}

/// Positional embedding with the conventional base of 10000.
pub fn sincos_embed(positions: &Array<f64>, h: usize) -> Result<Array<f64>> {
    PosEmbedConfig::new(h, positions.cols())?.embed(positions)
}

/// Turns named scalars (time, physical parameters) into the model's
/// condition input: each scalar is rescaled to [0, 200] by its declared
/// bounds, run through the 1-d sincos embedding, and the per-scalar blocks
/// are concatenated. A 2-layer MLP (owned by the model) maps that to the
/// conditioning vector.
#[derive(Clone, Debug)]
pub struct ConditionEmbedder {
    names: Vec<String>,
    bounds: Vec<(f64, f64)>,
    embed_dim: usize,
    out_dim: usize,
}

impl ConditionEmbedder {
    pub fn new(
        scalars: &BTreeMap<String, (f64, f64)>,
        embed_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        // Validates embed_dim (1-d positions need an even width).
        PosEmbedConfig::new(embed_dim, 1)?;
        if scalars.is_empty() {
            return Err(Error::InvalidArg("condition embedder needs at least one scalar".into()));
        }
        if out_dim == 0 {
            return Err(Error::InvalidArg("condition dim must be positive".into()));
        }
        let mut names = Vec::new();
        let mut bounds = Vec::new();
        for (name, &(lo, hi)) in scalars {
            if !(hi > lo) || !(hi - lo).is_finite() {
                return Err(Error::DegenerateBounds(format!("{name}: [{lo}, {hi}]")));
            }
            names.push(name.clone());
            bounds.push((lo, hi));
        }
        Ok(Self { names, bounds, embed_dim, out_dim })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Width of the concatenated sincos blocks, i.e. the MLP input.
    pub fn input_dim(&self) -> usize {
        self.names.len() * self.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// The fixed (parameter-free) part: rescale + sincos + concat, as a
    /// 1 × input_dim row.
    pub fn embed_scalars(&self, scalars: &BTreeMap<String, f64>) -> Result<Array<f64>> {
        let cfg = PosEmbedConfig::new(self.embed_dim, 1)?;
        let mut row = Vec::with_capacity(self.input_dim());
        for (name, &(lo, hi)) in self.names.iter().zip(&self.bounds) {
            let v = *scalars
                .get(name)
                .ok_or_else(|| Error::InvalidArg(format!("missing condition scalar '{name}'")))?;
            let rescaled = (v - lo) / (hi - lo) * 200.0;
            let embedded = cfg.embed(&Array::new([1, 1], vec![rescaled])?)?;
            row.extend_from_slice(embedded.data());
        }
        Array::new([1, self.input_dim()], row)
    }
}

/// Parameters of the condition MLP, already staged on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConditionMlpParams {
    /// input_dim × hidden
    pub w1: Var,
    pub b1: Var,
    /// hidden × out_dim
    pub w2: Var,
    pub b2: Var,
}

/// Embeds the scalars and applies linear → GELU → linear on the tape,
/// producing the 1 × c condition row used by every conditioned block.
pub fn condition_vector(
    tape: &mut Tape<f64>,
    scalars: &BTreeMap<String, f64>,
    embedder: &ConditionEmbedder,
    params: &ConditionMlpParams,
) -> Result<Var> {
    let x = embedder.embed_scalars(scalars)?;
    let x = tape.constant(x);
    let hidden = tape.linear(x, params.w1, params.b1)?;
    let hidden = tape.gelu(hidden)?;
    tape.linear(hidden, params.w2, params.b2)
}
