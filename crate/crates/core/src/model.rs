//! The full operator-learning model: a supernode message-passing encoder that
//! compresses any point cloud to a fixed n_latent × h token grid, a latent
//! transformer that steps those tokens forward in time, and a perceiver
//! decoder that reads the latent state out at arbitrary query positions.
//!
//! Every forward pass runs on the autodiff tape; the inference methods
//! (`encode`, `approximate`, `decode`, `predict_next`) wrap the tape-level
//! building blocks with a private tape and plain-array outputs, while
//! training composes the `*_on_tape` pieces directly so the whole three-term
//! loss differentiates end to end.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::blocks::{
    mlp_forward, perceiver_block, transformer_block, AttentionParams, DitModulation,
    LayerNormParams, MlpParams, PerceiverBlockParams, TransformerBlockParams,
};
use crate::container::{read_container, write_container, CHECKPOINT_MAGIC};
use crate::embedding::{condition_vector, ConditionEmbedder, ConditionMlpParams, PosEmbedConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    build_radius_graph, rescale_positions, sample_supernodes, PointCloudFrame, SupernodeGraph,
};
use crate::rng::Rng;
use crate::tensor::{Array, Tape, Var};

pub const POSITION_SCALE: f64 = 200.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UptConfig {
    /// Spatial dimensions of the point clouds.
    pub dim: usize,
    /// Feature channels per point.
    pub d: usize,
    /// Encoder width (point and supernode tokens).
    pub h_enc: usize,
    /// Latent width (approximator and decoder tokens).
    pub h: usize,
    /// Supernodes drawn per encode.
    pub n_s: usize,
    /// Latent tokens after perceiver pooling.
    pub n_latent: usize,
    /// Neighborhood radius in rescaled [0, 200] coordinates.
    pub radius: f64,
    /// In-degree cap per supernode.
    pub max_degree: usize,
    pub enc_blocks: usize,
    pub app_blocks: usize,
    pub dec_blocks: usize,
    pub enc_heads: usize,
    /// Head count for the approximator and the pooling perceiver (width h).
    pub app_heads: usize,
    pub dec_heads: usize,
    /// Condition vector width.
    pub c: usize,
    /// Sincos channels per condition scalar.
    pub cond_embed: usize,
    /// Skip the message-passing hierarchy and treat every point as a token.
    pub every_point_supernode: bool,
}

impl Default for UptConfig {
    /// Desk-scale configuration used by the command-line defaults.
    fn default() -> Self {
        Self {
            dim: 2,
            d: 2,
            h_enc: 96,
            h: 192,
            n_s: 256,
            n_latent: 128,
            radius: 11.0,
            max_degree: 32,
            enc_blocks: 4,
            app_blocks: 4,
            dec_blocks: 1,
            enc_heads: 2,
            app_heads: 3,
            dec_heads: 3,
            c: 192,
            cond_embed: 32,
            every_point_supernode: false,
        }
    }
}

impl UptConfig {
    /// Small configuration for fast tests.
    pub fn smoke() -> Self {
        Self {
            dim: 2,
            d: 2,
            h_enc: 32,
            h: 32,
            n_s: 32,
            n_latent: 16,
            radius: 60.0,
            max_degree: 32,
            enc_blocks: 1,
            app_blocks: 1,
            dec_blocks: 1,
            enc_heads: 2,
            app_heads: 2,
            dec_heads: 2,
            c: 16,
            cond_embed: 8,
            every_point_supernode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidArg(msg));
        if self.dim == 0 || self.d == 0 {
            return err("dim and d must be positive".into());
        }
        if self.n_latent == 0 || self.n_latent > self.n_s {
            return err(format!("need 0 < n_latent ({}) <= n_s ({})", self.n_latent, self.n_s));
        }
        if !(self.radius > 0.0) || self.max_degree == 0 {
            return err("radius and max_degree must be positive".into());
        }
        if self.enc_blocks == 0 || self.app_blocks == 0 || self.dec_blocks == 0 {
            return err("every stage needs at least one block".into());
        }
        for (name, width, heads) in [
            ("encoder", self.h_enc, self.enc_heads),
            ("approximator", self.h, self.app_heads),
            ("decoder", self.h, self.dec_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return err(format!("{name} width {width} not divisible by {heads} heads"));
            }
        }
        // Positional embeddings are added at both widths.
        PosEmbedConfig::new(self.h_enc, self.dim)?;
        PosEmbedConfig::new(self.h, self.dim)?;
        PosEmbedConfig::new(self.cond_embed, 1)?;
        if self.c == 0 {
            return err("condition width must be positive".into());
        }
        Ok(())
    }
}

/// Fixed-size latent state: the full simulation snapshot lives in
/// `tokens` regardless of how many input points produced it.
#[derive(Clone, Debug)]
pub struct Latent {
    /// n_latent × h.
    pub tokens: Array<f64>,
    /// 1 × c condition row this latent was produced under.
    pub condition: Array<f64>,
    /// Number of approximator applications since the encode.
    pub time_index: usize,
}

/// Insertion-ordered, name-keyed parameter store. Iteration order is the
/// construction order, so staging and optimizer updates are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Array<f64>)>,
    index: BTreeMap<String, usize>,
}

impl ParamRegistry {
    pub fn push(&mut self, name: &str, value: Array<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value(&self, i: usize) -> &Array<f64> {
        &self.entries[i].1
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array<f64> {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Array<f64>> {
        self.index_of(name).map(|i| self.value(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }
}

/// Tape handles for every parameter, assembled into the block structures.
pub struct StagedUpt {
    pub cond_mlp: ConditionMlpParams,
    pub input_embed: (Var, Var),
    pub message_mlp: MlpParams,
    pub enc_blocks: Vec<TransformerBlockParams>,
    pub enc_proj: (Var, Var),
    pub latent_queries: Var,
    pub pool: PerceiverBlockParams,
    pub app_blocks: Vec<TransformerBlockParams>,
    pub query_mlp: MlpParams,
    pub dec_blocks: Vec<PerceiverBlockParams>,
    pub output_head: (Var, Var),
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: UptConfig,
    position_bounds: Vec<[f64; 2]>,
    condition_bounds: BTreeMap<String, [f64; 2]>,
    /// Caller-owned section (training pipeline state and the like).
    extra: serde_json::Value,
}

pub struct UptModel {
    pub config: UptConfig,
    params: ParamRegistry,
    embedder: ConditionEmbedder,
    position_bounds: Vec<[f64; 2]>,
    condition_bounds: BTreeMap<String, [f64; 2]>,
    encode_calls: AtomicU64,
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Array<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Array::new([rows, cols], data).expect("positive dims")
}

impl UptModel {
    /// Fresh model with deterministic initialization: Xavier weights, zero
    /// biases, unit layer-norm gains, small random latent queries, and
    /// zero modulation projections (conditioned blocks start as identity).
    pub fn init(
        config: UptConfig,
        position_bounds: Vec<[f64; 2]>,
        condition_bounds: BTreeMap<String, [f64; 2]>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if position_bounds.len() != config.dim {
            return Err(Error::InvalidArg(format!(
                "{} position bounds for dim {}",
                position_bounds.len(),
                config.dim
            )));
        }
        let bounds_map: BTreeMap<String, (f64, f64)> =
            condition_bounds.iter().map(|(k, v)| (k.clone(), (v[0], v[1]))).collect();
        let embedder = ConditionEmbedder::new(&bounds_map, config.cond_embed, config.c)?;

        let mut rng = Rng::seed_from(seed);
        let mut reg = ParamRegistry::default();
        let lin = |reg: &mut ParamRegistry, rng: &mut Rng, name: &str, m: usize, n: usize| {
            reg.push(&format!("{name}.w"), xavier(rng, m, n))?;
            reg.push(&format!("{name}.b"), Array::zeros([1, n]))
        };
        let mlp = |reg: &mut ParamRegistry, rng: &mut Rng, name: &str, m: usize, hid: usize, n: usize| {
            reg.push(&format!("{name}.w1"), xavier(rng, m, hid))?;
            reg.push(&format!("{name}.b1"), Array::zeros([1, hid]))?;
            reg.push(&format!("{name}.w2"), xavier(rng, hid, n))?;
            reg.push(&format!("{name}.b2"), Array::zeros([1, n]))
        };
        let ln = |reg: &mut ParamRegistry, name: &str, h: usize| -> Result<()> {
            reg.push(&format!("{name}.gain"), Array::new([1, h], vec![1.0; h])?)?;
            reg.push(&format!("{name}.bias"), Array::zeros([1, h]))
        };
        let attn = |reg: &mut ParamRegistry, rng: &mut Rng, name: &str, h: usize| -> Result<()> {
            for part in ["wq", "wk", "wv", "wo"] {
                reg.push(&format!("{name}.{part}"), xavier(rng, h, h))?;
                reg.push(&format!("{name}.{}", part.replace('w', "b")), Array::zeros([1, h]))?;
            }
            Ok(())
        };
        let dit = |reg: &mut ParamRegistry, name: &str, c: usize, out: usize| -> Result<()> {
            reg.push(&format!("{name}.w"), Array::zeros([c, out]))?;
            reg.push(&format!("{name}.b"), Array::zeros([1, out]))
        };
        let transformer =
            |reg: &mut ParamRegistry, rng: &mut Rng, name: &str, h: usize, c: usize| -> Result<()> {
                ln(reg, &format!("{name}.ln1"), h)?;
                attn(reg, rng, &format!("{name}.attn"), h)?;
                ln(reg, &format!("{name}.ln2"), h)?;
                mlp(reg, rng, &format!("{name}.mlp"), h, 4 * h, h)?;
                dit(reg, &format!("{name}.dit"), c, 6 * h)
            };
        let perceiver =
            |reg: &mut ParamRegistry, rng: &mut Rng, name: &str, h: usize, c: usize| -> Result<()> {
                ln(reg, &format!("{name}.ln_q"), h)?;
                ln(reg, &format!("{name}.ln_kv"), h)?;
                attn(reg, rng, &format!("{name}.attn"), h)?;
                ln(reg, &format!("{name}.ln_mlp"), h)?;
                mlp(reg, rng, &format!("{name}.mlp"), h, 4 * h, h)?;
                dit(reg, &format!("{name}.dit"), c, 8 * h)
            };

        let cfg = &config;
        mlp(&mut reg, &mut rng, "cond_mlp", embedder.input_dim(), cfg.c, cfg.c)?;
        lin(&mut reg, &mut rng, "input_embed", cfg.d, cfg.h_enc)?;
        mlp(&mut reg, &mut rng, "message_mlp", cfg.h_enc, 4 * cfg.h_enc, cfg.h_enc)?;
        for i in 0..cfg.enc_blocks {
            transformer(&mut reg, &mut rng, &format!("enc{i}"), cfg.h_enc, cfg.c)?;
        }
        lin(&mut reg, &mut rng, "enc_proj", cfg.h_enc, cfg.h)?;
        {
            let data: Vec<f64> =
                (0..cfg.n_latent * cfg.h).map(|_| rng.normal() * 0.02).collect();
            reg.push("latent_queries", Array::new([cfg.n_latent, cfg.h], data)?)?;
        }
        perceiver(&mut reg, &mut rng, "pool", cfg.h, cfg.c)?;
        for i in 0..cfg.app_blocks {
            transformer(&mut reg, &mut rng, &format!("app{i}"), cfg.h, cfg.c)?;
        }
        mlp(&mut reg, &mut rng, "query_mlp", cfg.h, cfg.h, cfg.h)?;
        for i in 0..cfg.dec_blocks {
            perceiver(&mut reg, &mut rng, &format!("dec{i}"), cfg.h, cfg.c)?;
        }
        lin(&mut reg, &mut rng, "output_head", cfg.h, cfg.d)?;

        Ok(Self {
            config,
            params: reg,
            embedder,
            position_bounds,
            condition_bounds,
            encode_calls: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    pub fn position_bounds(&self) -> &[[f64; 2]] {
        &self.position_bounds
    }

    pub fn condition_bounds(&self) -> &BTreeMap<String, [f64; 2]> {
        &self.condition_bounds
    }

    pub fn embedder(&self) -> &ConditionEmbedder {
        &self.embedder
    }

    /// Total `encode` calls since construction (inference entry point only).
    pub fn encode_count(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    fn bounds_tuples(&self) -> Vec<(f64, f64)> {
        self.position_bounds.iter().map(|b| (b[0], b[1])).collect()
    }

    /// Rescales positions to [0, 200], draws the supernode set, and builds
    /// the capped radius graph. Separated from `encode_on_tape` so gradient
    /// checks can freeze one graph across evaluations.
    pub fn build_graph(
        &self,
        positions_raw: &Array<f64>,
        n_s: usize,
        radius: f64,
        rng: &mut Rng,
    ) -> Result<(Array<f64>, SupernodeGraph)> {
        let rescaled = rescale_positions(positions_raw, &self.bounds_tuples(), POSITION_SCALE)?;
        let k = rescaled.rows();
        let idx = if self.config.every_point_supernode {
            (0..k).collect()
        } else {
            if k < n_s {
                return Err(Error::InvalidArg(format!(
                    "frame has {k} points but {n_s} supernodes requested"
                )));
            }
            sample_supernodes(k, n_s, rng)?
        };
        let graph = build_radius_graph(&rescaled, &idx, radius, self.config.max_degree, rng)?;
        Ok((rescaled, graph))
    }

    /// Creates tape leaves for every parameter (in registry order) and wires
    /// them into block structures.
    pub fn stage(&self, tape: &mut Tape<f64>, requires_grad: bool) -> Result<StagedUpt> {
        let vars: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|(_, a)| tape.leaf(a.clone(), requires_grad))
            .collect();
        self.stage_with_vars(&vars)
    }

    /// Wires pre-existing tape handles (one per parameter, registry order)
    /// into block structures; used by gradient checking.
    pub fn stage_with_vars(&self, vars: &[Var]) -> Result<StagedUpt> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArg(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let v = |name: String| -> Result<Var> {
            self.params
                .index_of(&name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::InvalidArg(format!("unknown parameter '{name}'")))
        };
        let mlp = |name: &str| -> Result<MlpParams> {
            Ok(MlpParams {
                w1: v(format!("{name}.w1"))?,
                b1: v(format!("{name}.b1"))?,
                w2: v(format!("{name}.w2"))?,
                b2: v(format!("{name}.b2"))?,
            })
        };
        let ln = |name: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams { gain: v(format!("{name}.gain"))?, bias: v(format!("{name}.bias"))? })
        };
        let attn = |name: &str, heads: usize| -> Result<AttentionParams> {
            Ok(AttentionParams {
                n_heads: heads,
                wq: v(format!("{name}.wq"))?,
                bq: v(format!("{name}.bq"))?,
                wk: v(format!("{name}.wk"))?,
                bk: v(format!("{name}.bk"))?,
                wv: v(format!("{name}.wv"))?,
                bv: v(format!("{name}.bv"))?,
                wo: v(format!("{name}.wo"))?,
                bo: v(format!("{name}.bo"))?,
            })
        };
        let dit = |name: &str| -> Result<DitModulation> {
            Ok(DitModulation { w: v(format!("{name}.w"))?, b: v(format!("{name}.b"))? })
        };
        let transformer = |name: &str, heads: usize| -> Result<TransformerBlockParams> {
            Ok(TransformerBlockParams {
                ln1: ln(&format!("{name}.ln1"))?,
                attn: attn(&format!("{name}.attn"), heads)?,
                ln2: ln(&format!("{name}.ln2"))?,
                mlp: mlp(&format!("{name}.mlp"))?,
                dit: Some(dit(&format!("{name}.dit"))?),
            })
        };
        let perceiver = |name: &str, heads: usize| -> Result<PerceiverBlockParams> {
            Ok(PerceiverBlockParams {
                ln_q: ln(&format!("{name}.ln_q"))?,
                ln_kv: ln(&format!("{name}.ln_kv"))?,
                attn: attn(&format!("{name}.attn"), heads)?,
                ln_mlp: ln(&format!("{name}.ln_mlp"))?,
                mlp: mlp(&format!("{name}.mlp"))?,
                dit: Some(dit(&format!("{name}.dit"))?),
            })
        };

        let cfg = &self.config;
        Ok(StagedUpt {
            cond_mlp: ConditionMlpParams {
                w1: v("cond_mlp.w1".into())?,
                b1: v("cond_mlp.b1".into())?,
                w2: v("cond_mlp.w2".into())?,
                b2: v("cond_mlp.b2".into())?,
            },
            input_embed: (v("input_embed.w".into())?, v("input_embed.b".into())?),
            message_mlp: mlp("message_mlp")?,
            enc_blocks: (0..cfg.enc_blocks)
                .map(|i| transformer(&format!("enc{i}"), cfg.enc_heads))
                .collect::<Result<_>>()?,
            enc_proj: (v("enc_proj.w".into())?, v("enc_proj.b".into())?),
            latent_queries: v("latent_queries".into())?,
            pool: perceiver("pool", cfg.app_heads)?,
            app_blocks: (0..cfg.app_blocks)
                .map(|i| transformer(&format!("app{i}"), cfg.app_heads))
                .collect::<Result<_>>()?,
            query_mlp: mlp("query_mlp")?,
            dec_blocks: (0..cfg.dec_blocks)
                .map(|i| perceiver(&format!("dec{i}"), cfg.dec_heads))
                .collect::<Result<_>>()?,
            output_head: (v("output_head.w".into())?, v("output_head.b".into())?),
        })
    }

    pub fn condition_on_tape(
        &self,
        tape: &mut Tape<f64>,
        staged: &StagedUpt,
        scalars: &BTreeMap<String, f64>,
    ) -> Result<Var> {
        condition_vector(tape, scalars, &self.embedder, &staged.cond_mlp)
    }

    /// Encoder: point embeddings + positional signal → per-edge messages →
    /// mean aggregation on supernodes → transformer → perceiver pooling with
    /// the learned queries. Returns n_latent × h tokens.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<f64>,
        staged: &StagedUpt,
        positions_raw: &Array<f64>,
        features: Var,
        graph: Option<&SupernodeGraph>,
        cond: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let rescaled = rescale_positions(positions_raw, &self.bounds_tuples(), POSITION_SCALE)?;
        let pos_embed = PosEmbedConfig::new(cfg.h_enc, cfg.dim)?.embed(&rescaled)?;
        let fe = tape.linear(features, staged.input_embed.0, staged.input_embed.1)?;
        let pe = tape.constant(pos_embed);
        let x = tape.add(fe, pe)?;

        let mut tokens = if cfg.every_point_supernode {
            x
        } else {
            let graph = graph.ok_or_else(|| {
                Error::InvalidArg("encode needs a supernode graph unless every point is one".into())
            })?;
            let sources = tape.gather_rows(x, &graph.edges_from)?;
            let messages = mlp_forward(tape, sources, &staged.message_mlp)?;
            tape.scatter_mean(messages, &graph.edges_to, graph.num_slots())?
        };
        for block in &staged.enc_blocks {
            tokens = transformer_block(tape, tokens, Some(cond), block)?;
        }
        let context = tape.linear(tokens, staged.enc_proj.0, staged.enc_proj.1)?;
        perceiver_block(tape, staged.latent_queries, context, Some(cond), &staged.pool)
    }

    /// Latent time step: n_latent × h in, n_latent × h out.
    pub fn approximate_on_tape(
        &self,
        tape: &mut Tape<f64>,
        staged: &StagedUpt,
        tokens: Var,
        cond: Var,
    ) -> Result<Var> {
        let mut t = tokens;
        for block in &staged.app_blocks {
            t = transformer_block(tape, t, Some(cond), block)?;
        }
        Ok(t)
    }

    /// Decoder: query positions → sincos embedding → query MLP → perceiver
    /// read-out of the latent tokens → output head. Row i of the result
    /// depends only on query i and the tokens.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<f64>,
        staged: &StagedUpt,
        tokens: Var,
        query_pos_raw: &Array<f64>,
        cond: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let rescaled = rescale_positions(query_pos_raw, &self.bounds_tuples(), POSITION_SCALE)?;
        let embedded = PosEmbedConfig::new(cfg.h, cfg.dim)?.embed(&rescaled)?;
        let qe = tape.constant(embedded);
        let mut queries = mlp_forward(tape, qe, &staged.query_mlp)?;
        for block in &staged.dec_blocks {
            queries = perceiver_block(tape, queries, tokens, Some(cond), block)?;
        }
        tape.linear(queries, staged.output_head.0, staged.output_head.1)
    }

    // -- Inference wrappers ------------------------------------------------

    pub fn encode(
        &self,
        frame: &PointCloudFrame,
        n_s: usize,
        radius: f64,
        rng: &mut Rng,
        condition: &BTreeMap<String, f64>,
    ) -> Result<Latent> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let (_, graph) = self.build_graph(&frame.positions, n_s, radius, rng)?;
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let cond = self.condition_on_tape(&mut tape, &staged, condition)?;
        let features = tape.constant(frame.features.clone());
        let tokens =
            self.encode_on_tape(&mut tape, &staged, &frame.positions, features, Some(&graph), cond)?;
        Ok(Latent {
            tokens: tape.value(tokens).clone(),
            condition: tape.value(cond).clone(),
            time_index: 0,
        })
    }

    pub fn approximate(&self, z: &Latent, condition: &BTreeMap<String, f64>) -> Result<Latent> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let cond = self.condition_on_tape(&mut tape, &staged, condition)?;
        let tokens = tape.constant(z.tokens.clone());
        let out = self.approximate_on_tape(&mut tape, &staged, tokens, cond)?;
        Ok(Latent {
            tokens: tape.value(out).clone(),
            condition: tape.value(cond).clone(),
            time_index: z.time_index + 1,
        })
    }

    pub fn decode(
        &self,
        z: &Latent,
        query_pos: &Array<f64>,
        condition: &BTreeMap<String, f64>,
    ) -> Result<Array<f64>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let cond = self.condition_on_tape(&mut tape, &staged, condition)?;
        let tokens = tape.constant(z.tokens.clone());
        let out = self.decode_on_tape(&mut tape, &staged, tokens, query_pos, cond)?;
        Ok(tape.value(out).clone())
    }

    /// encode → one latent step → decode, all under the input frame's
    /// condition. Returns the prediction with both latents for loss terms.
    pub fn predict_next(
        &self,
        frame: &PointCloudFrame,
        query_pos: &Array<f64>,
        condition: &BTreeMap<String, f64>,
        rng: &mut Rng,
    ) -> Result<(Array<f64>, Latent, Latent)> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let (_, graph) =
            self.build_graph(&frame.positions, self.config.n_s, self.config.radius, rng)?;
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let cond = self.condition_on_tape(&mut tape, &staged, condition)?;
        let features = tape.constant(frame.features.clone());
        let z_t =
            self.encode_on_tape(&mut tape, &staged, &frame.positions, features, Some(&graph), cond)?;
        let z_next = self.approximate_on_tape(&mut tape, &staged, z_t, cond)?;
        let pred = self.decode_on_tape(&mut tape, &staged, z_next, query_pos, cond)?;
        let cond_value = tape.value(cond).clone();
        Ok((
            tape.value(pred).clone(),
            Latent { tokens: tape.value(z_t).clone(), condition: cond_value.clone(), time_index: 0 },
            Latent { tokens: tape.value(z_next).clone(), condition: cond_value, time_index: 1 },
        ))
    }

    // -- Checkpointing -----------------------------------------------------

    /// Writes config, bounds, a caller-supplied JSON section, all parameters,
    /// and any extra arrays (e.g. optimizer state) to one container file.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        extra: serde_json::Value,
        extra_arrays: &[(String, Array<f64>)],
    ) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            position_bounds: self.position_bounds.clone(),
            condition_bounds: self.condition_bounds.clone(),
            extra,
        };
        let mut arrays: Vec<(String, Array<f64>)> =
            self.params.iter().map(|(n, a)| (format!("param:{n}"), a.clone())).collect();
        arrays.extend(extra_arrays.iter().cloned());
        write_container(path, CHECKPOINT_MAGIC, &serde_json::to_string(&meta)?, &arrays)
    }

    /// Restores a model bit-exactly, returning the extra JSON section and
    /// any non-parameter arrays alongside it.
    pub fn load_checkpoint(
        path: &Path,
    ) -> Result<(UptModel, serde_json::Value, Vec<(String, Array<f64>)>)> {
        let data = read_container(path, CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_str(&data.meta)?;
        let mut model =
            UptModel::init(meta.config, meta.position_bounds, meta.condition_bounds, 0)?;
        let mut extra_arrays = Vec::new();
        let mut restored = vec![false; model.params.len()];
        for (name, array) in data.arrays {
            if let Some(param) = name.strip_prefix("param:") {
                let i = model.params.index_of(param).ok_or_else(|| {
                    Error::Corrupt(format!("checkpoint has unknown parameter '{param}'"))
                })?;
                if model.params.value(i).shape() != array.shape() {
                    return Err(Error::Corrupt(format!(
                        "parameter '{param}' has shape {:?}, expected {:?}",
                        array.shape(),
                        model.params.value(i).shape()
                    )));
                }
                *model.params.value_mut(i) = array;
                restored[i] = true;
            } else {
                extra_arrays.push((name, array));
            }
        }
        if let Some(i) = restored.iter().position(|&r| !r) {
            return Err(Error::Corrupt(format!(
                "checkpoint is missing parameter '{}'",
                model.params.name(i)
            )));
        }
        Ok((model, meta.extra, extra_arrays))
    }
}

/// End-to-end finite-difference check of encode → approximate → decode on a
/// tiny frame. All parameters are re-randomized first: the zero modulation
/// init would otherwise hide every branch gradient behind a zero gate. The
/// supernode graph is frozen across evaluations.
pub fn full_model_gradcheck() -> Result<crate::tensor::gradcheck::CheckReport> {
    use crate::tensor::gradcheck::{check_gradients, weighted_sum};

    let config = UptConfig {
        dim: 2,
        d: 2,
        h_enc: 8,
        h: 16,
        n_s: 8,
        n_latent: 4,
        radius: 90.0,
        max_degree: 32,
        enc_blocks: 1,
        app_blocks: 1,
        dec_blocks: 1,
        enc_heads: 2,
        app_heads: 2,
        dec_heads: 2,
        c: 8,
        cond_embed: 4,
        every_point_supernode: false,
    };
    let mut bounds = BTreeMap::new();
    bounds.insert("time".to_string(), [0.0, 10.0]);
    let mut model = UptModel::init(config, vec![[0.0, 1.0], [0.0, 1.0]], bounds, 123)?;

    let mut rng = Rng::seed_from(321);
    for i in 0..model.params.len() {
        let a = model.params.value_mut(i);
        for v in a.data_mut() {
            *v = rng.normal() * 0.3;
        }
    }

    let k = 16;
    let positions = Array::new([k, 2], (0..k * 2).map(|_| rng.uniform()).collect::<Vec<_>>())?;
    let features = Array::new([k, 2], (0..k * 2).map(|_| rng.normal()).collect::<Vec<_>>())?;
    let query_pos = Array::new([4, 2], (0..8).map(|_| rng.uniform()).collect::<Vec<_>>())?;
    let mut scalars = BTreeMap::new();
    scalars.insert("time".to_string(), 3.0);
    let (_, graph) = model.build_graph(&positions, 8, model.config.radius, &mut rng)?;

    let inputs: Vec<Array<f64>> = model.params.iter().map(|(_, a)| a.clone()).collect();
    check_gradients("upt_model", &inputs, 1e-4, &|tape, vars| {
        let staged = model.stage_with_vars(vars)?;
        let cond = model.condition_on_tape(tape, &staged, &scalars)?;
        let feats = tape.constant(features.clone());
        let z = model.encode_on_tape(tape, &staged, &positions, feats, Some(&graph), cond)?;
        let z_next = model.approximate_on_tape(tape, &staged, z, cond)?;
        let out = model.decode_on_tape(tape, &staged, z_next, &query_pos, cond)?;
        weighted_sum(tape, out, 17)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_bounds() -> (Vec<[f64; 2]>, BTreeMap<String, [f64; 2]>) {
        let mut cb = BTreeMap::new();
        cb.insert("time".to_string(), [0.0, 10.0]);
        (vec![[0.0, 1.0], [0.0, 1.0]], cb)
    }

    fn smoke_model(seed: u64) -> UptModel {
        let (pb, cb) = test_bounds();
        UptModel::init(UptConfig::smoke(), pb, cb, seed).unwrap()
    }

    fn random_frame(k: usize, seed: u64) -> PointCloudFrame {
        let mut rng = Rng::seed_from(seed);
        let pos: Vec<f64> = (0..k * 2).map(|_| rng.uniform()).collect();
        let feat: Vec<f64> = (0..k * 2).map(|_| rng.normal()).collect();
        let mut conditions = BTreeMap::new();
        conditions.insert("time".to_string(), 2.5);
        PointCloudFrame::new(
            Array::new([k, 2], pos).unwrap(),
            Array::new([k, 2], feat).unwrap(),
            2.5,
            conditions,
        )
        .unwrap()
    }

    fn scalars() -> BTreeMap<String, f64> {
        let mut s = BTreeMap::new();
        s.insert("time".to_string(), 2.5);
        s
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert!(UptConfig::smoke().validate().is_ok());
        assert!(UptConfig::default().validate().is_ok());
        let mut c = UptConfig::smoke();
        c.n_latent = c.n_s + 1;
        assert!(c.validate().is_err());
        let mut c = UptConfig::smoke();
        c.h = 30; // not divisible by 2*dim
        assert!(c.validate().is_err());
        let mut c = UptConfig::smoke();
        c.enc_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_is_config_determined() {
        let a = smoke_model(1);
        let b = smoke_model(2);
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.params.len(), b.params.len());
        for i in 0..a.params.len() {
            assert_eq!(a.params.name(i), b.params.name(i));
            assert_eq!(a.params.value(i).shape(), b.params.value(i).shape());
            assert!(a.params.value(i).all_finite());
        }
    }

    #[test]
    fn latent_shape_fixed_across_input_sizes() {
        let model = smoke_model(3);
        let cfg = UptConfig::smoke();
        let mut rng = Rng::seed_from(9);
        for mult in [1, 2, 5] {
            let frame = random_frame(cfg.n_s * mult, 40 + mult as u64);
            let z = model.encode(&frame, cfg.n_s, cfg.radius, &mut rng, &scalars()).unwrap();
            assert_eq!(z.tokens.shape(), [cfg.n_latent, cfg.h]);
            assert_eq!(z.condition.shape(), [1, cfg.c]);
            assert_eq!(z.time_index, 0);
        }
        assert_eq!(model.encode_count(), 3);
    }

    #[test]
    fn encode_rejects_too_few_points() {
        let model = smoke_model(4);
        let frame = random_frame(10, 5);
        let mut rng = Rng::seed_from(1);
        assert!(model.encode(&frame, 32, 60.0, &mut rng, &scalars()).is_err());
    }

    #[test]
    fn zero_init_stack_is_identity() {
        let model = smoke_model(5);
        let frame = random_frame(32, 6);
        let mut rng = Rng::seed_from(2);
        let z = model.encode(&frame, 32, 60.0, &mut rng, &scalars()).unwrap();
        // With zero-initialized modulation the pooling perceiver adds nothing
        // to its queries, so the latent IS the learned query parameter.
        assert_eq!(z.tokens.data(), model.params().get("latent_queries").unwrap().data());
        let z1 = model.approximate(&z, &scalars()).unwrap();
        assert_eq!(z1.tokens.data(), z.tokens.data());
        assert_eq!(z1.time_index, 1);
    }

    /// Shared helper: encode with every point a supernode and no degree cap,
    /// so graph sampling cannot differ between variants.
    fn encode_all_points(model: &UptModel, frame: &PointCloudFrame) -> Array<f64> {
        let k = frame.num_points();
        let rescaled =
            rescale_positions(&frame.positions, &model.bounds_tuples(), POSITION_SCALE).unwrap();
        let idx: Vec<usize> = (0..k).collect();
        let graph =
            build_radius_graph(&rescaled, &idx, 60.0, usize::MAX, &mut Rng::seed_from(0)).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false).unwrap();
        let cond = model.condition_on_tape(&mut tape, &staged, &scalars()).unwrap();
        let feats = tape.constant(frame.features.clone());
        let z = model
            .encode_on_tape(&mut tape, &staged, &frame.positions, feats, Some(&graph), cond)
            .unwrap();
        tape.value(z).clone()
    }

    fn randomized(seed: u64) -> UptModel {
        let mut model = smoke_model(seed);
        let mut rng = Rng::seed_from(seed + 1000);
        for i in 0..model.params.len() {
            for v in model.params.value_mut(i).data_mut() {
                *v = rng.normal() * 0.2;
            }
        }
        model
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let model = randomized(7);
        let frame = random_frame(32, 8);
        let base = encode_all_points(&model, &frame);

        let mut perm: Vec<usize> = (0..32).collect();
        Rng::seed_from(3).shuffle(&mut perm);
        let pos: Vec<f64> = perm.iter().flat_map(|&i| frame.positions.row(i).to_vec()).collect();
        let feat: Vec<f64> = perm.iter().flat_map(|&i| frame.features.row(i).to_vec()).collect();
        let permuted = PointCloudFrame::new(
            Array::new([32, 2], pos).unwrap(),
            Array::new([32, 2], feat).unwrap(),
            frame.time,
            frame.conditions.clone(),
        )
        .unwrap();
        let out = encode_all_points(&model, &permuted);
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_ignores_point_duplication() {
        let model = randomized(9);
        let frame = random_frame(32, 10);
        let base = encode_all_points(&model, &frame);

        // Duplicate every point; supernodes stay the first 32 indices, and
        // with no degree cap each neighborhood doubles with identical values,
        // so the mean aggregation is unchanged.
        let mut pos = frame.positions.data().to_vec();
        pos.extend_from_slice(frame.positions.data());
        let mut feat = frame.features.data().to_vec();
        feat.extend_from_slice(frame.features.data());
        let doubled = PointCloudFrame::new(
            Array::new([64, 2], pos).unwrap(),
            Array::new([64, 2], feat).unwrap(),
            frame.time,
            frame.conditions.clone(),
        )
        .unwrap();

        let rescaled =
            rescale_positions(&doubled.positions, &model.bounds_tuples(), POSITION_SCALE).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let graph =
            build_radius_graph(&rescaled, &idx, 60.0, usize::MAX, &mut Rng::seed_from(0)).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false).unwrap();
        let cond = model.condition_on_tape(&mut tape, &staged, &scalars()).unwrap();
        let feats = tape.constant(doubled.features.clone());
        let z = model
            .encode_on_tape(&mut tape, &staged, &doubled.positions, feats, Some(&graph), cond)
            .unwrap();
        let out = tape.value(z);
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn decoder_queries_are_independent() {
        let model = randomized(11);
        let frame = random_frame(32, 12);
        let mut rng = Rng::seed_from(4);
        let z = model.encode(&frame, 32, 60.0, &mut rng, &scalars()).unwrap();
        let queries = Array::new([2, 2], vec![0.2, 0.3, 0.8, 0.6]).unwrap();
        let both = model.decode(&z, &queries, &scalars()).unwrap();
        for (i, q) in [[0.2, 0.3], [0.8, 0.6]].iter().enumerate() {
            let single = Array::new([1, 2], q.to_vec()).unwrap();
            let one = model.decode(&z, &single, &scalars()).unwrap();
            for j in 0..2 {
                let (a, b) = (both.at2(i, j), one.at2(0, j));
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_next_shapes_determinism_and_finiteness() {
        let model = randomized(13);
        let mut rng = Rng::seed_from(14);
        let k = 40;
        let pos: Vec<f64> = (0..k * 2).map(|_| rng.uniform()).collect();
        let feat: Vec<f64> = (0..k * 2).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
        let frame = PointCloudFrame::new(
            Array::new([k, 2], pos).unwrap(),
            Array::new([k, 2], feat).unwrap(),
            1.0,
            scalars(),
        )
        .unwrap();
        let queries = Array::new([7, 2], (0..14).map(|_| rng.uniform()).collect::<Vec<_>>()).unwrap();

        let run = |seed: u64| {
            let mut r = Rng::seed_from(seed);
            model.predict_next(&frame, &queries, &scalars(), &mut r).unwrap()
        };
        let (pred, z_t, z_next) = run(77);
        assert_eq!(pred.shape(), [7, 2]);
        assert_eq!(z_t.tokens.shape(), [16, 32]);
        assert_eq!(z_next.time_index, 1);
        assert!(pred.all_finite());
        let (pred2, _, _) = run(77);
        assert_eq!(pred.data(), pred2.data());
    }

    #[test]
    fn every_point_supernode_skips_message_passing() {
        let mut cfg = UptConfig::smoke();
        cfg.every_point_supernode = true;
        let (pb, cb) = test_bounds();
        let model = UptModel::init(cfg.clone(), pb, cb, 21).unwrap();
        let frame = random_frame(12, 22); // fewer points than n_s is fine here
        let mut rng = Rng::seed_from(5);
        let z = model.encode(&frame, cfg.n_s, cfg.radius, &mut rng, &scalars()).unwrap();
        assert_eq!(z.tokens.shape(), [cfg.n_latent, cfg.h]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = randomized(31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.uptc");
        let extra = serde_json::json!({"note": "test", "epoch": 3});
        let opt_state =
            vec![("opt:m".to_string(), Array::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())];
        model.save_checkpoint(&path, extra.clone(), &opt_state).unwrap();

        let (back, extra_back, arrays_back) = UptModel::load_checkpoint(&path).unwrap();
        assert_eq!(extra_back, extra);
        assert_eq!(arrays_back.len(), 1);
        assert_eq!(arrays_back[0].0, "opt:m");
        assert_eq!(back.config, model.config);
        assert_eq!(back.position_bounds(), model.position_bounds());
        for i in 0..model.params.len() {
            let (a, b) = (model.params.value(i), back.params.value(i));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Same seed, same frame: the restored model encodes identically.
        let frame = random_frame(32, 33);
        let za = model.encode(&frame, 32, 60.0, &mut Rng::seed_from(6), &scalars()).unwrap();
        let zb = back.encode(&frame, 32, 60.0, &mut Rng::seed_from(6), &scalars()).unwrap();
        assert_eq!(za.tokens.data(), zb.tokens.data());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let report = full_model_gradcheck().unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
