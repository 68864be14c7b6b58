//! Training: robust feature normalization, the three-term objective with
//! inverse encoding/decoding, AdamW with a warmup+cosine schedule, and a
//! deterministic epoch loop.
//!
//! Every random choice derives from (seed, epoch, sample-sequence) rather
//! than from shared stream position, so a resumed run reproduces an
//! uninterrupted one bit for bit.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::model::{ParamRegistry, UptModel};
use crate::rng::Rng;
use crate::tensor::{Array, Tape, Var};

// -- Normal quantile ---------------------------------------------------------

/// Inverse standard-normal CDF via Acklam's rational approximation
/// (|relative error| < 1.15e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArg(format!("quantile needs p in (0,1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |p: f64| {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    Ok(if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    })
}

// -- Robust statistics and scaling -------------------------------------------

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Outlier-insensitive (mean, std): fit a Gaussian naively, keep only the
/// samples within its inter-quartile range [mu - z sigma, mu + z sigma] with
/// z the 0.75 normal quantile, and recompute both moments from the kept
/// samples. Population std throughout.
pub fn robust_stats(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "robust stats need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let z = normal_quantile(0.75)?;
    let (mean, std) = mean_and_std(samples);
    let (lo, hi) = (mean - z * std, mean + z * std);
    let kept: Vec<f64> = samples.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
    // Heavily symmetric data (e.g. {-1, 1, -1, 1}) can leave the window
    // empty; fall back to the naive moments rather than failing.
    let (rmean, rstd) = if kept.len() < 2 { (mean, std) } else { mean_and_std(&kept) };
    if !(rstd > 0.0) {
        return Err(Error::InvalidArg("zero variance after robust filtering".into()));
    }
    Ok((rmean, rstd))
}

/// Odd compression y = sign(x) ln(1+|x|); tames extreme outliers while
/// keeping small values nearly unchanged.
pub fn log_scale(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Inverse of `log_scale`: x = sign(y) (exp(|y|) - 1).
pub fn log_unscale(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Per-channel robust normalization, optionally preceded by log compression.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub log_scale: bool,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::InvalidArg("normalization channel count mismatch".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArg("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Fits one robust (mean, std) per column.
    pub fn fit_columns(data: &Array<f64>, use_log: bool) -> Result<Self> {
        let (rows, cols) = (data.rows(), data.cols());
        let mut mean = Vec::with_capacity(cols);
        let mut std = Vec::with_capacity(cols);
        for c in 0..cols {
            let col: Vec<f64> = (0..rows)
                .map(|r| {
                    let x = data.at2(r, c);
                    if use_log {
                        log_scale(x)
                    } else {
                        x
                    }
                })
                .collect();
            let (m, s) = robust_stats(&col)?;
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std, log_scale: use_log })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check_cols(&self, x: &Array<f64>) -> Result<()> {
        if x.cols() != self.channels() {
            return Err(Error::InvalidArg(format!(
                "array has {} channels, normalization expects {}",
                x.cols(),
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Array<f64>) -> Result<Array<f64>> {
        self.check_cols(x)?;
        let cols = self.channels();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % cols;
                let v = if self.log_scale { log_scale(v) } else { v };
                (v - self.mean[c]) / self.std[c]
            })
            .collect();
        Array::new(x.shape().to_vec(), data)
    }

    pub fn denormalize(&self, y: &Array<f64>) -> Result<Array<f64>> {
        self.check_cols(y)?;
        let cols = self.channels();
        let data: Vec<f64> = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % cols;
                let v = v * self.std[c] + self.mean[c];
                if self.log_scale {
                    log_unscale(v)
                } else {
                    v
                }
            })
            .collect();
        Array::new(y.shape().to_vec(), data)
    }
}

// -- Task pipeline -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Fixed observation points; the frame features are the model features.
    Eulerian,
    /// Moving particles; model features are the two consecutive velocities
    /// (previous frame then current frame), so inputs start at frame 1.
    Lagrangian,
}

impl TaskKind {
    pub fn first_input(&self) -> usize {
        match self {
            TaskKind::Eulerian => 0,
            TaskKind::Lagrangian => 1,
        }
    }

    pub fn model_feature_dim(&self, raw_d: usize) -> usize {
        match self {
            TaskKind::Eulerian => raw_d,
            TaskKind::Lagrangian => 2 * raw_d,
        }
    }
}

/// One training pair: predict frame `target` from frame `input`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplePlan {
    pub traj: usize,
    pub input: usize,
    pub target: usize,
}

/// Everything needed to turn trajectory frames into normalized model
/// inputs/targets for one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pipeline {
    pub task: TaskKind,
    pub norm: NormStats,
    /// Prediction horizon in frame steps.
    pub delta_t: usize,
}

fn take_rows(a: &Array<f64>, idx: &[usize]) -> Result<Array<f64>> {
    let cols = a.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        if i >= a.rows() {
            return Err(Error::Index { index: i, bound: a.rows() });
        }
        data.extend_from_slice(a.row(i));
    }
    Array::new([idx.len(), cols], data)
}

fn raw_model_features(task: TaskKind, traj: &Trajectory, i: usize) -> Result<Array<f64>> {
    let frame = &traj.frames[i];
    match task {
        TaskKind::Eulerian => Ok(frame.features.clone()),
        TaskKind::Lagrangian => {
            if i == 0 {
                return Err(Error::InvalidArg(
                    "frame 0 has no previous velocities to concatenate".into(),
                ));
            }
            let prev = &traj.frames[i - 1].features;
            let (k, d) = (frame.features.rows(), frame.features.cols());
            let mut data = Vec::with_capacity(k * 2 * d);
            for r in 0..k {
                data.extend_from_slice(prev.row(r));
                data.extend_from_slice(frame.features.row(r));
            }
            Array::new([k, 2 * d], data)
        }
    }
}

impl Pipeline {
    /// Fits the normalization over every usable frame of the given
    /// trajectories. Samples are strided deterministically so no channel
    /// collects more than ~1M values.
    pub fn fit(task: TaskKind, trajs: &[Trajectory], delta_t: usize, use_log: bool) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::InvalidArg("cannot fit normalization on no data".into()));
        }
        if delta_t == 0 {
            return Err(Error::InvalidArg("prediction horizon must be >= 1 step".into()));
        }
        let d = task.model_feature_dim(trajs[0].frames[0].feature_dim());
        let first = task.first_input();
        let total_rows: usize = trajs
            .iter()
            .map(|t| (t.frames.len() - first) * t.frames[0].num_points())
            .sum();
        const CAP: usize = 1 << 20;
        let stride = total_rows.div_ceil(CAP).max(1);

        let mut channels: Vec<Vec<f64>> = vec![Vec::new(); d];
        let mut counter = 0usize;
        for traj in trajs {
            for i in first..traj.frames.len() {
                let feats = raw_model_features(task, traj, i)?;
                for r in 0..feats.rows() {
                    if counter % stride == 0 {
                        for (c, ch) in channels.iter_mut().enumerate() {
                            ch.push(feats.at2(r, c));
                        }
                    }
                    counter += 1;
                }
            }
        }
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for ch in &channels {
            let scaled: Vec<f64> =
                if use_log { ch.iter().map(|&x| log_scale(x)).collect() } else { ch.clone() };
            let (m, s) = robust_stats(&scaled)?;
            mean.push(m);
            std.push(s);
        }
        Ok(Self { task, norm: NormStats { mean, std, log_scale: use_log }, delta_t })
    }

    /// Normalized model features for frame `i` of a trajectory.
    pub fn model_features(&self, traj: &Trajectory, i: usize) -> Result<Array<f64>> {
        self.norm.normalize(&raw_model_features(self.task, traj, i)?)
    }

    /// All valid (input, input + delta_t) pairs over a set of trajectories.
    pub fn plans(&self, trajs: &[Trajectory]) -> Vec<SamplePlan> {
        let mut out = Vec::new();
        for (ti, traj) in trajs.iter().enumerate() {
            let last_input = traj.frames.len().saturating_sub(self.delta_t);
            for i in self.task.first_input()..last_input {
                out.push(SamplePlan { traj: ti, input: i, target: i + self.delta_t });
            }
        }
        out
    }
}

// -- Training configuration ---------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Supernodes drawn per training encode (and for validation scoring).
    pub n_s: usize,
    /// Optional per-sample jitter: each training encode draws its supernode
    /// count uniformly from [lo, hi] (clamped to the input size) instead of
    /// using `n_s`, which makes the trained model robust to being run with
    /// more or fewer supernodes than the validation setting.
    pub n_s_range: Option<[usize; 2]>,
    /// Target queries per sample (clamped to the target frame size).
    pub query_count: usize,
    pub subsample_min: f64,
    pub subsample_max: f64,
    /// Weights for (next-step, inverse decoding, inverse encoding).
    pub loss_weights: [f64; 3],
    pub inverse_losses: bool,
    /// Prediction horizon in frame steps.
    pub delta_t_steps: usize,
    /// Cap on samples visited per epoch; each epoch draws a fresh random
    /// subset of the frame-pair plans. None visits every plan.
    pub epoch_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            peak_lr: 1e-3,
            warmup_epochs: 10,
            weight_decay: 0.05,
            seed: 0,
            n_s: 256,
            n_s_range: None,
            query_count: 2048,
            subsample_min: 0.5,
            subsample_max: 1.0,
            loss_weights: [1.0, 1.0, 1.0],
            inverse_losses: true,
            delta_t_steps: 10,
            epoch_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidArg(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return err(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return err("need peak_lr > 0 and weight_decay >= 0".into());
        }
        if !(self.subsample_min > 0.0 && self.subsample_min <= self.subsample_max && self.subsample_max <= 1.0)
        {
            return err(format!(
                "subsample range ({}, {}) must satisfy 0 < min <= max <= 1",
                self.subsample_min, self.subsample_max
            ));
        }
        if self.n_s == 0 || self.query_count == 0 || self.delta_t_steps == 0 {
            return err("n_s, query_count and delta_t_steps must be positive".into());
        }
        if let Some([lo, hi]) = self.n_s_range {
            if lo == 0 || lo > hi {
                return err(format!("n_s_range [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
            }
        }
        if self.loss_weights.iter().any(|&w| !(w >= 0.0)) {
            return err("loss weights must be nonnegative".into());
        }
        if self.epoch_samples == Some(0) {
            return err("epoch_samples must be positive when set".into());
        }
        Ok(())
    }
}

// -- Learning-rate schedule ----------------------------------------------------

/// Linear warmup then cosine decay to zero. The warmup is one-indexed (the
/// first step already trains at peak/warmup_steps rather than at zero); the
/// cosine leg reaches exactly zero on the final step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let denom = total_steps.saturating_sub(1).saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / denom).clamp(0.0, 1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// -- AdamW ---------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Array<f64>>,
    pub v: Vec<Array<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamRegistry) -> Self {
        let zeros: Vec<Array<f64>> =
            params.iter().map(|(_, a)| Array::zeros(a.shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Rebuilds moment buffers from checkpoint arrays named
    /// `adam_m:<param>` / `adam_v:<param>`.
    pub fn from_arrays(
        params: &ParamRegistry,
        arrays: &[(String, Array<f64>)],
        t: u64,
    ) -> Result<Self> {
        let mut state = Self::new(params);
        state.t = t;
        let mut seen = 0usize;
        for (name, array) in arrays {
            let (slot, param) = if let Some(p) = name.strip_prefix("adam_m:") {
                (&mut state.m, p)
            } else if let Some(p) = name.strip_prefix("adam_v:") {
                (&mut state.v, p)
            } else {
                continue;
            };
            let i = params
                .index_of(param)
                .ok_or_else(|| Error::Corrupt(format!("optimizer state for unknown parameter '{param}'")))?;
            if slot[i].shape() != array.shape() {
                return Err(Error::Corrupt(format!("optimizer state shape mismatch for '{param}'")));
            }
            slot[i] = array.clone();
            seen += 1;
        }
        if seen != 2 * params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} optimizer arrays, found {seen}",
                2 * params.len()
            )));
        }
        Ok(state)
    }

    /// Checkpoint-ready (name, array) pairs for both moment buffers.
    pub fn to_arrays(&self, params: &ParamRegistry) -> Vec<(String, Array<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("adam_m:{name}"), self.m[i].clone()));
            out.push((format!("adam_v:{name}"), self.v[i].clone()));
        }
        out
    }
}

/// One decoupled-weight-decay Adam update in place. Parameters stored as a
/// single row ([1, n]) are bias/gain vectors and are excluded from decay.
pub fn adamw_step(
    params: &mut ParamRegistry,
    grads: &[Array<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArg(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.value(i).shape() {
            return Err(Error::InvalidArg(format!(
                "gradient shape mismatch for '{}'",
                params.name(i)
            )));
        }
        if !g.all_finite() {
            return Err(Error::NanGradient { param: params.name(i).to_string() });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..grads.len() {
        let decayed = params.value(i).shape()[0] > 1;
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.value_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut step = m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decayed {
                step += weight_decay * p[j];
            }
            p[j] -= lr * step;
        }
    }
    Ok(())
}

// -- Sample assembly and the training step --------------------------------------

/// Fully materialized training sample in normalized model space.
#[derive(Clone, Debug)]
pub struct SampleData {
    pub input_positions: Array<f64>,
    pub input_features: Array<f64>,
    pub target_positions: Array<f64>,
    pub target_features: Array<f64>,
    pub condition: std::collections::BTreeMap<String, f64>,
}

/// Draws the subsampled input cloud and the target query set for one plan.
/// Consumes from `rng`: subsample fraction, input indices, query indices.
pub fn assemble_sample(
    pipeline: &Pipeline,
    traj: &Trajectory,
    plan: &SamplePlan,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<SampleData> {
    if plan.target != plan.input + pipeline.delta_t || plan.target >= traj.frames.len() {
        return Err(Error::InvalidArg(format!(
            "plan ({} -> {}) does not match horizon {}",
            plan.input, plan.target, pipeline.delta_t
        )));
    }
    let input_frame = &traj.frames[plan.input];
    let k = input_frame.num_points();
    let fraction = rng.uniform_in(cfg.subsample_min, cfg.subsample_max);
    // The encoder needs at least n_s points, so the subsample never goes below that.
    let count = ((fraction * k as f64).round() as usize).clamp(cfg.n_s.min(k), k);
    let mut keep = rng.sample_without_replacement(k, count);
    keep.sort_unstable();
    let input_positions = take_rows(&input_frame.positions, &keep)?;
    let input_features = take_rows(&pipeline.model_features(traj, plan.input)?, &keep)?;

    let target_frame = &traj.frames[plan.target];
    let k_t = target_frame.num_points();
    let q = cfg.query_count.min(k_t);
    let mut queries = rng.sample_without_replacement(k_t, q);
    queries.sort_unstable();
    let target_positions = take_rows(&target_frame.positions, &queries)?;
    let target_features = take_rows(&pipeline.model_features(traj, plan.target)?, &queries)?;

    Ok(SampleData {
        input_positions,
        input_features,
        target_positions,
        target_features,
        condition: input_frame.conditions.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub next: f64,
    pub inv_dec: f64,
    pub inv_enc: f64,
}

impl LossTerms {
    fn add(&mut self, other: &LossTerms) {
        self.total += other.total;
        self.next += other.next;
        self.inv_dec += other.inv_dec;
        self.inv_enc += other.inv_enc;
    }

    fn scale(&self, s: f64) -> LossTerms {
        LossTerms {
            total: self.total * s,
            next: self.next * s,
            inv_dec: self.inv_dec * s,
            inv_enc: self.inv_enc * s,
        }
    }
}

/// One sample's loss and parameter gradients (registry order).
///
/// The three terms: (1) next-step MSE of decode(approximate(encode(input)))
/// at the target queries; (2) inverse decoding, reconstructing the input
/// features from the un-stepped latent; (3) inverse encoding, re-encoding
/// the detached prediction and matching the detached stepped latent, which
/// trains the encoder alone to invert the decoder's output space.
pub fn training_step(
    model: &UptModel,
    sample: &SampleData,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LossTerms, Vec<Array<f64>>)> {
    let radius = model.config.radius;
    let (_, input_graph) = model.build_graph(&sample.input_positions, cfg.n_s, radius, rng)?;
    let query_graph = if cfg.inverse_losses {
        let n_s_re = cfg.n_s.min(sample.target_positions.rows());
        Some(model.build_graph(&sample.target_positions, n_s_re, radius, rng)?.1)
    } else {
        None
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> =
        model.params().iter().map(|(_, a)| tape.leaf(a.clone(), true)).collect();
    let staged = model.stage_with_vars(&vars)?;
    let cond = model.condition_on_tape(&mut tape, &staged, &sample.condition)?;
    let input_feats = tape.constant(sample.input_features.clone());
    let z_t = model.encode_on_tape(
        &mut tape,
        &staged,
        &sample.input_positions,
        input_feats,
        Some(&input_graph),
        cond,
    )?;
    let z_next = model.approximate_on_tape(&mut tape, &staged, z_t, cond)?;
    let pred = model.decode_on_tape(&mut tape, &staged, z_next, &sample.target_positions, cond)?;
    let target = tape.constant(sample.target_features.clone());
    let loss_next = tape.mse(pred, target)?;

    let [w_next, w_dec, w_enc] = cfg.loss_weights;
    let mut total = tape.scale(loss_next, w_next)?;
    let (mut v_dec, mut v_enc) = (0.0, 0.0);
    if cfg.inverse_losses {
        let recon = model.decode_on_tape(&mut tape, &staged, z_t, &sample.input_positions, cond)?;
        let loss_inv_dec = tape.mse(recon, input_feats)?;
        let pred_det = tape.detach(pred);
        let z_next_det = tape.detach(z_next);
        let z_re = model.encode_on_tape(
            &mut tape,
            &staged,
            &sample.target_positions,
            pred_det,
            query_graph.as_ref(),
            cond,
        )?;
        let loss_inv_enc = tape.mse(z_re, z_next_det)?;
        let a = tape.scale(loss_inv_dec, w_dec)?;
        let b = tape.scale(loss_inv_enc, w_enc)?;
        let partial = tape.add(total, a)?;
        total = tape.add(partial, b)?;
        v_dec = tape.value(loss_inv_dec).data()[0];
        v_enc = tape.value(loss_inv_enc).data()[0];
    }

    let terms = LossTerms {
        total: tape.value(total).data()[0],
        next: tape.value(loss_next).data()[0],
        inv_dec: v_dec,
        inv_enc: v_enc,
    };
    let all = tape.backward(total)?;
    let mut grads = Vec::with_capacity(vars.len());
    for (i, v) in vars.iter().enumerate() {
        let shape = model.params().value(i).shape().to_vec();
        grads.push(match all.get(*v) {
            Some(g) => Array::new(shape, g.to_vec())?,
            None => Array::zeros(shape),
        });
    }
    Ok((terms, grads))
}

// -- Validation ------------------------------------------------------------------

/// Mean one-step prediction MSE (normalized space) over up to 8 evenly
/// strided plans per trajectory. `input_count` limits the input cloud
/// (None = every point). Returns None when no plan fits.
pub fn one_step_mse(
    model: &UptModel,
    pipeline: &Pipeline,
    trajs: &[Trajectory],
    n_s: usize,
    query_count: usize,
    input_count: Option<usize>,
    rng_base: &Rng,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (ti, traj) in trajs.iter().enumerate() {
        let single = std::slice::from_ref(traj);
        let plans = pipeline.plans(single);
        if plans.is_empty() {
            continue;
        }
        let stride = (plans.len() / 8).max(1);
        for (pi, plan) in plans.iter().enumerate().step_by(stride) {
            let mut rng = rng_base.derive(ti as u64).derive(pi as u64);
            let input_frame = &traj.frames[plan.input];
            let k = input_frame.num_points();
            let feats_full = pipeline.model_features(traj, plan.input)?;
            let (positions, features) = match input_count {
                Some(c) if c < k => {
                    let mut keep = rng.sample_without_replacement(k, c);
                    keep.sort_unstable();
                    (take_rows(&input_frame.positions, &keep)?, take_rows(&feats_full, &keep)?)
                }
                _ => (input_frame.positions.clone(), feats_full),
            };

            let target_frame = &traj.frames[plan.target];
            let k_t = target_frame.num_points();
            let q = query_count.min(k_t);
            let mut queries = rng.sample_without_replacement(k_t, q);
            queries.sort_unstable();
            let target_positions = take_rows(&target_frame.positions, &queries)?;
            let target_features = take_rows(&pipeline.model_features(traj, plan.target)?, &queries)?;

            let (_, graph) = model.build_graph(&positions, n_s, model.config.radius, &mut rng)?;
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false)?;
            let cond = model.condition_on_tape(&mut tape, &staged, &input_frame.conditions)?;
            let feats_var = tape.constant(features);
            let z = model.encode_on_tape(&mut tape, &staged, &positions, feats_var, Some(&graph), cond)?;
            let z_next = model.approximate_on_tape(&mut tape, &staged, z, cond)?;
            let pred = model.decode_on_tape(&mut tape, &staged, z_next, &target_positions, cond)?;
            let pv = tape.value(pred).data();
            let tv = target_features.data();
            let mse: f64 =
                pv.iter().zip(tv).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pv.len() as f64;
            sum += mse;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}

// -- Metrics log -------------------------------------------------------------------

pub const METRICS_HEADER: &str =
    "epoch,step,lr,loss_total,loss_next,loss_inv_dec,loss_inv_enc,val_mse";

pub struct MetricsWriter {
    w: BufWriter<File>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        Ok(Self { w })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { w: BufWriter::new(file) })
    }

    pub fn row(
        &mut self,
        epoch: usize,
        step: Option<usize>,
        lr: Option<f64>,
        loss: Option<&LossTerms>,
        val_mse: Option<f64>,
    ) -> Result<()> {
        let step = step.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            self.w,
            "{epoch},{step},{},{},{},{},{},{}",
            fmt_opt(lr),
            fmt_opt(loss.map(|l| l.total)),
            fmt_opt(loss.map(|l| l.next)),
            fmt_opt(loss.map(|l| l.inv_dec)),
            fmt_opt(loss.map(|l| l.inv_enc)),
            fmt_opt(val_mse),
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

// -- Fit ------------------------------------------------------------------------------

pub struct ResumeState {
    /// First epoch to run (epochs below this were already trained).
    pub next_epoch: usize,
    pub adam: AdamState,
}

pub struct FitOptions<'a> {
    pub out_dir: &'a Path,
    pub resume: Option<ResumeState>,
    pub log: bool,
    /// Pause after this many epochs while keeping the full learning-rate
    /// schedule, so a later resume continues exactly where a longer
    /// uninterrupted run would be. None runs to the configured end.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Mean loss terms per epoch (over optimizer steps).
    pub epoch_losses: Vec<LossTerms>,
    pub val_mse: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> std::path::PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.uptc"))
}

/// Epoch loop: shuffled plans, per-sample subsampling and query draws, one
/// AdamW update per batch, per-epoch validation, and a checkpoint (with
/// optimizer state) per epoch plus a `best.txt` marker.
pub fn fit(
    model: &mut UptModel,
    pipeline: &Pipeline,
    train: &[Trajectory],
    val: &[Trajectory],
    cfg: &TrainConfig,
    opts: FitOptions,
) -> Result<FitReport> {
    cfg.validate()?;
    pipeline.norm.validate()?;
    if pipeline.norm.channels() != model.config.d {
        return Err(Error::InvalidArg(format!(
            "pipeline features have {} channels but the model expects {}",
            pipeline.norm.channels(),
            model.config.d
        )));
    }
    if !train.is_empty() && train[0].frames[0].dim() != model.config.dim {
        return Err(Error::InvalidArg("trajectory and model dimensions differ".into()));
    }
    let plans = pipeline.plans(train);
    if plans.is_empty() {
        return Err(Error::InvalidArg("training split has no usable frame pairs".into()));
    }

    let samples_per_epoch = cfg.epoch_samples.unwrap_or(plans.len()).min(plans.len());
    let steps_per_epoch = samples_per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    fs::create_dir_all(opts.out_dir.join("checkpoints"))?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    let (start_epoch, mut adam, mut metrics) = match opts.resume {
        Some(r) => (r.next_epoch, r.adam, MetricsWriter::append(&metrics_path)?),
        None => (0, AdamState::new(model.params()), MetricsWriter::create(&metrics_path)?),
    };

    let base = Rng::seed_from(cfg.seed);
    let mut report = FitReport {
        epoch_losses: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: None,
        best_val_mse: None,
    };
    // Scan older checkpoints so a resumed run keeps the true best marker.
    let mut best: Option<(usize, f64)> = None;

    let end_epoch = match opts.stop_after_epochs {
        Some(n) => cfg.epochs.min(start_epoch + n),
        None => cfg.epochs,
    };
    for epoch in start_epoch..end_epoch {
        let t_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..plans.len()).collect();
        base.derive(2).derive(epoch as u64).shuffle(&mut order);
        order.truncate(samples_per_epoch);

        let mut epoch_sum = LossTerms::default();
        let mut epoch_steps = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let mut acc: Vec<Array<f64>> = model
                .params()
                .iter()
                .map(|(_, a)| Array::zeros(a.shape().to_vec()))
                .collect();
            let mut batch_terms = LossTerms::default();
            for (si, &pi) in batch.iter().enumerate() {
                let seq = (bi * cfg.batch_size + si) as u64;
                let mut srng = base.derive(1).derive(epoch as u64).derive(seq);
                let plan = plans[pi];
                let sample =
                    assemble_sample(pipeline, &train[plan.traj], &plan, cfg, &mut srng)?;
                let (terms, grads) = training_step(model, &sample, cfg, &mut srng)?;
                batch_terms.add(&terms);
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let inv_n = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for x in a.data_mut() {
                    *x *= inv_n;
                }
            }
            let mean_terms = batch_terms.scale(inv_n);
            let lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.peak_lr);
            adamw_step(model.params_mut(), &acc, &mut adam, lr, cfg.weight_decay)?;
            metrics.row(epoch, Some(global_step), Some(lr), Some(&mean_terms), None)?;
            epoch_sum.add(&mean_terms);
            epoch_steps += 1;
        }
        let epoch_mean = epoch_sum.scale(1.0 / epoch_steps.max(1) as f64);
        report.epoch_losses.push(epoch_mean);

        let val_rng = base.derive(3).derive(epoch as u64);
        let val_mse =
            one_step_mse(model, pipeline, val, cfg.n_s, cfg.query_count, None, &val_rng)?;
        metrics.row(epoch, None, None, None, val_mse)?;
        metrics.flush()?;
        report.val_mse.push(val_mse);

        let extra = serde_json::json!({
            "epoch": epoch,
            "adam_t": adam.t,
            "train_config": cfg,
            "pipeline": pipeline,
        });
        model.save_checkpoint(&checkpoint_path(opts.out_dir, epoch), extra, &adam.to_arrays(model.params()))?;
        if let Some(v) = val_mse {
            if best.map(|(_, b)| v < b).unwrap_or(true) {
                best = Some((epoch, v));
                fs::write(
                    opts.out_dir.join("checkpoints").join("best.txt"),
                    format!("epoch_{epoch:04}.uptc\n"),
                )?;
            }
        }
        if opts.log {
            eprintln!(
                "epoch {:>3}/{} loss {:.6} next {:.6} inv_dec {:.6} inv_enc {:.6} val {} ({:.1}s)",
                epoch + 1,
                cfg.epochs,
                epoch_mean.total,
                epoch_mean.next,
                epoch_mean.inv_dec,
                epoch_mean.inv_enc,
                val_mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                t_start.elapsed().as_secs_f64(),
            );
        }
    }
    report.best_epoch = best.map(|(e, _)| e);
    report.best_val_mse = best.map(|(_, v)| v);
    Ok(report)
}

// -- End-to-end gradient check ---------------------------------------------------

/// Finite-difference check of the full three-term objective on a tiny model.
/// The detached branches are frozen at their base-point values so the
/// numeric derivative matches what backpropagation actually computes.
pub fn training_loss_gradcheck() -> Result<crate::tensor::gradcheck::CheckReport> {
    use crate::model::UptConfig;
    use crate::tensor::gradcheck::check_gradients;
    use std::collections::BTreeMap;

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
    let mut cb = BTreeMap::new();
    cb.insert("time".to_string(), [0.0, 10.0]);
    let mut model = UptModel::init(config, vec![[0.0, 1.0], [0.0, 1.0]], cb, 456)?;
    let mut rng = Rng::seed_from(654);
    // Moderate scales keep the loss small, which keeps the see-saw between
    // finite-difference truncation and roundoff comfortably under tolerance.
    for i in 0..model.params().len() {
        for v in model.params_mut().value_mut(i).data_mut() {
            *v = rng.normal() * 0.15;
        }
    }

    let k = 16;
    let kq = 8;
    let input_pos = Array::new([k, 2], (0..k * 2).map(|_| rng.uniform()).collect::<Vec<_>>())?;
    let input_feat =
        Array::new([k, 2], (0..k * 2).map(|_| rng.normal() * 0.5).collect::<Vec<_>>())?;
    let query_pos = Array::new([kq, 2], (0..kq * 2).map(|_| rng.uniform()).collect::<Vec<_>>())?;
    let target_feat =
        Array::new([kq, 2], (0..kq * 2).map(|_| rng.normal() * 0.5).collect::<Vec<_>>())?;
    let mut scalars = BTreeMap::new();
    scalars.insert("time".to_string(), 4.0);

    let (_, input_graph) = model.build_graph(&input_pos, 8, model.config.radius, &mut rng)?;
    let (_, query_graph) = model.build_graph(&query_pos, kq, model.config.radius, &mut rng)?;

    // Base forward pass supplies the frozen values for the detached branches.
    let (pred_base, z_next_base) = {
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, false)?;
        let cond = model.condition_on_tape(&mut tape, &staged, &scalars)?;
        let feats = tape.constant(input_feat.clone());
        let z = model.encode_on_tape(&mut tape, &staged, &input_pos, feats, Some(&input_graph), cond)?;
        let z_next = model.approximate_on_tape(&mut tape, &staged, z, cond)?;
        let pred = model.decode_on_tape(&mut tape, &staged, z_next, &query_pos, cond)?;
        (tape.value(pred).clone(), tape.value(z_next).clone())
    };

    let inputs: Vec<Array<f64>> = model.params().iter().map(|(_, a)| a.clone()).collect();
    check_gradients("training_loss", &inputs, 1e-4, &|tape, vars| {
        let staged = model.stage_with_vars(vars)?;
        let cond = model.condition_on_tape(tape, &staged, &scalars)?;
        let feats = tape.constant(input_feat.clone());
        let z_t = model.encode_on_tape(tape, &staged, &input_pos, feats, Some(&input_graph), cond)?;
        let z_next = model.approximate_on_tape(tape, &staged, z_t, cond)?;
        let pred = model.decode_on_tape(tape, &staged, z_next, &query_pos, cond)?;
        let target = tape.constant(target_feat.clone());
        let loss_next = tape.mse(pred, target)?;

        let recon = model.decode_on_tape(tape, &staged, z_t, &input_pos, cond)?;
        let loss_inv_dec = tape.mse(recon, feats)?;

        let pred_det = tape.constant(pred_base.clone());
        let z_next_det = tape.constant(z_next_base.clone());
        let z_re =
            model.encode_on_tape(tape, &staged, &query_pos, pred_det, Some(&query_graph), cond)?;
        let loss_inv_enc = tape.mse(z_re, z_next_det)?;

        let a = tape.add(loss_next, loss_inv_dec)?;
        tape.add(a, loss_inv_enc)
    })
}
