//! Rollouts and evaluation: stepping the simulation forward entirely in
//! latent space versus autoregressively re-encoding decoded predictions,
//! plus the metrics used to compare them (per-step MSE, Pearson correlation
//! time, velocity error norms) and the discretization-robustness sweep.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::PointCloudFrame;
use crate::model::UptModel;
use crate::rng::Rng;
use crate::tensor::kernels::{sequential_kernels, set_sequential_kernels};
use crate::tensor::Array;
use crate::train::{one_step_mse, Pipeline, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    Latent,
    Autoregressive,
}

/// Output of a rollout. `frames[t]` is the prediction after t+1 time steps
/// at the query positions (normalized model space); the reconstruction of
/// the initial state (zero time steps) is kept separately so a zero-step
/// rollout still produces output.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub mode: RolloutMode,
    pub initial_reconstruction: Array<f64>,
    pub frames: Vec<Array<f64>>,
    pub wall_time_secs: f64,
}

/// Builds the model-space view of one trajectory frame: positions, the
/// task's normalized features, and the frame's condition scalars.
pub fn model_frame(pipeline: &Pipeline, traj: &Trajectory, i: usize) -> Result<PointCloudFrame> {
    let frame = &traj.frames[i];
    PointCloudFrame::new(
        frame.positions.clone(),
        pipeline.model_features(traj, i)?,
        frame.time,
        frame.conditions.clone(),
    )
}

fn advance_time(base: &BTreeMap<String, f64>, t0: f64, steps: usize, per_step: f64) -> BTreeMap<String, f64> {
    let mut cond = base.clone();
    cond.insert("time".to_string(), t0 + steps as f64 * per_step);
    cond
}

/// Where to decode each rollout step: one shared set of query positions, or
/// a separate set per step (needed to follow moving particles whose true
/// positions differ frame to frame).
#[derive(Clone, Copy, Debug)]
pub enum QuerySpec<'a> {
    Fixed(&'a Array<f64>),
    PerStep(&'a [Array<f64>]),
}

impl<'a> QuerySpec<'a> {
    fn at(&self, step: usize) -> &'a Array<f64> {
        match self {
            QuerySpec::Fixed(q) => q,
            QuerySpec::PerStep(qs) => &qs[step],
        }
    }
}

/// Encodes once, then applies the latent time-stepper `t_steps` times,
/// decoding every state at the fixed query positions. The encoder runs
/// exactly once no matter how long the rollout is. Each decoded state uses
/// the same condition scalars the producing latent step ran under.
pub fn latent_rollout(
    model: &UptModel,
    frame0: &PointCloudFrame,
    query_pos: &Array<f64>,
    t_steps: usize,
    time_per_step: f64,
    rng: &mut Rng,
) -> Result<RolloutResult> {
    latent_rollout_with(model, frame0, QuerySpec::Fixed(query_pos), t_steps, time_per_step, rng)
}

/// As [`latent_rollout`], but the decode positions may change per step. The
/// initial reconstruction is decoded at the input frame's own positions.
pub fn latent_rollout_with(
    model: &UptModel,
    frame0: &PointCloudFrame,
    queries: QuerySpec,
    t_steps: usize,
    time_per_step: f64,
    rng: &mut Rng,
) -> Result<RolloutResult> {
    if let QuerySpec::PerStep(qs) = queries {
        if qs.len() != t_steps {
            return Err(Error::InvalidArg(format!(
                "{} per-step query sets for {} steps",
                qs.len(),
                t_steps
            )));
        }
    }
    let start = Instant::now();
    let t0 = *frame0.conditions.get("time").unwrap_or(&frame0.time);
    let mut z = model.encode(
        frame0,
        model.config.n_s,
        model.config.radius,
        rng,
        &frame0.conditions,
    )?;
    let recon_pos = match queries {
        QuerySpec::Fixed(q) => q,
        QuerySpec::PerStep(_) => &frame0.positions,
    };
    let initial_reconstruction = model.decode(&z, recon_pos, &frame0.conditions)?;
    let mut frames = Vec::with_capacity(t_steps);
    for step in 0..t_steps {
        let cond = advance_time(&frame0.conditions, t0, step, time_per_step);
        z = model.approximate(&z, &cond)?;
        frames.push(model.decode(&z, queries.at(step), &cond)?);
    }
    Ok(RolloutResult {
        mode: RolloutMode::Latent,
        initial_reconstruction,
        frames,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// The baseline rollout: each step decodes at the input positions and feeds
/// the prediction back through the encoder as the next input frame. Only
/// valid for tasks whose observation points persist; with moving particles
/// the future query positions are unknown, so the mode is rejected.
pub fn autoregressive_rollout(
    model: &UptModel,
    task: TaskKind,
    frame0: &PointCloudFrame,
    t_steps: usize,
    time_per_step: f64,
    rng: &mut Rng,
) -> Result<RolloutResult> {
    if task == TaskKind::Lagrangian {
        return Err(Error::UnsupportedMode(
            "autoregressive rollout needs fixed observation points; particle positions at future steps are unknown".into(),
        ));
    }
    let start = Instant::now();
    let t0 = *frame0.conditions.get("time").unwrap_or(&frame0.time);
    let positions = frame0.positions.clone();
    let mut features = frame0.features.clone();
    let mut initial_reconstruction = None;
    let mut frames = Vec::with_capacity(t_steps);
    for step in 0..t_steps {
        let cond = advance_time(&frame0.conditions, t0, step, time_per_step);
        let frame = PointCloudFrame::new(
            positions.clone(),
            features.clone(),
            t0 + step as f64 * time_per_step,
            cond.clone(),
        )?;
        let (pred, z_t, _) = model.predict_next(&frame, &positions, &cond, rng)?;
        if step == 0 {
            initial_reconstruction = Some(model.decode(&z_t, &positions, &cond)?);
        }
        features = pred.clone();
        frames.push(pred);
    }
    let initial_reconstruction = match initial_reconstruction {
        Some(r) => r,
        // Zero steps: a single encode/decode pass reconstructs the input.
        None => {
            let z = model.encode(frame0, model.config.n_s, model.config.radius, rng, &frame0.conditions)?;
            model.decode(&z, &positions, &frame0.conditions)?
        }
    };
    Ok(RolloutResult {
        mode: RolloutMode::Autoregressive,
        initial_reconstruction,
        frames,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Timed comparison of the two ways to reach time step T: the latent path
/// pays one encode, T latent steps, and a single final decode; the
/// autoregressive path pays encode+step+decode every step. Kernels are
/// pinned to sequential mode during timing so thread scheduling noise does
/// not leak into the measurement. Returns (latent_secs, autoregressive_secs).
pub fn wall_time_comparison(
    model: &UptModel,
    task: TaskKind,
    frame0: &PointCloudFrame,
    query_pos: &Array<f64>,
    t_steps: usize,
    time_per_step: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let was_sequential = sequential_kernels();
    set_sequential_kernels(true);
    let result = (|| {
        let t0 = *frame0.conditions.get("time").unwrap_or(&frame0.time);

        let latent_start = Instant::now();
        let mut z =
            model.encode(frame0, model.config.n_s, model.config.radius, rng, &frame0.conditions)?;
        let mut cond = frame0.conditions.clone();
        for step in 0..t_steps {
            cond = advance_time(&frame0.conditions, t0, step, time_per_step);
            z = model.approximate(&z, &cond)?;
        }
        model.decode(&z, query_pos, &cond)?;
        let latent_secs = latent_start.elapsed().as_secs_f64();

        let auto_start = Instant::now();
        autoregressive_rollout(model, task, frame0, t_steps, time_per_step, rng)?;
        let auto_secs = auto_start.elapsed().as_secs_f64();
        Ok((latent_secs, auto_secs))
    })();
    set_sequential_kernels(was_sequential);
    result
}

// -- Metrics -----------------------------------------------------------------

fn check_equal_shapes(pred: &[Array<f64>], truth: &[Array<f64>]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArg(format!(
            "{} predicted frames vs {} reference frames",
            pred.len(),
            truth.len()
        )));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(Error::InvalidArg(format!(
                "frame shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Elementwise MSE per step.
pub fn mse_per_step(pred: &[Array<f64>], truth: &[Array<f64>]) -> Result<Vec<f64>> {
    check_equal_shapes(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / p.len() as f64
        })
        .collect())
}

/// Pearson correlation over the flattened (point, channel) pairs of one
/// step. A zero-variance side yields 0: conservative, and never NaN.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Per-step Pearson correlation between prediction and reference, computed
/// jointly over all points and channels, or over one channel when given.
pub fn correlation_per_step(
    pred: &[Array<f64>],
    truth: &[Array<f64>],
    channel: Option<usize>,
) -> Result<Vec<f64>> {
    check_equal_shapes(pred, truth)?;
    pred.iter()
        .zip(truth)
        .map(|(p, tr)| match channel {
            None => Ok(pearson(p.data(), tr.data())),
            Some(c) => {
                if c >= p.cols() {
                    return Err(Error::Index { index: c, bound: p.cols() });
                }
                let col = |a: &Array<f64>| -> Vec<f64> {
                    (0..a.rows()).map(|r| a.at2(r, c)).collect()
                };
                Ok(pearson(&col(p), &col(tr)))
            }
        })
        .collect()
}

/// First step index whose Pearson correlation drops below the threshold;
/// returns the step count if it never does.
pub fn correlation_time(
    pred: &[Array<f64>],
    truth: &[Array<f64>],
    threshold: f64,
    channel: Option<usize>,
) -> Result<usize> {
    let rs = correlation_per_step(pred, truth, channel)?;
    Ok(rs.iter().position(|&r| r < threshold).unwrap_or(pred.len()))
}

/// Mean Euclidean norm of the per-row difference, one scalar per step.
pub fn velocity_error(pred: &[Array<f64>], truth: &[Array<f64>]) -> Result<Vec<f64>> {
    check_equal_shapes(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let mut sum = 0.0;
            for r in 0..p.rows() {
                let sq: f64 = p
                    .row(r)
                    .iter()
                    .zip(t.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sum += sq.sqrt();
            }
            sum / p.rows() as f64
        })
        .collect())
}

/// Column slice as a new array (helper for picking velocity channels out of
/// concatenated feature blocks).
pub fn take_cols(a: &Array<f64>, start: usize, len: usize) -> Result<Array<f64>> {
    if start + len > a.cols() {
        return Err(Error::Index { index: start + len, bound: a.cols() });
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[start..start + len]);
    }
    Array::new([a.rows(), len], data)
}

/// Axis-aligned grid of query positions covering the given bounds,
/// `n_per_axis` points per dimension (row-major over the last axis fastest).
pub fn grid_positions(bounds: &[[f64; 2]], n_per_axis: usize) -> Result<Array<f64>> {
    if bounds.is_empty() || n_per_axis < 2 {
        return Err(Error::InvalidArg("grid needs >= 1 dim and >= 2 points per axis".into()));
    }
    let dim = bounds.len();
    let total = n_per_axis.pow(dim as u32);
    let mut data = Vec::with_capacity(total * dim);
    for flat in 0..total {
        let mut rem = flat;
        let mut coords = vec![0.0; dim];
        for d in (0..dim).rev() {
            let i = rem % n_per_axis;
            rem /= n_per_axis;
            let [lo, hi] = bounds[d];
            coords[d] = lo + (hi - lo) * i as f64 / (n_per_axis - 1) as f64;
        }
        data.extend_from_slice(&coords);
    }
    Array::new([total, dim], data)
}

// -- Discretization sweep ------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub multiplier: f64,
    pub n_s: usize,
    pub mse: f64,
}

/// One-step test MSE while varying input-cloud size (as multiples of
/// `base_points`) and the number of supernodes, without retraining. Every
/// cell derives its randomness from the same base generator, so a cell is
/// exactly reproducible by a standalone `one_step_mse` call with the same
/// arguments.
pub fn discretization_sweep(
    model: &UptModel,
    pipeline: &Pipeline,
    test: &[Trajectory],
    multipliers: &[f64],
    supernode_counts: &[usize],
    base_points: usize,
    query_count: usize,
    rng_base: &Rng,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(multipliers.len() * supernode_counts.len());
    for &m in multipliers {
        if !(m > 0.0) {
            return Err(Error::InvalidArg(format!("input multiplier must be positive, got {m}")));
        }
        let count = (m * base_points as f64).round() as usize;
        for &n_s in supernode_counts {
            if n_s > count {
                return Err(Error::InvalidArg(format!(
                    "{n_s} supernodes but only {count} input points at multiplier {m}"
                )));
            }
            let mse = one_step_mse(model, pipeline, test, n_s, query_count, Some(count), rng_base)?
                .ok_or_else(|| Error::InvalidArg("sweep test set has no usable frame pairs".into()))?;
            rows.push(SweepRow { multiplier: m, n_s, mse });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "multiplier,n_s,mse";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.multiplier, r.n_s, r.mse));
    }
    out
}
