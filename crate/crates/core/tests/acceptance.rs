//! Acceptance gates: nine end-to-end checks covering the autodiff engine,
//! the model's structural invariants, the analytic data generators, learning
//! on both task families, latent versus autoregressive rollouts,
//! discretization robustness, normalization statistics, and bit-level
//! reproducibility.
//!
//! The single test below runs every gate in order and prints one PASS/FAIL
//! line per gate (visible with `--nocapture`, or automatically when a gate
//! fails). All tolerances and wall-time budgets are pinned as the constants
//! at the top of this file.
//!
//! For local debugging, `UPT_ACCEPTANCE_ONLY=4,6` runs a subset; skipped
//! gates still fail the test so a filtered run can never green-light.

use std::collections::BTreeMap;
use std::time::Instant;

use upt_core::blocks;
use upt_core::datagen::{
    diffusion_field, diffusion_residual_max, generate_diffusion2d, generate_tgv2d, probe_blobs,
    tgv2d_divergence_max, tgv2d_momentum_residual_max, TgvParams, Trajectory,
    DIFFUSION_RESIDUAL_TOL, TGV_DIVERGENCE_TOL, TGV_MOMENTUM_RESIDUAL_TOL,
};
use upt_core::geometry::{
    build_radius_graph, calibrate_radius, rescale_positions, sample_supernodes, PointCloudFrame,
};
use upt_core::model::{full_model_gradcheck, Latent, UptConfig, UptModel, POSITION_SCALE};
use upt_core::rng::Rng;
use upt_core::rollout::{
    autoregressive_rollout, latent_rollout, latent_rollout_with, model_frame, mse_per_step,
    take_cols, velocity_error, wall_time_comparison, discretization_sweep, QuerySpec,
};
use upt_core::tensor::gradcheck::{op_suite, rel_err};
use upt_core::tensor::kernels::set_sequential_kernels;
use upt_core::tensor::{Array, Tape};
use upt_core::train::{
    fit, log_scale, log_unscale, normal_quantile, one_step_mse, robust_stats, training_loss_gradcheck,
    FitOptions, Pipeline, TaskKind, TrainConfig,
};

// -- Pinned tolerances and budgets --------------------------------------------

/// Gate 1: every gradient check must sit below this relative error.
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 120.0;

/// Gate 2: permutation invariance and query independence bounds.
const PERM_TOL: f64 = 1e-6;
const QUERY_TOL: f64 = 1e-6;

/// Gate 3 budget; the residual tolerances themselves are pinned next to the
/// oracles (`TGV_MOMENTUM_RESIDUAL_TOL`, `TGV_DIVERGENCE_TOL`,
/// `DIFFUSION_RESIDUAL_TOL`).
const ORACLE_BUDGET_SECS: f64 = 60.0;

/// Gate 4: trained one-step MSE must be at most this fraction of the
/// persistence baseline, within the wall-time budget.
const LEARN_RATIO: f64 = 0.25;
const LEARN_BUDGET_SECS: f64 = 1800.0;
/// Trajectories in the field-learning training set.
const DIFFUSION_TRAIN_TRAJS: usize = 100;

/// Gate 5: particle-task budget, the rollout step checked against the
/// constant-velocity baseline (five latent applications of ten raw frames
/// each = raw step 50), and the smoothing window for the trend check.
const PARTICLE_BUDGET_SECS: f64 = 3600.0;
const STEP50_INDEX: usize = 4;
const SMOOTH_WINDOW: usize = 5;
const TREND_SLACK: f64 = 1e-12;

/// Gate 6: latent rollout may be at most this factor worse than
/// autoregressive at every step, and must cost at most this wall-time
/// fraction at the large input size.
const LATENT_MSE_FACTOR: f64 = 2.0;
const ROLLOUT_STEPS: usize = 20;
const WALL_CLOCK_POINTS: usize = 8192;
const WALL_CLOCK_RATIO: f64 = 0.5;

/// Gate 7: every sweep cell must stay within this relative band of the
/// (multiplier 1.0, training supernode count) reference cell.
const SWEEP_REL_BAND: f64 = 0.5;

/// Gate 8: bounds for the robust statistics and the scaling roundtrip.
const NORMAL_SAMPLES: usize = 1_000_000;
const MEAN_TOL: f64 = 0.01;
const QUANTILE_TOL: f64 = 1e-4;
const LOG_ROUNDTRIP_TOL: f64 = 1e-12;

/// Base seed every gate derives its randomness from.
const SUITE_SEED: u64 = 0xACCE;

type GateResult = Result<String, String>;

fn er<T>(r: upt_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

// -- Shared trained artifacts ---------------------------------------------------

/// Everything gates 4, 6 and 7 share: the diffusion model trained once per
/// suite run, its pipeline, the held-out test set, and the numbers gate 4
/// judges.
struct DiffusionWorld {
    model: UptModel,
    pipeline: Pipeline,
    cfg: TrainConfig,
    test: Vec<Trajectory>,
    persistence_mse: f64,
    model_mse: f64,
    build_secs: f64,
}

#[derive(Default)]
struct Ctx {
    diffusion: Option<DiffusionWorld>,
}

fn suite_rng(tag: u64) -> Rng {
    Rng::seed_from(SUITE_SEED).derive(tag)
}

fn gen_diffusion_set(count: usize, k: usize, tag: u64) -> upt_core::Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = suite_rng(tag).derive(i as u64);
            generate_diffusion2d(k, 201, 0.01, 0.05, 3, &mut rng)
        })
        .collect()
}

/// Mean squared change of the normalized features over one prediction
/// horizon — the score of a predictor that simply repeats its input. Walks
/// the same evenly strided plans the validation MSE uses, over every point.
fn persistence_mse(pipeline: &Pipeline, trajs: &[Trajectory]) -> upt_core::Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for traj in trajs {
        let plans = pipeline.plans(std::slice::from_ref(traj));
        let stride = (plans.len() / 8).max(1);
        for plan in plans.iter().step_by(stride) {
            let a = pipeline.model_features(traj, plan.input)?;
            let b = pipeline.model_features(traj, plan.target)?;
            let mse = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.len() as f64;
            sum += mse;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Small-but-real model configuration for the diffusion task. The latent
/// width stays far below the 192 cap asserted by gate 4.
fn diffusion_model_config(radius: f64) -> UptConfig {
    UptConfig {
        dim: 2,
        d: 1,
        h_enc: 32,
        h: 48,
        n_s: 64,
        n_latent: 32,
        radius,
        max_degree: 32,
        enc_blocks: 1,
        app_blocks: 2,
        dec_blocks: 1,
        enc_heads: 2,
        app_heads: 2,
        dec_heads: 2,
        c: 32,
        cond_embed: 8,
        every_point_supernode: false,
    }
}

fn diffusion_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 8,
        peak_lr: 1e-3,
        warmup_epochs: 5,
        weight_decay: 0.05,
        seed: 0,
        n_s: 64,
        query_count: 128,
        subsample_min: 0.5,
        subsample_max: 1.0,
        loss_weights: [1.0, 1.0, 1.0],
        inverse_losses: true,
        delta_t_steps: 10,
        epoch_samples: Some(192),
    }
}

fn calibrated_radius(frame: &PointCloudFrame, domain: &[[f64; 2]]) -> upt_core::Result<f64> {
    let bounds: Vec<(f64, f64)> = domain.iter().map(|b| (b[0], b[1])).collect();
    let rescaled = rescale_positions(&frame.positions, &bounds, POSITION_SCALE)?;
    calibrate_radius(&rescaled, 24.0)
}

fn build_diffusion_world() -> Result<DiffusionWorld, String> {
    let start = Instant::now();
    let train = er(gen_diffusion_set(DIFFUSION_TRAIN_TRAJS, 256, 1))?;
    let val = er(gen_diffusion_set(2, 256, 2))?;
    let test = er(gen_diffusion_set(8, 256, 3))?;

    let cfg = diffusion_train_config();
    let pipeline = er(Pipeline::fit(TaskKind::Eulerian, &train, cfg.delta_t_steps, false))?;
    // The baseline is computed before any training so the target is fixed
    // up front.
    let persistence = er(persistence_mse(&pipeline, &test))?;

    let radius = er(calibrated_radius(&train[0].frames[0], &train[0].metadata.domain))?;
    let mut model = er(UptModel::init(
        diffusion_model_config(radius),
        train[0].metadata.domain.clone(),
        train[0].metadata.condition_bounds.clone(),
        cfg.seed,
    ))?;

    let dir = tempfile::tempdir().map_err(|e| format!("tempdir: {e}"))?;
    er(fit(
        &mut model,
        &pipeline,
        &train,
        &val,
        &cfg,
        FitOptions { out_dir: dir.path(), resume: None, log: true, stop_after_epochs: None },
    ))?;

    let model_mse =
        er(one_step_mse(&model, &pipeline, &test, cfg.n_s, 256, None, &suite_rng(4)))?
            .ok_or_else(|| "no usable test plans".to_string())?;

    Ok(DiffusionWorld {
        model,
        pipeline,
        cfg,
        test,
        persistence_mse: persistence,
        model_mse,
        build_secs: start.elapsed().as_secs_f64(),
    })
}

impl Ctx {
    fn diffusion(&mut self) -> Result<&DiffusionWorld, String> {
        if self.diffusion.is_none() {
            self.diffusion = Some(build_diffusion_world()?);
        }
        Ok(self.diffusion.as_ref().unwrap())
    }
}

// -- Gate 1: gradient suite ------------------------------------------------------

fn gate_gradients(_ctx: &mut Ctx) -> GateResult {
    let start = Instant::now();
    let mut reports = er(op_suite())?;
    reports.extend(er(blocks::gradcheck_suite())?);
    reports.push(er(full_model_gradcheck())?);
    reports.push(er(training_loss_gradcheck())?);
    let secs = start.elapsed().as_secs_f64();

    let mut worst = ("", 0.0f64);
    for r in &reports {
        if r.max_rel_err > worst.1 {
            worst = (&r.name, r.max_rel_err);
        }
        if r.max_rel_err > GRAD_TOL {
            return Err(format!(
                "{}: rel err {:.3e} exceeds {GRAD_TOL:.0e}",
                r.name, r.max_rel_err
            ));
        }
    }
    if secs > GRAD_BUDGET_SECS {
        return Err(format!("took {secs:.1}s, budget {GRAD_BUDGET_SECS}s"));
    }
    Ok(format!(
        "{} checks, worst rel err {:.2e} ({}) in {secs:.1}s",
        reports.len(),
        worst.1,
        worst.0
    ))
}

// -- Gate 2: structural invariants ------------------------------------------------

/// A small model with fully random weights (including the conditioning
/// projections, which init zeroes) so the invariance checks see a
/// non-degenerate network.
fn randomized_model() -> upt_core::Result<UptModel> {
    let mut config = UptConfig::smoke();
    config.n_s = 32;
    config.n_latent = 16;
    let mut cb = BTreeMap::new();
    cb.insert("time".to_string(), [0.0, 1.0]);
    let mut model = UptModel::init(config, vec![[0.0, 1.0], [0.0, 1.0]], cb, 21)?;
    let mut prng = Rng::seed_from(22);
    for i in 0..model.params().len() {
        for v in model.params_mut().value_mut(i).data_mut() {
            *v = prng.normal() * 0.2;
        }
    }
    Ok(model)
}

fn random_cloud(k: usize, d: usize, rng: &mut Rng) -> upt_core::Result<PointCloudFrame> {
    let pos: Vec<f64> = (0..k * 2).map(|_| rng.uniform()).collect();
    let feat: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    let mut cond = BTreeMap::new();
    cond.insert("time".to_string(), 0.4);
    PointCloudFrame::new(Array::new([k, 2], pos)?, Array::new([k, d], feat)?, 0.4, cond)
}

/// Encodes with an explicitly chosen supernode index set and no degree cap,
/// so the same physical supernodes can be fixed across a permutation.
fn encode_with_supernodes(
    model: &UptModel,
    frame: &PointCloudFrame,
    supernode_idx: &[usize],
    radius: f64,
) -> upt_core::Result<Array<f64>> {
    let bounds: Vec<(f64, f64)> =
        model.position_bounds().iter().map(|b| (b[0], b[1])).collect();
    let rescaled = rescale_positions(&frame.positions, &bounds, POSITION_SCALE)?;
    // Degree cap at the full cloud size = no capping, so the neighbor sets
    // are a pure function of the geometry.
    let graph = build_radius_graph(
        &rescaled,
        supernode_idx,
        radius,
        frame.num_points(),
        &mut Rng::seed_from(0),
    )?;
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, false)?;
    let cond = model.condition_on_tape(&mut tape, &staged, &frame.conditions)?;
    let feats = tape.constant(frame.features.clone());
    let tokens =
        model.encode_on_tape(&mut tape, &staged, &frame.positions, feats, Some(&graph), cond)?;
    Ok(tape.value(tokens).clone())
}

fn max_rel_diff(a: &Array<f64>, b: &Array<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

fn gate_structure(_ctx: &mut Ctx) -> GateResult {
    let model = er(randomized_model())?;
    let cfg = model.config.clone();
    let mut rng = suite_rng(20);

    // (a) The latent shape is the same fixed grid for any input count.
    for mult in [1usize, 2, 5] {
        let k = cfg.n_s * mult;
        let frame = er(random_cloud(k, cfg.d, &mut rng))?;
        let z = er(model.encode(&frame, cfg.n_s, cfg.radius, &mut rng, &frame.conditions))?;
        if z.tokens.shape() != [cfg.n_latent, cfg.h] {
            return Err(format!(
                "k={k}: latent shape {:?}, expected [{}, {}]",
                z.tokens.shape(),
                cfg.n_latent,
                cfg.h
            ));
        }
    }

    // (b) Permuting the input rows (same supernode point set, uncapped
    // neighborhoods) leaves the encoding unchanged up to summation order.
    let k = 160;
    let frame = er(random_cloud(k, cfg.d, &mut rng))?;
    let idx = er(sample_supernodes(k, cfg.n_s, &mut rng))?;
    let tokens = er(encode_with_supernodes(&model, &frame, &idx, cfg.radius))?;

    let mut perm: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut perm);
    let mut inverse = vec![0usize; k];
    for (new_row, &old_row) in perm.iter().enumerate() {
        inverse[old_row] = new_row;
    }
    let permute = |a: &Array<f64>| -> upt_core::Result<Array<f64>> {
        let mut data = Vec::with_capacity(a.len());
        for &old_row in &perm {
            data.extend_from_slice(a.row(old_row));
        }
        Array::new(a.shape().to_vec(), data)
    };
    let permuted = er(PointCloudFrame::new(
        er(permute(&frame.positions))?,
        er(permute(&frame.features))?,
        frame.time,
        frame.conditions.clone(),
    ))?;
    let idx_perm: Vec<usize> = idx.iter().map(|&i| inverse[i]).collect();
    let tokens_perm = er(encode_with_supernodes(&model, &permuted, &idx_perm, cfg.radius))?;
    let perm_diff = max_rel_diff(&tokens, &tokens_perm);
    if perm_diff > PERM_TOL {
        return Err(format!("permutation changed the encoding by {perm_diff:.3e} rel"));
    }

    // (c) Decoding queries in one batch matches decoding them one at a time.
    let z = Latent {
        tokens: tokens.clone(),
        condition: {
            let mut tape = Tape::new();
            let staged = er(model.stage(&mut tape, false))?;
            let cond = er(model.condition_on_tape(&mut tape, &staged, &frame.conditions))?;
            tape.value(cond).clone()
        },
        time_index: 0,
    };
    let queries = er(random_cloud(16, cfg.d, &mut rng))?.positions;
    let batched = er(model.decode(&z, &queries, &frame.conditions))?;
    let mut query_diff = 0.0f64;
    for i in 0..queries.rows() {
        let single = er(Array::new([1, 2], queries.row(i).to_vec()))?;
        let one = er(model.decode(&z, &single, &frame.conditions))?;
        for c in 0..one.cols() {
            query_diff = query_diff.max(rel_err(batched.at2(i, c), one.at2(0, c)));
        }
    }
    if query_diff > QUERY_TOL {
        return Err(format!("batched vs per-query decode differ by {query_diff:.3e} rel"));
    }

    // (d) With freshly initialized (zero) conditioning projections, every
    // conditioned block gates its branches shut: the latent time step is
    // exactly the identity.
    let mut cb = BTreeMap::new();
    cb.insert("time".to_string(), [0.0, 1.0]);
    let fresh = er(UptModel::init(UptConfig::smoke(), vec![[0.0, 1.0], [0.0, 1.0]], cb, 23))?;
    let frame = er(random_cloud(fresh.config.n_s * 2, fresh.config.d, &mut rng))?;
    let z0 = er(fresh.encode(&frame, fresh.config.n_s, fresh.config.radius, &mut rng, &frame.conditions))?;
    let z1 = er(fresh.approximate(&z0, &frame.conditions))?;
    if z0.tokens.data() != z1.tokens.data() {
        return Err("zero-initialized latent step is not the identity".to_string());
    }

    Ok(format!(
        "shapes fixed at [{}, {}]; permutation diff {perm_diff:.1e}; query diff {query_diff:.1e}; zero-init step is identity",
        cfg.n_latent, cfg.h
    ))
}

// -- Gate 3: generator residuals ---------------------------------------------------

fn gate_data_oracles(_ctx: &mut Ctx) -> GateResult {
    let start = Instant::now();
    let params = TgvParams::default();
    let t_end = (params.t_steps - 1) as f64 * params.dt;
    let times = [0.0, 0.5 * t_end, t_end];

    let momentum = tgv2d_momentum_residual_max(params.viscosity, &times, 64);
    let divergence = tgv2d_divergence_max(params.viscosity, &times, 64);
    let mut rng = suite_rng(30);
    let blobs = probe_blobs(3, &mut rng);
    let heat = diffusion_residual_max(0.05, &blobs, 100, &mut rng);
    let secs = start.elapsed().as_secs_f64();

    if momentum > TGV_MOMENTUM_RESIDUAL_TOL {
        return Err(format!("momentum residual {momentum:.3e} > {TGV_MOMENTUM_RESIDUAL_TOL:.0e}"));
    }
    if divergence > TGV_DIVERGENCE_TOL {
        return Err(format!("divergence {divergence:.3e} > {TGV_DIVERGENCE_TOL:.0e}"));
    }
    if heat > DIFFUSION_RESIDUAL_TOL {
        return Err(format!("heat residual {heat:.3e} > {DIFFUSION_RESIDUAL_TOL:.0e}"));
    }
    if secs > ORACLE_BUDGET_SECS {
        return Err(format!("took {secs:.1}s, budget {ORACLE_BUDGET_SECS}s"));
    }
    Ok(format!(
        "momentum {momentum:.1e}, divergence {divergence:.1e}, heat {heat:.1e} in {secs:.1}s"
    ))
}

// -- Gate 4: field-learning gate -----------------------------------------------------

fn gate_field_learning(ctx: &mut Ctx) -> GateResult {
    let world = ctx.diffusion()?;
    assert!(world.model.config.h <= 192, "latent width above the allowed cap");
    let ratio = world.model_mse / world.persistence_mse;
    if !(ratio <= LEARN_RATIO) {
        return Err(format!(
            "test MSE {:.4} vs persistence {:.4}: ratio {ratio:.3} > {LEARN_RATIO}",
            world.model_mse, world.persistence_mse
        ));
    }
    if world.build_secs > LEARN_BUDGET_SECS {
        return Err(format!("took {:.0}s, budget {LEARN_BUDGET_SECS}s", world.build_secs));
    }
    Ok(format!(
        "{} trajectories, {} epochs: test MSE {:.4} = {:.3}x persistence ({:.4}) in {:.0}s",
        DIFFUSION_TRAIN_TRAJS,
        world.cfg.epochs,
        world.model_mse,
        ratio,
        world.persistence_mse,
        world.build_secs
    ))
}

// -- Gate 5: particle-learning gate ------------------------------------------------

fn particle_model_config(radius: f64) -> UptConfig {
    UptConfig {
        d: 4, // two consecutive velocity pairs
        ..diffusion_model_config(radius)
    }
}

fn particle_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 16,
        warmup_epochs: 2,
        epoch_samples: Some(160),
        ..diffusion_train_config()
    }
}

fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn gate_particle_learning(_ctx: &mut Ctx) -> GateResult {
    let start = Instant::now();
    let params = TgvParams::default();
    let gen = |tag: u64, count: usize| -> upt_core::Result<Vec<Trajectory>> {
        (0..count)
            .map(|i| generate_tgv2d(&params, &mut suite_rng(tag).derive(i as u64)))
            .collect()
    };
    let train = er(gen(50, 8))?;
    let test = er(gen(51, 1))?;

    let cfg = particle_train_config();
    let pipeline = er(Pipeline::fit(TaskKind::Lagrangian, &train, cfg.delta_t_steps, false))?;
    let radius = er(calibrated_radius(&train[0].frames[0], &train[0].metadata.domain))?;
    let mut model = er(UptModel::init(
        particle_model_config(radius),
        train[0].metadata.domain.clone(),
        train[0].metadata.condition_bounds.clone(),
        cfg.seed,
    ))?;
    let dir = tempfile::tempdir().map_err(|e| format!("tempdir: {e}"))?;
    er(fit(
        &mut model,
        &pipeline,
        &train,
        &[],
        &cfg,
        FitOptions { out_dir: dir.path(), resume: None, log: true, stop_after_epochs: None },
    ))?;

    // Latent rollout from frame 1 decoded at the true particle positions of
    // frames 11, 21, ..., 121.
    let traj = &test[0];
    let stride = pipeline.delta_t;
    let first = pipeline.task.first_input();
    let t_steps = (traj.frames.len() - 1 - first) / stride; // 12
    let frame0 = er(model_frame(&pipeline, traj, first))?;
    let step_positions: Vec<Array<f64>> = (1..=t_steps)
        .map(|j| traj.frames[first + j * stride].positions.clone())
        .collect();
    let rollout = er(latent_rollout_with(
        &model,
        &frame0,
        QuerySpec::PerStep(&step_positions),
        t_steps,
        stride as f64 * traj.dt,
        &mut suite_rng(52),
    ))?;

    // Current-velocity block of the prediction, in raw units.
    let d = traj.frames[0].feature_dim();
    let pred_vel: Vec<Array<f64>> = rollout
        .frames
        .iter()
        .map(|f| take_cols(&er(pipeline.norm.denormalize(f))?, d, d).map_err(|e| format!("error: {e}")))
        .collect::<Result<_, String>>()?;
    let truth_vel: Vec<Array<f64>> =
        (1..=t_steps).map(|j| traj.frames[first + j * stride].features.clone()).collect();
    // Constant-velocity extrapolation: every particle keeps its start-frame
    // velocity forever.
    let baseline_vel: Vec<Array<f64>> =
        (0..t_steps).map(|_| traj.frames[first].features.clone()).collect();

    let model_err = er(velocity_error(&pred_vel, &truth_vel))?;
    let baseline_err = er(velocity_error(&baseline_vel, &truth_vel))?;
    let secs = start.elapsed().as_secs_f64();

    if !(model_err[STEP50_INDEX] < baseline_err[STEP50_INDEX]) {
        return Err(format!(
            "velocity error at raw step 50: model {:.4} not below constant-velocity {:.4}",
            model_err[STEP50_INDEX], baseline_err[STEP50_INDEX]
        ));
    }
    let smoothed = trailing_mean(&model_err, SMOOTH_WINDOW);
    for w in smoothed.windows(2) {
        if w[1] + TREND_SLACK < w[0] {
            return Err(format!(
                "smoothed error curve decreases ({:.5} -> {:.5}); growth trend violated",
                w[0], w[1]
            ));
        }
    }
    if secs > PARTICLE_BUDGET_SECS {
        return Err(format!("took {secs:.0}s, budget {PARTICLE_BUDGET_SECS}s"));
    }
    Ok(format!(
        "step-50 velocity error {:.4} < baseline {:.4}; smoothed curve non-decreasing over {} steps; {:.0}s",
        model_err[STEP50_INDEX],
        baseline_err[STEP50_INDEX],
        t_steps,
        secs
    ))
}

// -- Gate 6: latent vs autoregressive rollout ------------------------------------------

fn gate_latent_vs_autoregressive(ctx: &mut Ctx) -> GateResult {
    let world = ctx.diffusion()?;
    let stride = world.pipeline.delta_t;
    let time_per_step = stride as f64 * world.test[0].dt;

    let mut latent_sum = vec![0.0f64; ROLLOUT_STEPS];
    let mut auto_sum = vec![0.0f64; ROLLOUT_STEPS];
    for (ti, traj) in world.test.iter().enumerate() {
        let frame0 = er(model_frame(&world.pipeline, traj, 0))?;
        let truth: Vec<Array<f64>> = (1..=ROLLOUT_STEPS)
            .map(|j| world.pipeline.model_features(traj, j * stride))
            .collect::<upt_core::Result<_>>()
            .map_err(|e| format!("error: {e}"))?;
        let lat = er(latent_rollout(
            &world.model,
            &frame0,
            &frame0.positions,
            ROLLOUT_STEPS,
            time_per_step,
            &mut suite_rng(60).derive(ti as u64),
        ))?;
        let auto = er(autoregressive_rollout(
            &world.model,
            TaskKind::Eulerian,
            &frame0,
            ROLLOUT_STEPS,
            time_per_step,
            &mut suite_rng(61).derive(ti as u64),
        ))?;
        for (acc, m) in latent_sum.iter_mut().zip(er(mse_per_step(&lat.frames, &truth))?) {
            *acc += m;
        }
        for (acc, m) in auto_sum.iter_mut().zip(er(mse_per_step(&auto.frames, &truth))?) {
            *acc += m;
        }
    }
    let n = world.test.len() as f64;
    let mut worst_ratio = 0.0f64;
    for (step, (l, a)) in latent_sum.iter().zip(&auto_sum).enumerate() {
        let (l, a) = (l / n, a / n);
        let ratio = l / a;
        worst_ratio = worst_ratio.max(ratio);
        if !(l <= LATENT_MSE_FACTOR * a) {
            return Err(format!(
                "step {}: latent MSE {l:.4} > {LATENT_MSE_FACTOR}x autoregressive {a:.4}",
                step + 1
            ));
        }
    }

    // Wall-time comparison on a large analytic frame.
    let mut rng = suite_rng(62);
    let k = WALL_CLOCK_POINTS;
    let blobs = probe_blobs(3, &mut rng);
    let t0 = 0.0;
    let mut pos = Vec::with_capacity(k * 2);
    let mut feat = Vec::with_capacity(k);
    for _ in 0..k {
        let (x, y) = (rng.uniform(), rng.uniform());
        pos.extend_from_slice(&[x, y]);
        feat.push(diffusion_field(x, y, t0, 0.05, &blobs));
    }
    let raw = er(Array::new([k, 1], feat))?;
    let mut cond = BTreeMap::new();
    cond.insert("time".to_string(), t0);
    let frame = er(PointCloudFrame::new(
        er(Array::new([k, 2], pos))?,
        er(world.pipeline.norm.normalize(&raw))?,
        t0,
        cond,
    ))?;
    let (latent_secs, auto_secs) = er(wall_time_comparison(
        &world.model,
        TaskKind::Eulerian,
        &frame,
        &frame.positions,
        ROLLOUT_STEPS,
        time_per_step,
        &mut rng,
    ))?;
    if !(latent_secs <= WALL_CLOCK_RATIO * auto_secs) {
        return Err(format!(
            "latent {latent_secs:.2}s > {WALL_CLOCK_RATIO} x autoregressive {auto_secs:.2}s at k={k}"
        ));
    }
    Ok(format!(
        "worst per-step MSE ratio {worst_ratio:.2} (cap {LATENT_MSE_FACTOR}); wall time {latent_secs:.2}s vs {auto_secs:.2}s at k={k}"
    ))
}

// -- Gate 7: discretization robustness -------------------------------------------------

fn gate_discretization(ctx: &mut Ctx) -> GateResult {
    let world = ctx.diffusion()?;
    // Denser test data so the 1.5x cell is a true subsample as well.
    let sweep_test = er(gen_diffusion_set(4, 384, 7))?;
    let train_ns = world.cfg.n_s;
    let supernodes = [train_ns / 2, train_ns, train_ns * 2];
    let rows = er(discretization_sweep(
        &world.model,
        &world.pipeline,
        &sweep_test,
        &[0.5, 1.0, 1.5],
        &supernodes,
        256,
        256,
        &suite_rng(70),
    ))?;
    let reference = rows
        .iter()
        .find(|r| r.multiplier == 1.0 && r.n_s == train_ns)
        .ok_or_else(|| "missing reference cell".to_string())?
        .mse;
    let mut worst = 0.0f64;
    for r in &rows {
        let dev = (r.mse - reference).abs() / reference;
        worst = worst.max(dev);
        if dev > SWEEP_REL_BAND {
            return Err(format!(
                "cell ({}x, n_s={}): MSE {:.4} deviates {:.0}% from reference {:.4}",
                r.multiplier,
                r.n_s,
                r.mse,
                dev * 100.0,
                reference
            ));
        }
    }
    Ok(format!(
        "{} cells within {:.0}% of reference MSE {:.4} (worst {:.0}%)",
        rows.len(),
        SWEEP_REL_BAND * 100.0,
        reference,
        worst * 100.0
    ))
}

// -- Gate 8: robust normalization -------------------------------------------------------

/// Standard normal CDF from numerically integrating the density (Simpson's
/// rule), sharing nothing with the quantile implementation under test.
fn normal_cdf_oracle(z: f64) -> f64 {
    let n = 4000;
    let h = z / n as f64;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut integral = density(0.0) + density(z);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += w * density(i as f64 * h);
    }
    0.5 + integral * h / 3.0
}

fn quantile_oracle(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_oracle(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn gate_normalization(_ctx: &mut Ctx) -> GateResult {
    let mut rng = suite_rng(80);
    let samples: Vec<f64> = (0..NORMAL_SAMPLES).map(|_| rng.normal()).collect();
    let (mean, std) = er(robust_stats(&samples))?;
    if mean.abs() > MEAN_TOL {
        return Err(format!("robust mean {mean:.5} outside +/-{MEAN_TOL}"));
    }

    let z = er(normal_quantile(0.75))?;
    let z_oracle = quantile_oracle(0.75);
    if (z - z_oracle).abs() > QUANTILE_TOL {
        return Err(format!(
            "quartile cut {z:.8} vs integration oracle {z_oracle:.8} (diff {:.1e})",
            (z - z_oracle).abs()
        ));
    }

    let mut worst_rt = 0.0f64;
    for i in 0..200 {
        let x = 10f64.powf(i as f64 * 0.06 - 6.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        let rt = log_unscale(log_scale(x));
        worst_rt = worst_rt.max((rt - x).abs() / x.abs().max(1e-300));
        if (rt - x).abs() > LOG_ROUNDTRIP_TOL * x.abs().max(1.0) {
            return Err(format!("log-scale roundtrip of {x:.3e} off by {:.1e}", (rt - x).abs()));
        }
    }
    Ok(format!(
        "robust mean {mean:.4} (std {std:.3}); quartile z off by {:.1e}; roundtrip rel err {worst_rt:.1e}",
        (z - z_oracle).abs()
    ))
}

// -- Gate 9: bitwise reproducibility ------------------------------------------------------

fn tiny_world() -> upt_core::Result<(Vec<Trajectory>, Pipeline, TrainConfig, UptConfig)> {
    let trajs: Vec<Trajectory> = (0..6)
        .map(|i| {
            let mut rng = suite_rng(90).derive(i as u64);
            generate_diffusion2d(48, 9, 0.01, 0.05, 2, &mut rng)
        })
        .collect::<upt_core::Result<_>>()?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        peak_lr: 3e-4,
        warmup_epochs: 1,
        weight_decay: 0.05,
        seed: 3,
        n_s: 16,
        query_count: 24,
        subsample_min: 0.5,
        subsample_max: 1.0,
        loss_weights: [1.0, 1.0, 1.0],
        inverse_losses: true,
        delta_t_steps: 2,
        epoch_samples: None,
    };
    let pipeline = Pipeline::fit(TaskKind::Eulerian, &trajs[..4], cfg.delta_t_steps, false)?;
    let model_cfg = UptConfig {
        dim: 2,
        d: 1,
        h_enc: 16,
        h: 16,
        n_s: 16,
        n_latent: 8,
        radius: 60.0,
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
    Ok((trajs, pipeline, cfg, model_cfg))
}

fn gate_reproducibility(_ctx: &mut Ctx) -> GateResult {
    let (trajs, pipeline, cfg, model_cfg) = er(tiny_world())?;
    let (train, rest) = trajs.split_at(4);
    let (val, test) = rest.split_at(1);

    let run = |dir: &std::path::Path| -> Result<(UptModel, Vec<u8>), String> {
        let mut model = er(UptModel::init(
            model_cfg.clone(),
            trajs[0].metadata.domain.clone(),
            trajs[0].metadata.condition_bounds.clone(),
            cfg.seed,
        ))?;
        er(fit(
            &mut model,
            &pipeline,
            train,
            val,
            &cfg,
            FitOptions { out_dir: dir, resume: None, log: false, stop_after_epochs: None },
        ))?;
        let csv = std::fs::read(dir.join("metrics.csv")).map_err(|e| format!("read metrics: {e}"))?;
        Ok((model, csv))
    };

    let dir_a = tempfile::tempdir().map_err(|e| format!("tempdir: {e}"))?;
    let dir_b = tempfile::tempdir().map_err(|e| format!("tempdir: {e}"))?;
    let (model_a, csv_a) = run(dir_a.path())?;
    let (_, csv_b) = run(dir_b.path())?;
    if csv_a != csv_b {
        return Err("same-seed training runs wrote different metrics CSVs".to_string());
    }

    // Checkpoint write -> read -> evaluate must reproduce the MSE exactly.
    let eval_rng = suite_rng(91);
    let direct = er(one_step_mse(&model_a, &pipeline, test, cfg.n_s, 24, None, &eval_rng))?
        .ok_or_else(|| "no test plans".to_string())?;
    let ckpt = dir_a.path().join("checkpoints").join("epoch_0001.uptc");
    let (loaded, _, _) = er(UptModel::load_checkpoint(&ckpt))?;
    let reloaded = er(one_step_mse(&loaded, &pipeline, test, cfg.n_s, 24, None, &eval_rng))?
        .ok_or_else(|| "no test plans".to_string())?;
    if direct.to_bits() != reloaded.to_bits() {
        return Err(format!(
            "checkpoint roundtrip changed the eval MSE: {direct:.17} vs {reloaded:.17}"
        ));
    }
    Ok(format!(
        "metrics CSVs identical ({} bytes); checkpoint roundtrip MSE bit-equal ({direct:.6})",
        csv_a.len()
    ))
}

// -- Harness -------------------------------------------------------------------------------

const GATES: [(usize, &str, fn(&mut Ctx) -> GateResult); 9] = [
    (1, "gradient suite", gate_gradients),
    (2, "structural invariants", gate_structure),
    (3, "generator residuals", gate_data_oracles),
    (4, "field-learning gate", gate_field_learning),
    (5, "particle-learning gate", gate_particle_learning),
    (6, "latent vs autoregressive rollout", gate_latent_vs_autoregressive),
    (7, "discretization robustness", gate_discretization),
    (8, "robust normalization", gate_normalization),
    (9, "bitwise reproducibility", gate_reproducibility),
];

#[test]
fn acceptance_gates() {
    // Deterministic kernel scheduling for every gate; the wall-time
    // comparison inside gate 6 pins this on its own as well.
    set_sequential_kernels(true);
    let only: Option<Vec<usize>> = std::env::var("UPT_ACCEPTANCE_ONLY").ok().map(|s| {
        s.split(',').filter_map(|t| t.trim().parse().ok()).collect()
    });

    let mut ctx = Ctx::default();
    let mut failed = Vec::new();
    let mut skipped = Vec::new();
    for (id, name, gate) in GATES {
        if only.as_ref().is_some_and(|ids| !ids.contains(&id)) {
            println!("SKIP criterion {id}: {name}");
            skipped.push(id);
            continue;
        }
        let start = Instant::now();
        match gate(&mut ctx) {
            Ok(detail) => {
                println!(
                    "PASS criterion {id}: {name} — {detail} [{:.1}s]",
                    start.elapsed().as_secs_f64()
                );
            }
            Err(detail) => {
                println!(
                    "FAIL criterion {id}: {name} — {detail} [{:.1}s]",
                    start.elapsed().as_secs_f64()
                );
                failed.push(id);
            }
        }
    }
    assert!(
        skipped.is_empty(),
        "criteria {skipped:?} skipped via UPT_ACCEPTANCE_ONLY; unset it for a real acceptance run"
    );
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
