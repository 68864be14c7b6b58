//! Implementations of the `upt` subcommands. Each returns `CliResult<()>`;
//! usage/config mistakes surface as exit code 2, runtime failures as 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use upt_core::blocks;
use upt_core::datagen::{
    diffusion_residual_max, generate_diffusion2d, generate_tgv2d, probe_blobs, split_dataset,
    tgv2d_divergence_max, tgv2d_momentum_residual_max, write_trajectory, TgvParams, Trajectory,
    DIFFUSION_RESIDUAL_TOL, TGV_DIVERGENCE_TOL, TGV_MOMENTUM_RESIDUAL_TOL,
};
use upt_core::geometry::{calibrate_radius, rescale_positions};
use upt_core::model::{full_model_gradcheck, UptConfig, UptModel, POSITION_SCALE};
use upt_core::rng::Rng;
use upt_core::rollout::{
    autoregressive_rollout, correlation_per_step, correlation_time, discretization_sweep,
    grid_positions, latent_rollout, latent_rollout_with, model_frame, mse_per_step, sweep_csv,
    velocity_error, QuerySpec, RolloutResult,
};
use upt_core::svg::{grid_heatmap, line_chart, write_svg, Series};
use upt_core::tensor::gradcheck::{op_suite, CheckReport};
use upt_core::tensor::Array;
use upt_core::train::{
    fit, one_step_mse, training_loss_gradcheck, AdamState, FitOptions, Pipeline, ResumeState,
    TaskKind, TrainConfig, METRICS_HEADER,
};

use crate::config::{echo_config, load_run_config, EvalSection};
use crate::manifest::{
    load_split, read_manifest, write_manifest, DatasetManifest, ResidualReport,
};
use crate::{usage, CliError, CliResult};
use crate::{EvalArgs, GenDataArgs, ModeArg, PlotArgs, RolloutArgs, SweepArgs, TaskArg, TrainArgs};

// -- gen-data -----------------------------------------------------------------

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    if args.k == Some(0) {
        return Err(usage("--k must be positive"));
    }
    if args.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if args.steps == Some(0) || args.steps == Some(1) {
        return Err(usage("--steps must be at least 2 (need at least one transition)"));
    }
    let fractions = parse_splits(&args.splits)?;
    match args.task {
        TaskArg::Tgv2d => {
            if args.kappa.is_some() || args.blobs.is_some() {
                return Err(usage("--kappa/--blobs apply to diffusion2d only"));
            }
        }
        TaskArg::Diffusion2d => {
            if args.nu.is_some() {
                return Err(usage("--nu applies to tgv2d only"));
            }
        }
    }

    let base = Rng::seed_from(args.seed);
    let (manifest_task, k, steps, dt, coefficient, blobs);
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(args.count);

    // Check the governing equations of the analytic fields before writing
    // anything; a failed residual aborts generation.
    let residuals = match args.task {
        TaskArg::Tgv2d => {
            manifest_task = "tgv2d";
            k = args.k.unwrap_or(2500);
            steps = args.steps.unwrap_or(126);
            dt = args.dt.unwrap_or(0.05);
            coefficient = args.nu.unwrap_or(0.01);
            blobs = None;
            if !(coefficient > 0.0) || !(dt > 0.0) {
                return Err(usage("--nu and --dt must be positive"));
            }
            let t_end = (steps - 1) as f64 * dt;
            let times = [0.0, 0.5 * t_end, t_end];
            let momentum = tgv2d_momentum_residual_max(coefficient, &times, 64);
            let divergence = tgv2d_divergence_max(coefficient, &times, 64);
            if momentum > TGV_MOMENTUM_RESIDUAL_TOL || divergence > TGV_DIVERGENCE_TOL {
                return Err(CliError::Runtime(format!(
                    "vortex field failed the Navier-Stokes residual check \
                     (momentum {momentum:.3e} vs {TGV_MOMENTUM_RESIDUAL_TOL:.0e}, \
                     divergence {divergence:.3e} vs {TGV_DIVERGENCE_TOL:.0e}); aborting"
                )));
            }
            ResidualReport {
                momentum_residual_max: Some(momentum),
                divergence_max: Some(divergence),
                heat_residual_max: None,
            }
        }
        TaskArg::Diffusion2d => {
            manifest_task = "diffusion2d";
            k = args.k.unwrap_or(256);
            steps = args.steps.unwrap_or(201);
            dt = args.dt.unwrap_or(0.01);
            coefficient = args.kappa.unwrap_or(0.05);
            blobs = Some(args.blobs.unwrap_or(3));
            if !(coefficient > 0.0) || !(dt > 0.0) || blobs == Some(0) {
                return Err(usage("--kappa and --dt must be positive, --blobs at least 1"));
            }
            let mut probe_rng = base.derive(3);
            let probe = probe_blobs(blobs.unwrap(), &mut probe_rng);
            let heat = diffusion_residual_max(coefficient, &probe, 100, &mut probe_rng);
            if heat > DIFFUSION_RESIDUAL_TOL {
                return Err(CliError::Runtime(format!(
                    "heat field failed the diffusion residual check \
                     ({heat:.3e} vs {DIFFUSION_RESIDUAL_TOL:.0e}); aborting"
                )));
            }
            ResidualReport {
                momentum_residual_max: None,
                divergence_max: None,
                heat_residual_max: Some(heat),
            }
        }
    };

    for i in 0..args.count {
        let mut rng = base.derive(1).derive(i as u64);
        let traj = match args.task {
            TaskArg::Tgv2d => generate_tgv2d(
                &TgvParams { viscosity: coefficient, k, t_steps: steps, dt },
                &mut rng,
            )?,
            TaskArg::Diffusion2d => {
                generate_diffusion2d(k, steps, dt, coefficient, blobs.unwrap(), &mut rng)?
            }
        };
        trajectories.push(traj);
    }

    let mut split_rng = base.derive(2);
    let (train, val, test) = split_dataset(trajectories, fractions, &mut split_rng)
        .map_err(|e| usage(e.to_string()))?;

    let mut splits = BTreeMap::new();
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        fs::create_dir_all(args.out.join(name))?;
        let mut files = Vec::with_capacity(set.len());
        for (i, traj) in set.iter().enumerate() {
            let rel = format!("{name}/traj_{i:04}.uptd");
            write_trajectory(traj, &args.out.join(&rel))?;
            files.push(rel);
        }
        splits.insert(name.to_string(), files);
    }

    let manifest = DatasetManifest {
        task: manifest_task.to_string(),
        seed: args.seed,
        k,
        steps,
        dt,
        coefficient,
        blobs,
        count: args.count,
        splits,
        residuals,
    };
    write_manifest(&manifest, &args.out)?;
    println!(
        "wrote {} {} trajectories to {} (train {} / val {} / test {})",
        args.count,
        manifest_task,
        args.out.display(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

fn parse_splits(text: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(usage(format!("--splits '{text}': expected three comma-separated fractions")));
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("--splits '{text}': '{p}' is not a number")))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

// -- train --------------------------------------------------------------------

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_run_config(args.config.as_deref(), &args.sets)?;
    let manifest = read_manifest(&args.data)?;
    let task = manifest.task_kind()?;
    let train_trajs = load_split(&args.data, &manifest, "train")?;
    let val_trajs = load_split(&args.data, &manifest, "val")?;
    if train_trajs.is_empty() {
        return Err(usage(format!("dataset {} has no training split", args.data.display())));
    }

    let (mut model, pipeline, resume) = match &args.resume {
        None => {
            let resolved = resolve_model_config(&cfg.model, task, &train_trajs)?;
            let pipeline = Pipeline::fit(
                task,
                &train_trajs,
                cfg.train.delta_t_steps,
                cfg.data.log_scale,
            )?;
            let meta = &train_trajs[0].metadata;
            let model = UptModel::init(
                resolved,
                meta.domain.clone(),
                meta.condition_bounds.clone(),
                cfg.train.seed,
            )?;
            (model, pipeline, None)
        }
        Some(ckpt) => {
            let (model, extra, arrays) = UptModel::load_checkpoint(ckpt)?;
            let saved_train: TrainConfig = serde_json::from_value(extra["train_config"].clone())
                .map_err(|_| {
                    CliError::Runtime(format!(
                        "{} is not a training checkpoint (missing train_config)",
                        ckpt.display()
                    ))
                })?;
            if cfg.train != TrainConfig::default() && cfg.train != saved_train {
                return Err(usage(
                    "training config differs from the checkpoint's; resume requires the \
                     original config (or none)",
                ));
            }
            // Compare the user's model section after filling the
            // data-determined fields, mirroring what a fresh run would do.
            let mut user_model = cfg.model.clone();
            user_model.dim = model.config.dim;
            user_model.d = model.config.d;
            if user_model.radius <= 0.0 {
                user_model.radius = model.config.radius;
            }
            if cfg.model != UptConfig::default() && user_model != model.config {
                return Err(usage(
                    "model config differs from the checkpoint's; the architecture cannot \
                     change on resume",
                ));
            }
            cfg.train = saved_train;
            let pipeline: Pipeline = serde_json::from_value(extra["pipeline"].clone())
                .map_err(|_| {
                    CliError::Runtime(format!(
                        "{} is not a training checkpoint (missing pipeline)",
                        ckpt.display()
                    ))
                })?;
            let next_epoch = extra["epoch"]
                .as_u64()
                .ok_or_else(|| CliError::Runtime("checkpoint missing epoch".into()))?
                as usize
                + 1;
            let adam_t = extra["adam_t"]
                .as_u64()
                .ok_or_else(|| CliError::Runtime("checkpoint missing adam_t".into()))?;
            let adam = AdamState::from_arrays(model.params(), &arrays, adam_t)?;
            (model, pipeline, Some(ResumeState { next_epoch, adam }))
        }
    };

    cfg.model = model.config.clone();
    fs::create_dir_all(&args.out)?;
    echo_config(&cfg, &args.out)?;

    let report = fit(
        &mut model,
        &pipeline,
        &train_trajs,
        &val_trajs,
        &cfg.train,
        FitOptions {
            out_dir: &args.out,
            resume,
            log: !args.quiet,
            stop_after_epochs: args.stop_after,
        },
    )?;

    let metrics = parse_metrics(&args.out.join("metrics.csv"))?;
    render_metrics_plots(&metrics, &args.out.join("plots"))?;

    match (report.best_epoch, report.best_val_mse) {
        (Some(e), Some(v)) => println!("best epoch {e} val_mse {v}"),
        _ => println!("training finished (no validation split)"),
    }
    Ok(())
}

/// Fills the data-determined model fields: spatial dim and feature width
/// come from the dataset/task, and radius <= 0 requests auto-calibration
/// against a mean neighborhood of ~24 points.
fn resolve_model_config(
    base: &UptConfig,
    task: TaskKind,
    trajs: &[Trajectory],
) -> CliResult<UptConfig> {
    let first = &trajs[0].frames[0];
    let mut resolved = base.clone();
    resolved.dim = first.dim();
    resolved.d = task.model_feature_dim(first.feature_dim());
    if resolved.radius <= 0.0 {
        let meta = &trajs[0].metadata;
        let bounds: Vec<(f64, f64)> = meta.domain.iter().map(|b| (b[0], b[1])).collect();
        let frame = &trajs[0].frames[task.first_input()];
        let scaled = rescale_positions(&frame.positions, &bounds, POSITION_SCALE)?;
        let k = scaled.rows();
        let target = 24.0_f64.min((k as f64 - 1.0) * 0.5).max(1.0);
        resolved.radius = calibrate_radius(&scaled, target)?;
        eprintln!("auto radius {:.3} (target degree {target:.1})", resolved.radius);
    }
    Ok(resolved)
}

// -- checkpoint loading shared by eval/rollout/sweep ---------------------------

struct TrainedModel {
    model: UptModel,
    pipeline: Pipeline,
    train_config: TrainConfig,
}

fn load_trained(path: &Path) -> CliResult<TrainedModel> {
    let (model, extra, _) = UptModel::load_checkpoint(path)?;
    let pipeline: Pipeline = serde_json::from_value(extra["pipeline"].clone()).map_err(|_| {
        CliError::Runtime(format!(
            "{} is not a training checkpoint (missing pipeline)",
            path.display()
        ))
    })?;
    let train_config: TrainConfig = serde_json::from_value(extra["train_config"].clone())
        .map_err(|_| {
            CliError::Runtime(format!(
                "{} is not a training checkpoint (missing train_config)",
                path.display()
            ))
        })?;
    Ok(TrainedModel { model, pipeline, train_config })
}

/// Ground truth for a rollout starting at the first valid input frame:
/// per-step reference features (normalized model space) and the query
/// positions where each step is decoded.
struct RolloutTarget {
    frame0: upt_core::geometry::PointCloudFrame,
    truth: Vec<Array<f64>>,
    queries: OwnedQueries,
    t_steps: usize,
    time_per_step: f64,
}

enum OwnedQueries {
    Fixed(Array<f64>),
    PerStep(Vec<Array<f64>>),
}

impl OwnedQueries {
    fn spec(&self) -> QuerySpec<'_> {
        match self {
            OwnedQueries::Fixed(q) => QuerySpec::Fixed(q),
            OwnedQueries::PerStep(qs) => QuerySpec::PerStep(qs),
        }
    }
}

fn rollout_target(
    pipeline: &Pipeline,
    task: TaskKind,
    traj: &Trajectory,
    requested_steps: usize,
) -> CliResult<RolloutTarget> {
    let first = task.first_input();
    let stride = pipeline.delta_t;
    let frames = traj.num_frames();
    if frames <= first + stride {
        return Err(CliError::Runtime(format!(
            "trajectory too short for one step: {frames} frames, input at {first}, stride {stride}"
        )));
    }
    let available = (frames - 1 - first) / stride;
    let t_steps = requested_steps.min(available);
    if t_steps < requested_steps {
        eprintln!("note: clamped rollout to {t_steps} steps ({frames} frames available)");
    }
    let frame0 = model_frame(pipeline, traj, first)?;
    let mut truth = Vec::with_capacity(t_steps);
    let mut positions = Vec::with_capacity(t_steps);
    for i in 1..=t_steps {
        let fi = first + i * stride;
        truth.push(pipeline.model_features(traj, fi)?);
        positions.push(traj.frames[fi].positions.clone());
    }
    let queries = match task {
        TaskKind::Eulerian => OwnedQueries::Fixed(traj.frames[first].positions.clone()),
        TaskKind::Lagrangian => OwnedQueries::PerStep(positions),
    };
    Ok(RolloutTarget {
        frame0,
        truth,
        queries,
        t_steps,
        time_per_step: stride as f64 * traj.dt,
    })
}

fn pick_traj<'a>(trajs: &'a [Trajectory], index: usize, split: &str) -> CliResult<&'a Trajectory> {
    trajs.get(index).ok_or_else(|| {
        usage(format!("--traj {index} out of range: split '{split}' has {} trajectories", trajs.len()))
    })
}

// -- eval ---------------------------------------------------------------------

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let eval_cfg: EvalSection = load_run_config(None, &args.sets)?.eval;
    let trained = load_trained(&args.checkpoint)?;
    let manifest = read_manifest(&args.data)?;
    let task = manifest.task_kind()?;
    let trajs = load_split(&args.data, &manifest, &args.split)?;
    if trajs.is_empty() {
        return Err(usage(format!("split '{}' has no trajectories", args.split)));
    }
    let tc = &trained.train_config;

    let mse = one_step_mse(
        &trained.model,
        &trained.pipeline,
        &trajs,
        tc.n_s,
        tc.query_count,
        None,
        &Rng::seed_from(tc.seed).derive(4),
    )?
    .ok_or_else(|| CliError::Runtime("split has no usable frame pairs".into()))?;

    let traj = pick_traj(&trajs, args.traj, &args.split)?;
    let target = rollout_target(&trained.pipeline, task, traj, eval_cfg.rollout_steps)?;
    let result = latent_rollout_with(
        &trained.model,
        &target.frame0,
        target.queries.spec(),
        target.t_steps,
        target.time_per_step,
        &mut Rng::seed_from(tc.seed).derive(5),
    )?;
    let corr_time = correlation_time(
        &result.frames,
        &target.truth,
        eval_cfg.correlation_threshold,
        eval_cfg.correlation_channel,
    )?;

    let out_dir = args.out.clone().unwrap_or_else(|| ".".into());
    fs::create_dir_all(&out_dir)?;
    let doc = serde_json::json!({
        "split": args.split,
        "test_mse": mse,
        "correlation_time": corr_time,
        "correlation_threshold": eval_cfg.correlation_threshold,
        "rollout_steps": target.t_steps,
        "traj": args.traj,
    });
    fs::write(out_dir.join("eval.json"), serde_json::to_string_pretty(&doc).unwrap() + "\n")?;
    println!(
        "test_mse={mse} correlation_time={corr_time}/{} (threshold {})",
        target.t_steps, eval_cfg.correlation_threshold
    );
    Ok(())
}

// -- rollout ------------------------------------------------------------------

pub fn rollout(args: &RolloutArgs) -> CliResult<()> {
    let trained = load_trained(&args.checkpoint)?;
    let manifest = read_manifest(&args.data)?;
    let task = manifest.task_kind()?;
    let trajs = load_split(&args.data, &manifest, &args.split)?;
    if trajs.is_empty() {
        return Err(usage(format!("split '{}' has no trajectories", args.split)));
    }
    let traj = pick_traj(&trajs, args.traj, &args.split)?;
    let mut modes = args.modes.clone();
    if modes.is_empty() {
        modes.push(ModeArg::Latent);
    }
    modes.dedup();
    let tc = &trained.train_config;
    fs::create_dir_all(args.out.join("plots"))?;

    if let Some(n) = args.grid {
        if n < 2 {
            return Err(usage("--grid needs at least 2 points per axis"));
        }
        if modes != vec![ModeArg::Latent] {
            return Err(usage("--grid decoding is latent-only (fixed off-data queries)"));
        }
        return rollout_grid(args, &trained, task, traj, n);
    }

    let target = rollout_target(&trained.pipeline, task, traj, args.steps)?;
    let mut csv = String::from("mode,step,mse,l2_denorm,correlation\n");
    let mut series = Vec::new();
    for mode in &modes {
        let result: RolloutResult = match mode {
            ModeArg::Latent => latent_rollout_with(
                &trained.model,
                &target.frame0,
                target.queries.spec(),
                target.t_steps,
                target.time_per_step,
                &mut Rng::seed_from(tc.seed).derive(5),
            )?,
            ModeArg::Autoregressive => autoregressive_rollout(
                &trained.model,
                task,
                &target.frame0,
                target.t_steps,
                target.time_per_step,
                &mut Rng::seed_from(tc.seed).derive(5),
            )?,
        };
        let name = mode_name(*mode);
        let mse = mse_per_step(&result.frames, &target.truth)?;
        let denorm_pred: Vec<Array<f64>> = result
            .frames
            .iter()
            .map(|f| trained.pipeline.norm.denormalize(f))
            .collect::<upt_core::Result<_>>()?;
        let denorm_truth: Vec<Array<f64>> = target
            .truth
            .iter()
            .map(|f| trained.pipeline.norm.denormalize(f))
            .collect::<upt_core::Result<_>>()?;
        let l2 = velocity_error(&denorm_pred, &denorm_truth)?;
        let corr = correlation_per_step(&result.frames, &target.truth, None)?;
        for i in 0..target.t_steps {
            csv.push_str(&format!("{name},{},{},{},{}\n", i + 1, mse[i], l2[i], corr[i]));
        }
        series.push(Series {
            name: name.to_string(),
            points: mse.iter().enumerate().map(|(i, &m)| ((i + 1) as f64, m)).collect(),
        });
        eprintln!("{name}: {} steps in {:.2}s", target.t_steps, result.wall_time_secs);
    }
    fs::write(args.out.join("rollout.csv"), &csv)?;
    let chart = line_chart("Rollout error", "step", "mse", &series);
    write_svg(&args.out.join("plots").join("rollout.svg"), &chart)?;
    println!(
        "rollout: {} steps, modes [{}] -> {}",
        target.t_steps,
        modes.iter().map(|m| mode_name(*m)).collect::<Vec<_>>().join(", "),
        args.out.display()
    );
    Ok(())
}

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Latent => "latent",
        ModeArg::Autoregressive => "autoregressive",
    }
}

/// Latent rollout decoded on an n x n grid over the data domain; per-step
/// channel-0 summary CSV plus a heatmap of the final predicted field.
fn rollout_grid(
    args: &RolloutArgs,
    trained: &TrainedModel,
    task: TaskKind,
    traj: &Trajectory,
    n: usize,
) -> CliResult<()> {
    let target = rollout_target(&trained.pipeline, task, traj, args.steps)?;
    let queries = grid_positions(&traj.metadata.domain, n)?;
    let result = latent_rollout(
        &trained.model,
        &target.frame0,
        &queries,
        target.t_steps,
        target.time_per_step,
        &mut Rng::seed_from(trained.train_config.seed).derive(5),
    )?;
    let mut csv = String::from("step,ch0_min,ch0_mean,ch0_max\n");
    let mut last_field: Vec<f64> = Vec::new();
    for (i, frame) in result.frames.iter().enumerate() {
        let denorm = trained.pipeline.norm.denormalize(frame)?;
        let col: Vec<f64> = (0..denorm.rows()).map(|r| denorm.at2(r, 0)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        csv.push_str(&format!("{},{lo},{mean},{hi}\n", i + 1));
        if i + 1 == result.frames.len() {
            last_field = col;
        }
    }
    fs::write(args.out.join("rollout.csv"), &csv)?;
    if !last_field.is_empty() {
        let title = format!("Predicted field, step {} ({}x{} grid)", target.t_steps, n, n);
        let heat = grid_heatmap(&title, n, &last_field);
        write_svg(&args.out.join("plots").join("rollout_grid.svg"), &heat)?;
    }
    println!(
        "grid rollout: {} steps on a {n}x{n} grid -> {}",
        target.t_steps,
        args.out.display()
    );
    Ok(())
}

// -- sweep --------------------------------------------------------------------

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let trained = load_trained(&args.checkpoint)?;
    let manifest = read_manifest(&args.data)?;
    let trajs = load_split(&args.data, &manifest, &args.split)?;
    if trajs.is_empty() {
        return Err(usage(format!("split '{}' has no trajectories", args.split)));
    }
    let tc = &trained.train_config;

    let multipliers = parse_f64_list(&args.multipliers, "--multipliers")?;
    let supernodes = match &args.supernodes {
        Some(text) => parse_usize_list(text, "--supernodes")?,
        None => {
            let mut v = vec![(tc.n_s / 2).max(1), tc.n_s, tc.n_s * 2];
            v.dedup();
            v
        }
    };
    let base_k = args.base_k.unwrap_or_else(|| trajs[0].frames[0].num_points());
    let query_count = args.query_count.unwrap_or(tc.query_count);

    let rows = discretization_sweep(
        &trained.model,
        &trained.pipeline,
        &trajs,
        &multipliers,
        &supernodes,
        base_k,
        query_count,
        &Rng::seed_from(tc.seed).derive(6),
    )?;

    fs::create_dir_all(args.out.join("plots"))?;
    fs::write(args.out.join("sweep.csv"), sweep_csv(&rows))?;
    let series: Vec<Series> = supernodes
        .iter()
        .map(|&n_s| Series {
            name: format!("n_s={n_s}"),
            points: rows
                .iter()
                .filter(|r| r.n_s == n_s)
                .map(|r| (r.multiplier, r.mse))
                .collect(),
        })
        .collect();
    let chart = line_chart("Discretization sweep", "input multiplier", "one-step mse", &series);
    write_svg(&args.out.join("plots").join("sweep.svg"), &chart)?;

    // Deviation summary relative to the (1.0x, training n_s) cell when present.
    if let Some(base) = rows
        .iter()
        .find(|r| r.multiplier == 1.0 && r.n_s == tc.n_s)
        .map(|r| r.mse)
    {
        let worst = rows
            .iter()
            .map(|r| (r.mse - base).abs() / base)
            .fold(0.0f64, f64::max);
        println!("sweep: {} cells, max relative deviation {worst:.3} from the 1.0x cell", rows.len());
    } else {
        println!("sweep: {} cells", rows.len());
    }
    Ok(())
}

fn parse_f64_list(text: &str, flag: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{flag} '{text}': '{p}' is not a number")))
        })
        .collect()
}

fn parse_usize_list(text: &str, flag: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("{flag} '{text}': '{p}' is not a count")))
        })
        .collect()
}

// -- gradcheck ------------------------------------------------------------------

pub fn gradcheck() -> CliResult<()> {
    let mut reports: Vec<CheckReport> = op_suite()?;
    reports.extend(blocks::gradcheck_suite()?);
    reports.push(full_model_gradcheck()?);
    reports.push(training_loss_gradcheck()?);

    let mut failures = 0usize;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status}  {:<40} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tol);
        if !r.passed() {
            failures += 1;
        }
    }
    println!("{} checks, {} failed", reports.len(), failures);
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

// -- plot -----------------------------------------------------------------------

pub struct Metrics {
    /// (epoch, step, lr, total, next, inv_dec, inv_enc)
    pub steps: Vec<(usize, usize, f64, f64, f64, f64, f64)>,
    /// (epoch, val_mse)
    pub vals: Vec<(usize, f64)>,
}

/// Parses a training metrics CSV, reporting the 1-based line number of the
/// first malformed row as a usage error.
pub fn parse_metrics(path: &Path) -> CliResult<Metrics> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read metrics {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(usage(format!(
                "line 1: expected header '{METRICS_HEADER}', found '{header}'"
            )))
        }
        None => return Err(usage("line 1: file is empty".to_string())),
    }

    let mut metrics = Metrics { steps: Vec::new(), vals: Vec::new() };
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(usage(format!(
                "line {line_no}: expected 8 comma-separated fields, found {}",
                fields.len()
            )));
        }
        let num = |i: usize, name: &str| -> CliResult<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| usage(format!("line {line_no}: bad {name} '{}'", fields[i])))
        };
        let epoch = fields[0]
            .parse::<usize>()
            .map_err(|_| usage(format!("line {line_no}: bad epoch '{}'", fields[0])))?;
        if fields[1].is_empty() {
            // Per-epoch validation row; val_mse may be empty when there is
            // no validation split.
            if !fields[7].is_empty() {
                metrics.vals.push((epoch, num(7, "val_mse")?));
            }
        } else {
            let step = fields[1]
                .parse::<usize>()
                .map_err(|_| usage(format!("line {line_no}: bad step '{}'", fields[1])))?;
            metrics.steps.push((
                epoch,
                step,
                num(2, "lr")?,
                num(3, "loss_total")?,
                num(4, "loss_next")?,
                num(5, "loss_inv_dec")?,
                num(6, "loss_inv_enc")?,
            ));
        }
    }
    Ok(metrics)
}

pub fn render_metrics_plots(metrics: &Metrics, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let pick = |f: fn(&(usize, usize, f64, f64, f64, f64, f64)) -> f64, name: &str| Series {
        name: name.to_string(),
        points: metrics.steps.iter().map(|row| (row.1 as f64, f(row))).collect(),
    };
    let loss_chart = line_chart(
        "Training loss",
        "step",
        "loss",
        &[
            pick(|r| r.3, "total"),
            pick(|r| r.4, "next"),
            pick(|r| r.5, "inv_dec"),
            pick(|r| r.6, "inv_enc"),
        ],
    );
    write_svg(&dir.join("metrics.svg"), &loss_chart)?;
    if !metrics.vals.is_empty() {
        let val_chart = line_chart(
            "Validation",
            "epoch",
            "one-step mse",
            &[Series {
                name: "val_mse".to_string(),
                points: metrics.vals.iter().map(|&(e, v)| (e as f64, v)).collect(),
            }],
        );
        write_svg(&dir.join("val_mse.svg"), &val_chart)?;
    }
    Ok(())
}

pub fn plot(args: &PlotArgs) -> CliResult<()> {
    let metrics = parse_metrics(&args.metrics)?;
    render_metrics_plots(&metrics, &args.out)?;
    println!(
        "plotted {} step rows and {} validation rows to {}",
        metrics.steps.len(),
        metrics.vals.len(),
        args.out.display()
    );
    Ok(())
}
