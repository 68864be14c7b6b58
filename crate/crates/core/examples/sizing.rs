use std::collections::BTreeMap;

use upt_core::datagen::{diffusion_field, generate_diffusion2d, probe_blobs, Trajectory};
use upt_core::geometry::PointCloudFrame;
use upt_core::model::UptModel;
use upt_core::rng::Rng;
use upt_core::rollout::{
    autoregressive_rollout, discretization_sweep, latent_rollout, model_frame, mse_per_step,
    wall_time_comparison,
};
use upt_core::tensor::Array;
use upt_core::train::{Pipeline, TaskKind};

const SUITE_SEED: u64 = 0xACCE;
fn suite_rng(tag: u64) -> Rng { Rng::seed_from(SUITE_SEED).derive(tag) }

fn gen_diffusion_set(count: usize, k: usize, tag: u64) -> upt_core::Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = suite_rng(tag).derive(i as u64);
            generate_diffusion2d(k, 201, 0.01, 0.05, 3, &mut rng)
        })
        .collect()
}

fn main() -> upt_core::Result<()> {
    let path = std::env::args().nth(1).expect("usage: sizing <diffusion checkpoint>");
    let wall_k: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2048);
    let (model, extra, _) = UptModel::load_checkpoint(std::path::Path::new(&path))?;
    let pipeline: Pipeline = serde_json::from_value(extra["pipeline"].clone()).unwrap();
    let test = gen_diffusion_set(8, 256, 3)?;

    // Gate 6 part A: latent vs autoregressive per-step MSE over the test set.
    let stride = pipeline.delta_t;
    let steps = 20usize;
    let time_per_step = stride as f64 * test[0].dt;
    let mut latent_sum = vec![0.0f64; steps];
    let mut auto_sum = vec![0.0f64; steps];
    let t_eval = std::time::Instant::now();
    for (ti, traj) in test.iter().enumerate() {
        let frame0 = model_frame(&pipeline, traj, 0)?;
        let truth: Vec<Array<f64>> =
            (1..=steps).map(|j| pipeline.model_features(traj, j * stride)).collect::<upt_core::Result<_>>()?;
        let lat = latent_rollout(&model, &frame0, &frame0.positions, steps, time_per_step, &mut suite_rng(60).derive(ti as u64))?;
        let auto = autoregressive_rollout(&model, TaskKind::Eulerian, &frame0, steps, time_per_step, &mut suite_rng(61).derive(ti as u64))?;
        for (acc, m) in latent_sum.iter_mut().zip(mse_per_step(&lat.frames, &truth)?) { *acc += m; }
        for (acc, m) in auto_sum.iter_mut().zip(mse_per_step(&auto.frames, &truth)?) { *acc += m; }
    }
    let n = test.len() as f64;
    let ratios: Vec<f64> = latent_sum.iter().zip(&auto_sum).map(|(l, a)| l / a).collect();
    println!("rollout eval took {:.1}s", t_eval.elapsed().as_secs_f64());
    println!("latent/auto MSE ratio per step: {ratios:.3?}");
    println!("latent per-step: {:.4?}", latent_sum.iter().map(|v| v / n).collect::<Vec<_>>());
    println!("auto   per-step: {:.4?}", auto_sum.iter().map(|v| v / n).collect::<Vec<_>>());

    // Gate 6 part B: wall-time at reduced k for the dry run.
    let mut rng = suite_rng(62);
    let blobs = probe_blobs(3, &mut rng);
    let t0 = 0.0;
    let (mut pos, mut feat) = (Vec::new(), Vec::new());
    for _ in 0..wall_k {
        let (x, y) = (rng.uniform(), rng.uniform());
        pos.extend_from_slice(&[x, y]);
        feat.push(diffusion_field(x, y, t0, 0.05, &blobs));
    }
    let raw = Array::new([wall_k, 1], feat)?;
    let mut cond = BTreeMap::new();
    cond.insert("time".to_string(), t0);
    let frame = PointCloudFrame::new(Array::new([wall_k, 2], pos)?, pipeline.norm.normalize(&raw)?, t0, cond)?;
    let (lat_s, auto_s) = wall_time_comparison(&model, TaskKind::Eulerian, &frame, &frame.positions, steps, time_per_step, &mut rng)?;
    println!("wall time k={wall_k}: latent {lat_s:.2}s vs auto {auto_s:.2}s (ratio {:.3})", lat_s / auto_s);

    // Gate 7: discretization sweep.
    let sweep_test = gen_diffusion_set(4, 384, 7)?;
    let t_sweep = std::time::Instant::now();
    let rows = discretization_sweep(&model, &pipeline, &sweep_test, &[0.5, 1.0, 1.5], &[32, 64, 128], 256, 256, &suite_rng(70))?;
    println!("sweep took {:.1}s", t_sweep.elapsed().as_secs_f64());
    let reference = rows.iter().find(|r| r.multiplier == 1.0 && r.n_s == 64).unwrap().mse;
    for r in &rows {
        println!("  mult {:>3} n_s {:>3}: mse {:.4} (dev {:+.0}%)", r.multiplier, r.n_s, r.mse, (r.mse - reference) / reference * 100.0);
    }
    Ok(())
}
