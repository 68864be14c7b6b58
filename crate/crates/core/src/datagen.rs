//! Analytic dataset generators and the trajectory file format.
//!
//! Two generators, both with exact closed-form ground truth:
//! - a 2D Taylor-Green vortex whose velocity field decays as exp(-2νt);
//!   tracer particles are advected through it with RK4 and carry the local
//!   velocity as their feature vector (Lagrangian data),
//! - a sum of spreading Gaussian heat blobs sampled at fixed irregular
//!   points (Eulerian data, one scalar channel).
//!
//! The test suite checks the governing equations directly: Navier-Stokes
//! momentum residual and divergence for the vortex, the heat equation and
//! mass conservation for the blobs, and step-refinement for the integrator.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, ContainerData, TRAJECTORY_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::PointCloudFrame;
use crate::rng::Rng;
use crate::tensor::Array;

/// Provenance and rescaling info carried alongside the frames.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryMeta {
    pub generator: String,
    /// Viscosity for the vortex generator, diffusivity for the blob generator.
    pub coefficient: f64,
    /// Per-dimension position bounds of the simulation domain.
    pub domain: Vec<[f64; 2]>,
    /// Rescale bounds for each condition scalar.
    pub condition_bounds: BTreeMap<String, [f64; 2]>,
    pub seed: u64,
}

/// An ordered sequence of frames with uniform time spacing.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub frames: Vec<PointCloudFrame>,
    pub dt: f64,
    pub metadata: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(frames: Vec<PointCloudFrame>, dt: f64, metadata: TrajectoryMeta) -> Result<Self> {
        let traj = Self { frames, dt, metadata };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::InvalidArg("trajectory has no frames".into()))?;
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArg(format!("non-positive dt {}", self.dt)));
        }
        let (k, dim, d) = (first.num_points(), first.dim(), first.feature_dim());
        for (i, f) in self.frames.iter().enumerate() {
            if f.num_points() != k || f.dim() != dim || f.feature_dim() != d {
                return Err(Error::InvalidArg(format!("frame {i} has inconsistent shape")));
            }
            let expect = first.time + i as f64 * self.dt;
            if (f.time - expect).abs() > 1e-9 * expect.abs().max(1.0) {
                return Err(Error::InvalidArg(format!(
                    "frame {i} at t={} breaks uniform spacing (expected {expect})",
                    f.time
                )));
            }
            if !f.positions.all_finite() || !f.features.all_finite() {
                return Err(Error::InvalidArg(format!("frame {i} contains non-finite values")));
            }
        }
        if self.metadata.domain.len() != dim {
            return Err(Error::InvalidArg("metadata domain dim mismatch".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

// ---------------------------------------------------------------------------
// Taylor-Green vortex.

/// Decaying vortex lattice on [0, 2π]²: u = cos x sin y F(t),
/// v = -sin x cos y F(t), F(t) = exp(-2νt). Divergence-free for all t.
pub fn tgv2d_velocity(x: f64, y: f64, t: f64, nu: f64) -> (f64, f64) {
    let f = (-2.0 * nu * t).exp();
    (x.cos() * y.sin() * f, -x.sin() * y.cos() * f)
}

/// Pressure completing the Navier-Stokes solution (density 1):
/// p = -¼ (cos 2x + cos 2y) F(t)².
pub fn tgv2d_pressure(x: f64, y: f64, t: f64, nu: f64) -> f64 {
    let f = (-2.0 * nu * t).exp();
    -0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * f * f
}

/// One classical RK4 step of a tracer through the time-dependent field.
pub fn advect_rk4(x: f64, y: f64, t: f64, dt: f64, nu: f64) -> (f64, f64) {
    let (k1x, k1y) = tgv2d_velocity(x, y, t, nu);
    let (k2x, k2y) = tgv2d_velocity(x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, t + 0.5 * dt, nu);
    let (k3x, k3y) = tgv2d_velocity(x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, t + 0.5 * dt, nu);
    let (k4x, k4y) = tgv2d_velocity(x + dt * k3x, y + dt * k3y, t + dt, nu);
    (
        x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TgvParams {
    pub viscosity: f64,
    /// Particle count.
    pub k: usize,
    /// Number of frames (so t_steps - 1 integration steps).
    pub t_steps: usize,
    pub dt: f64,
}

impl Default for TgvParams {
    fn default() -> Self {
        Self { viscosity: 0.01, k: 2500, t_steps: 126, dt: 0.05 }
    }
}

/// Tracer-particle trajectory through the vortex: per-frame features are the
/// two velocity components at each particle, positions wrap periodically.
pub fn generate_tgv2d(params: &TgvParams, rng: &mut Rng) -> Result<Trajectory> {
    if !(params.viscosity > 0.0) || params.k == 0 || params.t_steps < 2 || !(params.dt > 0.0) {
        return Err(Error::InvalidArg(format!("bad vortex params {params:?}")));
    }
    let seed = rng.seed();
    let (k, nu, dt) = (params.k, params.viscosity, params.dt);
    let mut xs: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.0, TAU)).collect();
    let mut ys: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.0, TAU)).collect();

    let t_end = (params.t_steps - 1) as f64 * dt;
    let mut conditions = BTreeMap::new();
    let mut frames = Vec::with_capacity(params.t_steps);
    for i in 0..params.t_steps {
        let t = i as f64 * dt;
        let mut pos = Vec::with_capacity(k * 2);
        let mut feat = Vec::with_capacity(k * 2);
        for p in 0..k {
            let (u, v) = tgv2d_velocity(xs[p], ys[p], t, nu);
            pos.extend_from_slice(&[xs[p], ys[p]]);
            feat.extend_from_slice(&[u, v]);
        }
        conditions.insert("time".to_string(), t);
        frames.push(PointCloudFrame::new(
            Array::new([k, 2], pos)?,
            Array::new([k, 2], feat)?,
            t,
            conditions.clone(),
        )?);
        for p in 0..k {
            let (nx, ny) = advect_rk4(xs[p], ys[p], t, dt, nu);
            xs[p] = nx.rem_euclid(TAU);
            ys[p] = ny.rem_euclid(TAU);
        }
    }
    let mut condition_bounds = BTreeMap::new();
    condition_bounds.insert("time".to_string(), [0.0, t_end]);
    Trajectory::new(
        frames,
        dt,
        TrajectoryMeta {
            generator: "tgv2d".to_string(),
            coefficient: nu,
            domain: vec![[0.0, TAU], [0.0, TAU]],
            condition_bounds,
            seed,
        },
    )
}

// ---------------------------------------------------------------------------
// Diffusing Gaussian blobs.

#[derive(Clone, Debug)]
pub struct Blob {
    pub center: [f64; 2],
    /// Time offset so the field is finite at t = 0.
    pub t0: f64,
    pub amplitude: f64,
}

/// Superposition of free-space heat kernels:
/// s(x, t) = Σⱼ aⱼ / (4πκ(t+t₀ⱼ)) · exp(-‖x-cⱼ‖² / (4κ(t+t₀ⱼ))).
/// Each term integrates to aⱼ over the plane for every t.
pub fn diffusion_field(x: f64, y: f64, t: f64, kappa: f64, blobs: &[Blob]) -> f64 {
    blobs
        .iter()
        .map(|b| {
            let tau = 4.0 * kappa * (t + b.t0);
            let r2 = (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2);
            b.amplitude / (PI * tau) * (-r2 / tau).exp()
        })
        .sum()
}

/// Irregular but well-spread sample sites in the unit square: rejection
/// sampling against a minimum separation of 0.5/√k, falling back to the
/// most isolated of the rejected candidates if a slot stays contested.
fn scattered_points(k: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    let r2_min = 0.25 / k as f64;
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(k);
    while pts.len() < k {
        let mut best = ([0.0, 0.0], -1.0);
        let mut accepted = false;
        for _ in 0..200 {
            let cand = [rng.uniform(), rng.uniform()];
            let d2 = pts
                .iter()
                .map(|p| (p[0] - cand[0]).powi(2) + (p[1] - cand[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            if d2 >= r2_min {
                pts.push(cand);
                accepted = true;
                break;
            }
            if d2 > best.1 {
                best = (cand, d2);
            }
        }
        if !accepted {
            pts.push(best.0);
        }
    }
    pts
}

/// Scalar diffusion trajectory: blob parameters are drawn fresh per call, so
/// a model cannot memorize the field and must read it off the input frame.
pub fn generate_diffusion2d(
    k: usize,
    t_steps: usize,
    dt: f64,
    kappa: f64,
    n_blobs: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if !(kappa > 0.0) || k == 0 || t_steps < 2 || !(dt > 0.0) || n_blobs == 0 {
        return Err(Error::InvalidArg(format!(
            "bad diffusion params k={k} t_steps={t_steps} dt={dt} kappa={kappa} n_blobs={n_blobs}"
        )));
    }
    let seed = rng.seed();
    let points = scattered_points(k, rng);
    let blobs = probe_blobs(n_blobs, rng);

    let pos_flat: Vec<f64> = points.iter().flatten().copied().collect();
    let t_end = (t_steps - 1) as f64 * dt;
    let mut frames = Vec::with_capacity(t_steps);
    let mut conditions = BTreeMap::new();
    for i in 0..t_steps {
        let t = i as f64 * dt;
        let feat: Vec<f64> =
            points.iter().map(|p| diffusion_field(p[0], p[1], t, kappa, &blobs)).collect();
        conditions.insert("time".to_string(), t);
        frames.push(PointCloudFrame::new(
            Array::new([k, 2], pos_flat.clone())?,
            Array::new([k, 1], feat)?,
            t,
            conditions.clone(),
        )?);
    }
    let mut condition_bounds = BTreeMap::new();
    condition_bounds.insert("time".to_string(), [0.0, t_end]);
    Trajectory::new(
        frames,
        dt,
        TrajectoryMeta {
            generator: "diffusion2d".to_string(),
            coefficient: kappa,
            domain: vec![[0.0, 1.0], [0.0, 1.0]],
            condition_bounds,
            seed,
        },
    )
}

// ---------------------------------------------------------------------------
// Trajectory files.

#[derive(Serialize, Deserialize)]
struct FileHeader {
    dt: f64,
    frame_count: usize,
    points: usize,
    dim: usize,
    feature_dim: usize,
    condition_names: Vec<String>,
    meta: TrajectoryMeta,
}

/// Writes the shared sectioned binary format (bit-exact float round-trip).
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    traj.validate()?;
    let first = &traj.frames[0];
    let (t_steps, k, dim, d) =
        (traj.frames.len(), first.num_points(), first.dim(), first.feature_dim());

    let condition_names: Vec<String> = first.conditions.keys().cloned().collect();
    let mut positions = Vec::with_capacity(t_steps * k * dim);
    let mut features = Vec::with_capacity(t_steps * k * d);
    let mut times = Vec::with_capacity(t_steps);
    let mut cond_values: Vec<Vec<f64>> = vec![Vec::with_capacity(t_steps); condition_names.len()];
    for (i, f) in traj.frames.iter().enumerate() {
        let keys: Vec<&String> = f.conditions.keys().collect();
        if keys.len() != condition_names.len()
            || keys.iter().zip(&condition_names).any(|(a, b)| *a != b)
        {
            return Err(Error::InvalidArg(format!("frame {i} has different condition names")));
        }
        positions.extend_from_slice(f.positions.data());
        features.extend_from_slice(f.features.data());
        times.push(f.time);
        for (slot, name) in condition_names.iter().enumerate() {
            cond_values[slot].push(f.conditions[name]);
        }
    }

    let header = FileHeader {
        dt: traj.dt,
        frame_count: t_steps,
        points: k,
        dim,
        feature_dim: d,
        condition_names: condition_names.clone(),
        meta: traj.metadata.clone(),
    };
    let mut arrays = vec![
        ("positions".to_string(), Array::new(vec![t_steps, k, dim], positions)?),
        ("features".to_string(), Array::new(vec![t_steps, k, d], features)?),
        ("times".to_string(), Array::new(vec![t_steps], times)?),
    ];
    for (name, values) in condition_names.iter().zip(cond_values) {
        arrays.push((format!("cond:{name}"), Array::new(vec![t_steps], values)?));
    }
    write_container(path, TRAJECTORY_MAGIC, &serde_json::to_string(&header)?, &arrays)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let data: ContainerData = read_container(path, TRAJECTORY_MAGIC)?;
    let header: FileHeader = serde_json::from_str(&data.meta)?;
    let (t_steps, k, dim, d) = (header.frame_count, header.points, header.dim, header.feature_dim);

    let positions = data.array("positions")?;
    let features = data.array("features")?;
    let times = data.array("times")?;
    if positions.shape() != [t_steps, k, dim]
        || features.shape() != [t_steps, k, d]
        || times.shape() != [t_steps]
    {
        return Err(Error::Corrupt("array shapes disagree with header".into()));
    }
    let mut cond_arrays = Vec::new();
    for name in &header.condition_names {
        let a = data.array(&format!("cond:{name}"))?;
        if a.shape() != [t_steps] {
            return Err(Error::Corrupt(format!("condition '{name}' has wrong shape")));
        }
        cond_arrays.push(a);
    }

    let mut frames = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let pos = positions.data()[i * k * dim..(i + 1) * k * dim].to_vec();
        let feat = features.data()[i * k * d..(i + 1) * k * d].to_vec();
        let mut conditions = BTreeMap::new();
        for (name, arr) in header.condition_names.iter().zip(&cond_arrays) {
            conditions.insert(name.clone(), arr.data()[i]);
        }
        frames.push(PointCloudFrame::new(
            Array::new([k, dim], pos)?,
            Array::new([k, d], feat)?,
            times.data()[i],
            conditions,
        )?);
    }
    Trajectory::new(frames, header.dt, header.meta)
}

// ---------------------------------------------------------------------------
// Governing-equation residual checks. Residuals are measured with small-step
// finite differences directly on the closed forms, so they are independent of
// any generator plumbing. Generation pipelines run these before trusting a
// dataset; the test suite pins their thresholds.

/// Acceptance threshold for the vortex momentum residual.
pub const TGV_MOMENTUM_RESIDUAL_TOL: f64 = 1e-4;
/// Acceptance threshold for the vortex velocity divergence.
pub const TGV_DIVERGENCE_TOL: f64 = 1e-6;
/// Acceptance threshold for the heat-equation residual of the blob field.
pub const DIFFUSION_RESIDUAL_TOL: f64 = 1e-5;

/// Worst momentum residual of incompressible Navier-Stokes (density 1, no
/// forcing), ∂v/∂t + (v·∇)v + ∇p − ν∇²v, over an n×n grid at the given times.
pub fn tgv2d_momentum_residual_max(nu: f64, times: &[f64], grid_n: usize) -> f64 {
    let d = 1e-4;
    let uf = |x: f64, y: f64, t: f64| tgv2d_velocity(x, y, t, nu).0;
    let vf = |x: f64, y: f64, t: f64| tgv2d_velocity(x, y, t, nu).1;
    let pf = |x: f64, y: f64, t: f64| tgv2d_pressure(x, y, t, nu);
    let mut worst = 0.0f64;
    for &t in times {
        for i in 0..grid_n {
            for j in 0..grid_n {
                let x = i as f64 / grid_n as f64 * TAU;
                let y = j as f64 / grid_n as f64 * TAU;
                let (u, v) = tgv2d_velocity(x, y, t, nu);
                let fd = |f: &dyn Fn(f64, f64, f64) -> f64, which: usize| -> f64 {
                    match which {
                        0 => (f(x + d, y, t) - f(x - d, y, t)) / (2.0 * d),
                        1 => (f(x, y + d, t) - f(x, y - d, t)) / (2.0 * d),
                        _ => (f(x, y, t + d) - f(x, y, t - d)) / (2.0 * d),
                    }
                };
                let lap = |f: &dyn Fn(f64, f64, f64) -> f64| -> f64 {
                    (f(x + d, y, t) + f(x - d, y, t) + f(x, y + d, t) + f(x, y - d, t)
                        - 4.0 * f(x, y, t))
                        / (d * d)
                };
                let ru = fd(&uf, 2) + u * fd(&uf, 0) + v * fd(&uf, 1) + fd(&pf, 0) - nu * lap(&uf);
                let rv = fd(&vf, 2) + u * fd(&vf, 0) + v * fd(&vf, 1) + fd(&pf, 1) - nu * lap(&vf);
                worst = worst.max(ru.abs()).max(rv.abs());
            }
        }
    }
    worst
}

/// Worst |∇·v| of the vortex field over an n×n grid at the given times.
pub fn tgv2d_divergence_max(nu: f64, times: &[f64], grid_n: usize) -> f64 {
    let d = 1e-4;
    let mut worst = 0.0f64;
    for &t in times {
        for i in 0..grid_n {
            for j in 0..grid_n {
                let x = i as f64 / grid_n as f64 * TAU;
                let y = j as f64 / grid_n as f64 * TAU;
                let dudx = (tgv2d_velocity(x + d, y, t, nu).0
                    - tgv2d_velocity(x - d, y, t, nu).0)
                    / (2.0 * d);
                let dvdy = (tgv2d_velocity(x, y + d, t, nu).1
                    - tgv2d_velocity(x, y - d, t, nu).1)
                    / (2.0 * d);
                worst = worst.max((dudx + dvdy).abs());
            }
        }
    }
    worst
}

/// Worst |∂s/∂t − κ∇²s| of the blob field at `samples` random space-time
/// probes in the unit square, t ∈ (0, 2].
pub fn diffusion_residual_max(kappa: f64, blobs: &[Blob], samples: usize, rng: &mut Rng) -> f64 {
    let s = |x: f64, y: f64, t: f64| diffusion_field(x, y, t, kappa, blobs);
    let (dx, dt) = (3e-5, 1e-5);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = rng.uniform();
        let y = rng.uniform();
        let t = rng.uniform_in(dt * 2.0, 2.0);
        let ds_dt = (s(x, y, t + dt) - s(x, y, t - dt)) / (2.0 * dt);
        let lap = (s(x + dx, y, t) + s(x - dx, y, t) + s(x, y + dx, t) + s(x, y - dx, t)
            - 4.0 * s(x, y, t))
            / (dx * dx);
        worst = worst.max((ds_dt - kappa * lap).abs());
    }
    worst
}

/// Draws blob parameters with the same distribution the generator uses, for
/// residual probes that should be independent of any particular trajectory.
pub fn probe_blobs(n_blobs: usize, rng: &mut Rng) -> Vec<Blob> {
    (0..n_blobs)
        .map(|_| Blob {
            center: [rng.uniform_in(0.2, 0.8), rng.uniform_in(0.2, 0.8)],
            t0: rng.uniform_in(0.2, 0.5),
            amplitude: rng.uniform_in(0.1, 0.3),
        })
        .collect()
}

/// Disjoint trajectory-level split by shuffled indices; counts are the
/// rounded fractions with the remainder going to the last split.
pub fn split_dataset(
    trajectories: Vec<Trajectory>,
    fractions: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Vec<Trajectory>)> {
    let (f1, f2, f3) = fractions;
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!("fractions {fractions:?} must sum to 1")));
    }
    let n = trajectories.len();
    let n1 = (f1 * n as f64).round() as usize;
    let n2 = (f2 * n as f64).round() as usize;
    if n1 + n2 > n {
        return Err(Error::InvalidArg("split fractions round past the dataset size".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut slots: Vec<Option<Trajectory>> = trajectories.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<Trajectory>>, idx: &[usize]| {
        idx.iter().map(|&i| slots[i].take().expect("disjoint split")).collect::<Vec<_>>()
    };
    let train = take(&mut slots, &order[..n1]);
    let val = take(&mut slots, &order[n1..n1 + n2]);
    let test = take(&mut slots, &order[n1 + n2..]);
    Ok((train, val, test))
}
