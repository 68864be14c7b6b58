//! Point-cloud preprocessing: position rescaling, radius-graph construction
//! with a per-supernode degree cap, and the random samplers used at every
//! optimization step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Array;

/// One time slice of a simulation.
#[derive(Clone, Debug)]
pub struct PointCloudFrame {
    /// k × dim, raw simulation units.
    pub positions: Array<f64>,
    /// k × d per-point feature vectors.
    pub features: Array<f64>,
    /// Seconds.
    pub time: f64,
    /// Scalar conditions by name (ordered map so iteration is deterministic).
    pub conditions: BTreeMap<String, f64>,
}

impl PointCloudFrame {
    pub fn new(
        positions: Array<f64>,
        features: Array<f64>,
        time: f64,
        conditions: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if positions.shape().len() != 2 || features.shape().len() != 2 {
            return Err(Error::InvalidArg("frame arrays must be 2-d".into()));
        }
        if positions.rows() != features.rows() {
            return Err(Error::InvalidArg(format!(
                "positions rows {} != features rows {}",
                positions.rows(),
                features.rows()
            )));
        }
        if positions.rows() == 0 {
            return Err(Error::InvalidArg("frame must contain at least one point".into()));
        }
        if !positions.all_finite() || !features.all_finite() || !time.is_finite() {
            return Err(Error::InvalidArg("frame contains non-finite values".into()));
        }
        Ok(Self { positions, features, time, conditions })
    }

    pub fn num_points(&self) -> usize {
        self.positions.rows()
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Directed edges from input points to supernode slots.
#[derive(Clone, Debug)]
pub struct SupernodeGraph {
    /// Point indices backing each slot (length n_s).
    pub supernode_idx: Vec<usize>,
    /// Edge sources: indices into the point cloud.
    pub edges_from: Vec<usize>,
    /// Edge targets: slot indices in 0..n_s.
    pub edges_to: Vec<usize>,
}

impl SupernodeGraph {
    pub fn num_slots(&self) -> usize {
        self.supernode_idx.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges_from.len()
    }
}

/// Affine map of each dimension onto [0, target_max] (exact at the bounds).
pub fn rescale_positions(
    positions: &Array<f64>,
    source_bounds: &[(f64, f64)],
    target_max: f64,
) -> Result<Array<f64>> {
    let dim = positions.cols();
    if source_bounds.len() != dim {
        return Err(Error::InvalidArg(format!(
            "{} bounds for {dim} dimensions",
            source_bounds.len()
        )));
    }
    for &(lo, hi) in source_bounds {
        if !(hi - lo).is_finite() || hi <= lo {
            return Err(Error::DegenerateBounds(format!("[{lo}, {hi}]")));
        }
    }
    let k = positions.rows();
    let mut out = vec![0.0; k * dim];
    for i in 0..k {
        for (j, &(lo, hi)) in source_bounds.iter().enumerate() {
            out[i * dim + j] = (positions.at2(i, j) - lo) / (hi - lo) * target_max;
        }
    }
    Array::new([k, dim], out)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All (point → supernode) pairs within `radius`, except that a slot with
/// more than `max_degree` in-radius neighbors keeps a uniform random subset of
/// exactly `max_degree`. The supernode's own point always survives the cap,
/// so no slot is ever empty.
pub fn build_radius_graph(
    positions: &Array<f64>,
    supernode_idx: &[usize],
    radius: f64,
    max_degree: usize,
    rng: &mut Rng,
) -> Result<SupernodeGraph> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArg(format!("radius must be positive, got {radius}")));
    }
    if max_degree == 0 {
        return Err(Error::InvalidArg("max_degree must be at least 1".into()));
    }
    let k = positions.rows();
    {
        let mut seen = vec![false; k];
        for &s in supernode_idx {
            if s >= k {
                return Err(Error::Index { index: s, bound: k });
            }
            if seen[s] {
                return Err(Error::InvalidArg(format!("duplicate supernode index {s}")));
            }
            seen[s] = true;
        }
    }
    let r2 = radius * radius;
    let mut edges_from = Vec::new();
    let mut edges_to = Vec::new();
    let mut neighbors = Vec::new();
    for (slot, &s) in supernode_idx.iter().enumerate() {
        let center = positions.row(s);
        neighbors.clear();
        for p in 0..k {
            if p != s && dist2(positions.row(p), center) <= r2 {
                neighbors.push(p);
            }
        }
        if neighbors.len() + 1 > max_degree {
            let keep = rng.sample_without_replacement(neighbors.len(), max_degree - 1);
            let mut kept: Vec<usize> = keep.iter().map(|&i| neighbors[i]).collect();
            kept.sort_unstable();
            neighbors = kept;
        }
        edges_from.push(s);
        edges_to.push(slot);
        for &p in &neighbors {
            edges_from.push(p);
            edges_to.push(slot);
        }
    }
    Ok(SupernodeGraph { supernode_idx: supernode_idx.to_vec(), edges_from, edges_to })
}

/// Finds by bisection a radius whose mean in-radius neighbor count (self
/// excluded, no cap) is within ±20% of `target_degree`. With more than 2048
/// points, counts use a strided subset of centers against the full cloud.
pub fn calibrate_radius(positions: &Array<f64>, target_degree: f64) -> Result<f64> {
    let k = positions.rows();
    if k < 2 {
        return Err(Error::InvalidArg("need at least 2 points to calibrate".into()));
    }
    if target_degree >= (k - 1) as f64 {
        return Err(Error::InvalidArg(format!(
            "target degree {target_degree} unreachable with {k} points"
        )));
    }
    let stride = k.div_ceil(2048);
    let centers: Vec<usize> = (0..k).step_by(stride).collect();

    // Squared distances per center, computed once.
    let mut d2 = Vec::with_capacity(centers.len() * k);
    let mut max_d2 = 0.0f64;
    for &c in &centers {
        let crow = positions.row(c);
        for p in 0..k {
            let v = dist2(positions.row(p), crow);
            max_d2 = max_d2.max(v);
            d2.push(v);
        }
    }
    if max_d2 == 0.0 {
        return Err(Error::DegenerateBounds("all points coincident".into()));
    }
    let mean_count = |r: f64| -> f64 {
        let r2 = r * r;
        let hits = d2.iter().filter(|&&v| v > 0.0 && v <= r2).count()
            + centers
                .iter()
                .enumerate()
                .filter(|&(ci, &c)| {
                    // Coincident non-self points sit at distance 0; count them.
                    d2[ci * k..ci * k + k]
                        .iter()
                        .enumerate()
                        .any(|(p, &v)| v == 0.0 && p != c)
                })
                .count();
        hits as f64 / centers.len() as f64
    };

    let (mut lo, mut hi) = (0.0f64, max_d2.sqrt() * 1.0000001);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = mean_count(mid);
        if c >= 0.8 * target_degree && c <= 1.2 * target_degree {
            return Ok(mid);
        }
        if c < target_degree {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::InvalidArg(format!(
        "radius calibration did not reach degree {target_degree} ± 20%"
    )))
}

/// n_s distinct indices, uniform without replacement. Callers draw a fresh
/// set every optimization step.
pub fn sample_supernodes(k: usize, n_s: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_s == 0 || n_s > k {
        return Err(Error::InvalidArg(format!("cannot pick {n_s} supernodes from {k} points")));
    }
    Ok(rng.sample_without_replacement(k, n_s))
}

/// Keeps a uniform random subset of rows; the kept fraction is drawn from
/// [lo, hi]. Row order is preserved.
pub fn subsample_points(
    frame: &PointCloudFrame,
    fraction_range: (f64, f64),
    rng: &mut Rng,
) -> Result<PointCloudFrame> {
    let (lo, hi) = fraction_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArg(format!("bad fraction range [{lo}, {hi}]")));
    }
    let k = frame.num_points();
    let fraction = if lo == hi { lo } else { rng.uniform_in(lo, hi) };
    let count = ((fraction * k as f64).round() as usize).clamp(1, k);
    let mut keep = rng.sample_without_replacement(k, count);
    keep.sort_unstable();

    let dim = frame.dim();
    let d = frame.feature_dim();
    let mut pos = Vec::with_capacity(count * dim);
    let mut feat = Vec::with_capacity(count * d);
    for &i in &keep {
        pos.extend_from_slice(frame.positions.row(i));
        feat.extend_from_slice(frame.features.row(i));
    }
    PointCloudFrame::new(
        Array::new([count, dim], pos)?,
        Array::new([count, d], feat)?,
        frame.time,
        frame.conditions.clone(),
    )
}
