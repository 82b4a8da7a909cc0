//! Evaluation: steered-path metrics, reweighted free-energy curves, basin
//! free-energy differences and CV landscapes.

use serde::{Deserialize, Serialize};

use crate::cvmodels::CollectiveVariable;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::systems::{Configuration, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaMetrics {
    pub rmsd: f64,
    pub hit: bool,
    /// Maximum potential energy along the path.
    pub max_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub rmsd_mean: f64,
    pub thp_percent: f64,
    /// Over hitting replicas only; absent when none hit.
    pub ets_mean: Option<f64>,
    pub ets_std: Option<f64>,
    pub replicas: Vec<ReplicaMetrics>,
}

pub fn replica_metrics(
    traj: &Trajectory,
    system: &SystemSpec,
    target: &Configuration,
    hit_threshold: f64,
) -> Result<ReplicaMetrics> {
    let energies = traj
        .annotations
        .potential
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("path metrics need potential-energy annotations".into()))?;
    if traj.is_empty() {
        return Err(Error::EmptyDataset("trajectory"));
    }
    let s_target = system.ground_truth_cv(target)?;
    let mut rmsd = f64::INFINITY;
    let mut hit = false;
    for frame in &traj.frames {
        rmsd = rmsd.min(system.structural_rmsd(frame, target)?);
        let s = system.ground_truth_cv(frame)?;
        hit |= system.cv_difference(s, s_target).abs() < hit_threshold;
    }
    let max_energy = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ReplicaMetrics { rmsd, hit, max_energy })
}

/// Aggregate per-replica metrics: mean closest-approach RMSD, percentage of
/// replicas that hit the target, and max-energy statistics over the hits.
pub fn aggregate_metrics(replicas: Vec<ReplicaMetrics>) -> Result<PathMetrics> {
    if replicas.is_empty() {
        return Err(Error::EmptyDataset("no replicas"));
    }
    let n = replicas.len() as f64;
    let rmsd_mean = replicas.iter().map(|r| r.rmsd).sum::<f64>() / n;
    let hits: Vec<f64> = replicas.iter().filter(|r| r.hit).map(|r| r.max_energy).collect();
    let thp_percent = 100.0 * hits.len() as f64 / n;
    let (ets_mean, ets_std) = if hits.is_empty() {
        (None, None)
    } else {
        (Some(crate::stats::mean(&hits)), Some(crate::stats::std_dev(&hits)))
    };
    Ok(PathMetrics {
        rmsd_mean,
        thp_percent,
        ets_mean,
        ets_std,
        replicas,
    })
}

pub fn path_metrics(
    trajs: &[Trajectory],
    system: &SystemSpec,
    target: &Configuration,
    hit_threshold: f64,
) -> Result<PathMetrics> {
    let replicas = trajs
        .iter()
        .map(|t| replica_metrics(t, system, target, hit_threshold))
        .collect::<Result<Vec<_>>>()?;
    aggregate_metrics(replicas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FesCurve {
    pub centers: Vec<f64>,
    /// `+inf` in empty bins; minimum 0.
    pub free_energy: Vec<f64>,
    pub counts: Vec<usize>,
    /// Kish effective sample size per bin.
    pub ess: Vec<f64>,
    pub bin_width: f64,
    pub beta: f64,
}

/// Free energy from samples with log-weights (`beta * V` for OPES frames).
pub fn fes_from_samples(
    values: &[f64],
    log_weights: &[f64],
    beta: f64,
    n_bins: usize,
    range: Option<(f64, f64)>,
) -> Result<FesCurve> {
    if values.is_empty() || values.len() != log_weights.len() {
        return Err(Error::EmptyDataset("no samples for the free-energy estimate"));
    }
    if n_bins == 0 || !(beta > 0.0) {
        return Err(Error::InvalidParameter("need n_bins >= 1 and beta > 0".into()));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
    });
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!("empty bin range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut wsum = vec![0.0; n_bins];
    let mut w2sum = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let mut total = 0.0;
    for (&v, &lw) in values.iter().zip(log_weights) {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        let w = (lw - shift).exp();
        wsum[b] += w;
        w2sum[b] += w * w;
        counts[b] += 1;
        total += w;
    }
    if total == 0.0 {
        return Err(Error::EmptyDataset("no samples inside the bin range"));
    }
    let mut free_energy: Vec<f64> = wsum
        .iter()
        .map(|&w| {
            if w > 0.0 {
                -(w / (total * width)).ln() / beta
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let fmin = free_energy.iter().copied().fold(f64::INFINITY, f64::min);
    free_energy.iter_mut().for_each(|f| *f -= fmin);
    let ess = wsum
        .iter()
        .zip(&w2sum)
        .map(|(&w, &w2)| if w2 > 0.0 { w * w / w2 } else { 0.0 })
        .collect();
    let centers = (0..n_bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    Ok(FesCurve {
        centers,
        free_energy,
        counts,
        ess,
        bin_width: width,
        beta,
    })
}

fn burn_in_start(n: usize, burn_in_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::InvalidParameter("burn_in_fraction must lie in [0, 1)".into()));
    }
    Ok((burn_in_fraction * n as f64).floor() as usize)
}

/// Coordinate values and log-weights `beta * V` of the frames after burn-in.
/// Frames without bias annotations get unit weight.
pub fn weighted_samples(
    traj: &Trajectory,
    coordinate: &dyn Fn(&Configuration) -> Result<f64>,
    beta: f64,
    burn_in_fraction: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let start = burn_in_start(traj.len(), burn_in_fraction)?;
    let values = traj.frames[start..]
        .iter()
        .map(coordinate)
        .collect::<Result<Vec<_>>>()?;
    let log_w = match &traj.annotations.bias {
        Some(v) => v[start..].iter().map(|b| beta * b).collect(),
        None => vec![0.0; values.len()],
    };
    Ok((values, log_w))
}

/// Reweighted FES of `coordinate` over the frames after burn-in.
pub fn reweighted_fes(
    traj: &Trajectory,
    coordinate: &dyn Fn(&Configuration) -> Result<f64>,
    beta: f64,
    n_bins: usize,
    burn_in_fraction: f64,
    range: Option<(f64, f64)>,
) -> Result<FesCurve> {
    if traj.annotations.bias.is_none() {
        return Err(Error::InvalidParameter(
            "reweighting needs per-frame bias values".into(),
        ));
    }
    let (values, log_w) = weighted_samples(traj, coordinate, beta, burn_in_fraction)?;
    fes_from_samples(&values, &log_w, beta, n_bins, range)
}

/// `(1/beta) ln(Z_A / Z_B)` with basin A at or above `split`, each side summed
/// bin by bin (midpoint rule on the uniform grid).
pub fn delta_f(fes: &FesCurve, split: f64) -> Result<f64> {
    let (mut za, mut zb) = (0.0, 0.0);
    for (&c, &f) in fes.centers.iter().zip(&fes.free_energy) {
        let w = (-fes.beta * f).exp() * fes.bin_width;
        if c >= split {
            za += w;
        } else {
            zb += w;
        }
    }
    if za == 0.0 || zb == 0.0 {
        return Err(Error::EmptyDataset("a basin has no population"));
    }
    Ok((za / zb).ln() / fes.beta)
}

/// Same ratio summed directly over weighted samples (no binning).
pub fn delta_f_from_samples(values: &[f64], log_weights: &[f64], beta: f64, split: f64) -> Result<f64> {
    let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut za, mut zb) = (0.0, 0.0);
    for (&v, &lw) in values.iter().zip(log_weights) {
        let w = (lw - shift).exp();
        if v >= split {
            za += w;
        } else {
            zb += w;
        }
    }
    if za == 0.0 || zb == 0.0 {
        return Err(Error::EmptyDataset("a basin has no population"));
    }
    Ok((za / zb).ln() / beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaFSeries {
    /// `(step, delta F)` at each retained checkpoint.
    pub checkpoints: Vec<(u64, f64)>,
    pub final_delta_f: f64,
    pub reference: Option<f64>,
    /// Whether every checkpoint of the final window is within the tolerance
    /// of the reference.
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesOptions {
    pub split: f64,
    pub burn_in_fraction: f64,
    /// Frames between checkpoints.
    pub checkpoint_stride: usize,
    /// Tolerance in units of `k_B T`.
    pub tolerance_kt: f64,
    /// Fraction of checkpoints forming the final window.
    pub final_window: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            split: 0.0,
            burn_in_fraction: 0.15,
            checkpoint_stride: 100,
            tolerance_kt: 0.5,
            final_window: 0.1,
        }
    }
}

/// Delta F on growing windows: checkpoints fall every `checkpoint_stride`
/// frames, the first `burn_in_fraction` of them are dropped, and each
/// retained checkpoint uses the frames from the burn-in point up to itself.
pub fn delta_f_series(
    traj: &Trajectory,
    coordinate: &dyn Fn(&Configuration) -> Result<f64>,
    beta: f64,
    opts: &SeriesOptions,
    reference: Option<f64>,
) -> Result<DeltaFSeries> {
    if opts.checkpoint_stride == 0 {
        return Err(Error::InvalidParameter("checkpoint_stride must be positive".into()));
    }
    let n_ck = traj.len() / opts.checkpoint_stride;
    let skip = burn_in_start(n_ck, opts.burn_in_fraction)?;
    let (values, log_w) = weighted_samples(traj, coordinate, beta, 0.0)?;
    let first_frame = skip * opts.checkpoint_stride;
    let mut checkpoints = Vec::new();
    for c in skip + 1..=n_ck {
        let end = c * opts.checkpoint_stride;
        if end <= first_frame {
            continue;
        }
        let df = delta_f_from_samples(&values[first_frame..end], &log_w[first_frame..end], beta, opts.split);
        match df {
            Ok(df) => checkpoints.push(((end - 1) as u64 * traj.record_stride, df)),
            Err(Error::EmptyDataset(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let final_delta_f = checkpoints
        .last()
        .map(|c| c.1)
        .ok_or(Error::EmptyDataset("no checkpoint has both basins"))?;
    let converged = reference.map(|r| {
        let w = ((opts.final_window * checkpoints.len() as f64).ceil() as usize).max(1);
        checkpoints[checkpoints.len() - w..]
            .iter()
            .all(|c| (c.1 - r).abs() <= opts.tolerance_kt / beta)
    });
    Ok(DeltaFSeries {
        checkpoints,
        final_delta_f,
        reference,
        converged,
    })
}

/// Regular grid over the natural parameterization of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Per axis: `(lo, hi, n_nodes)`, endpoints included.
    pub axes: Vec<(f64, f64, usize)>,
}

impl GridSpec {
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for &(lo, hi, n) in &self.axes {
            let pts: Vec<f64> = (0..n)
                .map(|i| {
                    if n == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (n - 1) as f64
                    }
                })
                .collect();
            out = out
                .into_iter()
                .flat_map(|p| pts.iter().map(move |&v| [p.clone(), vec![v]].concat()))
                .collect();
        }
        out
    }
}

/// CV evaluated on every grid node: `(coordinates, cv)` rows.
pub fn cv_landscape(cv: &dyn CollectiveVariable, system: &SystemSpec, grid: &GridSpec) -> Result<Vec<(Vec<f64>, f64)>> {
    grid.nodes()
        .into_iter()
        .map(|node| {
            let x = system.configuration_at(&node)?;
            Ok((node, cv.value(&x)?))
        })
        .collect()
}
