//! Empirical checks of the stability bounds and distribution-level metrics.
//!
//! Estimators maximise over random probes drawn from per-index substreams,
//! so enlarging a probe budget only ever adds probes: every estimate is a
//! max over a superset and never decreases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datasets::{ConditionalDataset, DatasetKind};
use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::guidance::alpha_schedule;
use crate::numerics::{distance, dot_unchecked, l2_norm, sub, RngStream};
use crate::sampler::Trajectory;

const LIPSCHITZ_STREAM: u64 = 0x11B5;
const PROBE_STREAM: u64 = 0xB0B0;
const STATE_STREAM: u64 = 0x57A7;
const BANK_STREAM: u64 = 0xBA4C;
const SLICE_STREAM: u64 = 0x5115;
const REFERENCE_STREAM: u64 = 0x4EF0;

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                expected: lo.len(),
                actual: hi.len(),
            });
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b))
        {
            return Err(Error::Config("region bounds must be finite with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[-half, half]^d`.
    pub fn cube(dim: usize, half: f64) -> Result<Self> {
        Self::new(vec![-half; dim], vec![half; dim])
    }

    /// Bounding box of `points`, padded by `margin` on every side.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a [f64]>, margin: f64) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for p in points {
            if lo.is_empty() {
                lo = p.to_vec();
                hi = p.to_vec();
            }
            for i in 0..p.len() {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if lo.is_empty() {
            return Err(Error::Input("cannot bound an empty point set".into()));
        }
        Self::new(
            lo.iter().map(|v| v - margin).collect(),
            hi.iter().map(|v| v + margin).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| rng.uniform_range(*a, *b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimates {
    pub lipschitz: f64,
    pub b: f64,
    pub v_max: f64,
    pub region: Region,
    pub n_probes: usize,
    pub seed: u64,
}

/// Largest observed `‖v(x) − v(x′)‖ / ‖x − x′‖` over `n_pairs` pairs in the
/// region, every time in `t_grid` and every condition in `conds`.
///
/// Even-indexed pairs are short displacements (`‖x − x′‖` log-uniform on
/// `[1e-3, 1e-1]`) that probe the local slope; odd-indexed pairs are two
/// independent points of the region.
pub fn estimate_lipschitz<F: VelocityField + ?Sized>(
    field: &F,
    region: &Region,
    t_grid: &[f64],
    conds: &[Condition],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs < 100 {
        return Err(Error::Config(format!("n_pairs must be >= 100, got {n_pairs}")));
    }
    check_region_dim(field, region)?;
    let root = RngStream::new(seed, LIPSCHITZ_STREAM);
    let ratios: Vec<Result<f64>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let x = region.sample(&mut rng);
            let x2 = if i % 2 == 0 {
                let r = 10f64.powf(rng.uniform_range(-3.0, -1.0));
                let u = rng.unit_vector(x.len());
                x.iter().zip(&u).map(|(a, b)| a + r * b).collect()
            } else {
                region.sample(&mut rng)
            };
            let gap = distance(&x, &x2);
            if gap == 0.0 {
                return Ok(0.0);
            }
            let mut best = 0.0f64;
            for &t in t_grid {
                for &c in conds {
                    let v1 = field.velocity(&x, t, c)?;
                    let v2 = field.velocity(&x2, t, c)?;
                    best = best.max(distance(&v1, &v2) / gap);
                }
            }
            Ok(best)
        })
        .collect();
    max_of(ratios)
}

/// Largest observed `‖v_c − v_u‖` and `‖v_c‖`. Probe `i` draws a point of
/// the region, a time from `t_grid` and a label from `labels`.
pub fn estimate_b_vmax<F: VelocityField + ?Sized>(
    field: &F,
    region: &Region,
    t_grid: &[f64],
    labels: &[usize],
    n_probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_probes < 100 {
        return Err(Error::Config(format!("n_probes must be >= 100, got {n_probes}")));
    }
    if t_grid.is_empty() || labels.is_empty() {
        return Err(Error::Config("need at least one time and one label".into()));
    }
    check_region_dim(field, region)?;
    let root = RngStream::new(seed, PROBE_STREAM);
    let norms: Vec<Result<(f64, f64)>> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let x = region.sample(&mut rng);
            let t = t_grid[rng.index(t_grid.len())];
            let y = labels[rng.index(labels.len())];
            let v_c = field.velocity(&x, t, Condition::Label(y))?;
            let v_u = field.velocity(&x, t, Condition::Null)?;
            Ok((l2_norm(&sub(&v_c, &v_u)), l2_norm(&v_c)))
        })
        .collect();
    let (mut b, mut v) = (0.0f64, 0.0f64);
    for r in norms {
        let (bi, vi) = r?;
        b = b.max(bi);
        v = v.max(vi);
    }
    Ok((b, v))
}

/// All three estimates on one region. `L̂` is maximised over the null
/// condition and every label in `labels`.
pub fn estimate_bounds<F: VelocityField + ?Sized>(
    field: &F,
    region: &Region,
    t_grid: &[f64],
    labels: &[usize],
    n_probes: usize,
    seed: u64,
) -> Result<BoundEstimates> {
    let mut conds: Vec<Condition> = labels.iter().map(|&y| Condition::Label(y)).collect();
    conds.push(Condition::Null);
    let lipschitz = estimate_lipschitz(field, region, t_grid, &conds, n_probes, seed)?;
    let (b, v_max) = estimate_b_vmax(field, region, t_grid, labels, n_probes, seed)?;
    Ok(BoundEstimates {
        lipschitz,
        b,
        v_max,
        region: region.clone(),
        n_probes,
        seed,
    })
}

fn check_region_dim<F: VelocityField + ?Sized>(field: &F, region: &Region) -> Result<()> {
    if region.dim() != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            actual: region.dim(),
        });
    }
    Ok(())
}

fn max_of(values: Vec<Result<f64>>) -> Result<f64> {
    let mut m = 0.0f64;
    for v in values {
        m = m.max(v?);
    }
    Ok(m)
}

/// Per-item `lhs ≤ rhs` comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_lhs: f64,
    pub max_ratio: f64,
    pub violation_rate: f64,
    pub dt: Option<f64>,
}

impl BoundReport {
    /// Violations are counted with a relative slack of `rel_slack` on `rhs`.
    pub fn new(lhs: Vec<f64>, rhs: Vec<f64>, dt: Option<f64>, rel_slack: f64) -> Self {
        let mut max_ratio = 0.0f64;
        let mut violations = 0usize;
        for (l, r) in lhs.iter().zip(&rhs) {
            let ratio = if *r > 0.0 {
                l / r
            } else if *l > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            max_ratio = max_ratio.max(ratio);
            if *l > r * (1.0 + rel_slack) {
                violations += 1;
            }
        }
        let n = lhs.len().max(1) as f64;
        Self {
            max_lhs: lhs.iter().cloned().fold(0.0, f64::max),
            lhs,
            rhs,
            max_ratio,
            violation_rate: violations as f64 / n,
            dt,
        }
    }

    pub fn violations(&self) -> usize {
        (self.violation_rate * self.lhs.len() as f64).round() as usize
    }
}

/// A state on the conditional probability path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    pub x: Vec<f64>,
    pub t: f64,
    pub y: usize,
}

/// `n` states `x_t ~ p_t(·|y)` with `t` uniform on `[t_lo, t_hi]` and `y`
/// cycling through `labels`.
pub fn on_path_states(
    dataset: &ConditionalDataset,
    labels: &[usize],
    n: usize,
    t_lo: f64,
    t_hi: f64,
    seed: u64,
) -> Result<Vec<PathState>> {
    if labels.is_empty() {
        return Err(Error::Config("need at least one label".into()));
    }
    if !(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0) {
        return Err(Error::Config(format!("bad time range [{t_lo}, {t_hi}]")));
    }
    let root = RngStream::new(seed, STATE_STREAM);
    (0..n)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let y = labels[i % labels.len()];
            let t = rng.uniform_range(t_lo, t_hi);
            let p = dataset.sample_path_point(y, t, &mut rng)?;
            Ok(PathState { x: p.x_t, t, y })
        })
        .collect()
}

fn guidance_difference<F: VelocityField + ?Sized>(field: &F, x: &[f64], t: f64, y: usize) -> Result<Vec<f64>> {
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let v_u = field.velocity(x, t, Condition::Null)?;
    Ok(sub(&v_c, &v_u))
}

/// `‖Δv(x̃, s) − Δv(x, t)‖` with `x̃ = x + (Δt/2) v_c(x, t)`. With
/// `common_time` false `s = t − Δt/2` (the predicted mid-point time);
/// otherwise `s = t`.
pub fn lemma1_lhs<F: VelocityField + ?Sized>(field: &F, state: &PathState, dt: f64, common_time: bool) -> Result<f64> {
    let mid = state.t - dt / 2.0;
    if mid < 0.0 {
        return Err(Error::Schedule { t: state.t, dt, mid });
    }
    let v_c = field.velocity(&state.x, state.t, Condition::Label(state.y))?;
    let x_tilde: Vec<f64> = state.x.iter().zip(&v_c).map(|(a, v)| a + 0.5 * dt * v).collect();
    let s = if common_time { state.t } else { mid };
    let here = guidance_difference(field, &state.x, state.t, state.y)?;
    let there = guidance_difference(field, &x_tilde, s, state.y)?;
    Ok(distance(&there, &here))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// Δv at `(x̃, t − Δt/2)` against Δv at `(x, t)`.
    pub literal: BoundReport,
    /// Both differences at time `t`.
    pub common_time: BoundReport,
}

/// Compare the guidance-difference drift on each state with `L̂ V̂max Δt`.
pub fn check_lemma1<F: VelocityField + ?Sized>(
    field: &F,
    states: &[PathState],
    dt: f64,
    lipschitz: f64,
    v_max: f64,
) -> Result<Lemma1Report> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::Config(format!("dt must lie in (0, 1], got {dt}")));
    }
    let both: Vec<Result<(f64, f64)>> = states
        .par_iter()
        .map(|s| Ok((lemma1_lhs(field, s, dt, false)?, lemma1_lhs(field, s, dt, true)?)))
        .collect();
    let mut literal = Vec::with_capacity(states.len());
    let mut common = Vec::with_capacity(states.len());
    for r in both {
        let (a, b) = r?;
        literal.push(a);
        common.push(b);
    }
    let rhs = vec![lipschitz * v_max * dt; states.len()];
    Ok(Lemma1Report {
        literal: BoundReport::new(literal, rhs.clone(), Some(dt), 0.0),
        common_time: BoundReport::new(common, rhs, Some(dt), 0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub dts: Vec<f64>,
    pub max_lhs: Vec<f64>,
    pub slope: f64,
    pub common_time_max_lhs: Vec<f64>,
    pub common_time_slope: f64,
}

/// Max Lemma-1 drift over `states` at each step size, and the fitted
/// log-log slope against `dt`.
pub fn lemma1_scaling<F: VelocityField + ?Sized>(field: &F, states: &[PathState], dts: &[f64]) -> Result<SlopeReport> {
    let mut max_lhs = Vec::with_capacity(dts.len());
    let mut common = Vec::with_capacity(dts.len());
    for &dt in dts {
        let r = check_lemma1(field, states, dt, 0.0, 0.0)?;
        max_lhs.push(r.literal.max_lhs);
        common.push(r.common_time.max_lhs);
    }
    Ok(SlopeReport {
        slope: loglog_slope(dts, &max_lhs),
        common_time_slope: loglog_slope(dts, &common),
        dts: dts.to_vec(),
        max_lhs,
        common_time_max_lhs: common,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Relative tolerance of the per-step deviation identity.
pub const PROP1_IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub n_steps: usize,
    pub max_deviation: f64,
    /// Worst `|dev − Δt α ‖Δv‖| / (Δt α ‖Δv‖)` over all steps.
    pub identity_max_rel_err: f64,
    pub identity_pass: bool,
    /// Worst gap between the recorded deviation and the distance from the
    /// next state to the conditional reference step, relative to
    /// `1 + ‖x_k‖`.
    pub reference_max_err: f64,
    pub reference_pass: bool,
    pub b_hat: f64,
    /// `dev ≤ Δt α B̂` per step.
    pub bound: BoundReport,
    pub pass: bool,
}

/// Relative tolerance of the reference-state cross-check. The guided and
/// reference states are both rounded to `x`'s scale before subtracting.
pub const PROP1_REFERENCE_TOL: f64 = 1e-10;

/// Check the per-step perturbation identity and bound on recorded
/// trajectories.
pub fn check_prop1(trajectories: &[&Trajectory], b_hat: f64) -> Result<Prop1Report> {
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    let mut identity = 0.0f64;
    let mut reference = 0.0f64;
    for (i, tr) in trajectories.iter().enumerate() {
        let n = tr.states.len().saturating_sub(1);
        if tr.diagnostics.len() != n || n == 0 {
            return Err(Error::Input(format!("trajectory {i} has no per-step diagnostics")));
        }
        let refs = tr
            .reference_states
            .as_ref()
            .ok_or_else(|| Error::Input(format!("trajectory {i} has no reference states")))?;
        if refs.len() != n {
            return Err(Error::Input(format!(
                "trajectory {i} has {} reference states, expected {n}",
                refs.len()
            )));
        }
        for k in 0..n {
            let d = &tr.diagnostics[k];
            let dt = tr.states[k].0 - tr.states[k + 1].0;
            let want = dt * d.alpha * d.dv_norm;
            let err = (d.deviation_from_conditional - want).abs();
            let rel = if want > 0.0 {
                err / want
            } else if err > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            identity = identity.max(rel);
            let measured = distance(&tr.states[k + 1].1, &refs[k]);
            let scale = 1.0 + l2_norm(&tr.states[k].1);
            reference = reference.max((measured - d.deviation_from_conditional).abs() / scale);
            lhs.push(d.deviation_from_conditional);
            rhs.push(dt * d.alpha * b_hat);
        }
    }
    let bound = BoundReport::new(lhs, rhs, None, PROP1_IDENTITY_TOL);
    let identity_pass = identity <= PROP1_IDENTITY_TOL;
    let reference_pass = reference <= PROP1_REFERENCE_TOL;
    Ok(Prop1Report {
        n_steps: bound.lhs.len(),
        max_deviation: bound.max_lhs,
        identity_max_rel_err: identity,
        identity_pass,
        reference_max_err: reference,
        reference_pass,
        b_hat,
        pass: identity_pass && reference_pass && bound.violation_rate == 0.0,
        bound,
    })
}

/// `m` points of the ideal conditional path at time `t`:
/// `(1 − t) x_0 + t x_1` with `x_0 ~ p_0(·|y)` and `x_1 ~ N(0, I)`.
pub fn manifold_bank(dataset: &ConditionalDataset, y: usize, t: f64, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let root = RngStream::new(seed, BANK_STREAM).split(y as u64);
    (0..m)
        .map(|i| {
            let mut rng = root.split(i as u64);
            Ok(dataset.sample_path_point(y, t, &mut rng)?.x_t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Nearest-neighbour distance of each query to the bank.
pub fn nearest_distances(points: &[Vec<f64>], bank: &[Vec<f64>]) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::Input("manifold bank is empty".into()));
    }
    Ok(points
        .par_iter()
        .map(|p| bank.iter().map(|b| distance(p, b)).fold(f64::INFINITY, f64::min))
        .collect())
}

/// Mean, median and 95th percentile of nearest-neighbour distances.
pub fn manifold_distance(points: &[Vec<f64>], bank: &[Vec<f64>]) -> Result<DistanceStats> {
    summarize(nearest_distances(points, bank)?)
}

pub(crate) fn summarize(mut d: Vec<f64>) -> Result<DistanceStats> {
    if d.is_empty() {
        return Err(Error::Input("no query points".into()));
    }
    d.sort_by(f64::total_cmp);
    Ok(DistanceStats {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        median: quantile_sorted(&d, 0.5),
        p95: quantile_sorted(&d, 0.95),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Exact 2-Wasserstein distance between two sorted 1-D samples with
/// uniform weights, via their quantile functions.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u128, b.len() as u128);
    // Cumulative weights are tracked as integers in units of 1/(n·m).
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0u128);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (a[i] - b[j]).powi(2);
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    (total / (n * m) as f64).sqrt()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<usize> {
    if a.len() < min || b.len() < min {
        return Err(Error::Input(format!("point sets need at least {min} points")));
    }
    let d = a[0].len();
    if let Some(p) = a.iter().chain(b).find(|p| p.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            actual: p.len(),
        });
    }
    Ok(d)
}

/// Mean over `n_projections` random unit directions of the exact 1-D
/// 2-Wasserstein distance between the projected sets.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    let d = check_sets(a, b, 2)?;
    if n_projections == 0 {
        return Err(Error::Config("n_projections must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed, SLICE_STREAM);
    let dirs: Vec<Vec<f64>> = (0..n_projections).map(|_| rng.unit_vector(d)).collect();
    let per: Vec<f64> = dirs
        .par_iter()
        .map(|u| {
            let mut pa: Vec<f64> = a.iter().map(|p| dot_unchecked(p, u)).collect();
            let mut pb: Vec<f64> = b.iter().map(|p| dot_unchecked(p, u)).collect();
            pa.sort_by(f64::total_cmp);
            pb.sort_by(f64::total_cmp);
            wasserstein_1d_sorted(&pa, &pb)
        })
        .collect();
    Ok(per.iter().sum::<f64>() / n_projections as f64)
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|p| {
            let mut s = 0.0;
            for q in b {
                s += distance(p, q);
            }
            s
        })
        .collect();
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// `2 E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` with every expectation an exact
/// average over all ordered pairs (including `a = a′`).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b, 1)?;
    Ok(2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b))
}

/// Number of histogram bins per axis for the KL estimate.
pub const KL_BINS: usize = 64;
/// Additive smoothing applied to both histograms.
pub const KL_SMOOTHING: f64 = 1e-9;

/// `KL(P̂ ‖ Q)` between the 2-D histogram of `points` and the exact
/// isotropic Gaussian `N(mean, var I)`, on a 64×64 grid over the box that
/// holds 99.9% of `Q`'s mass. Points outside the box are ignored.
pub fn histogram_kl_gaussian(points: &[Vec<f64>], mean: &[f64], var: f64) -> Result<f64> {
    if mean.len() != 2 {
        return Err(Error::Unsupported(
            "histogram KL is implemented for 2-D data only".into(),
        ));
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let per_axis = 0.999f64.sqrt();
    let z = normal.inverse_cdf(0.5 + per_axis / 2.0);
    let width = 2.0 * z * sd / KL_BINS as f64;
    let lo: Vec<f64> = mean.iter().map(|m| m - z * sd).collect();
    let edge_mass: Vec<f64> = (0..KL_BINS)
        .map(|k| {
            let a = -z + 2.0 * z * k as f64 / KL_BINS as f64;
            let b = -z + 2.0 * z * (k + 1) as f64 / KL_BINS as f64;
            normal.cdf(b) - normal.cdf(a)
        })
        .collect();
    let mut counts = vec![0usize; KL_BINS * KL_BINS];
    let mut inside = 0usize;
    for p in points {
        let ix = ((p[0] - lo[0]) / width).floor();
        let iy = ((p[1] - lo[1]) / width).floor();
        if (0.0..KL_BINS as f64).contains(&ix) && (0.0..KL_BINS as f64).contains(&iy) {
            counts[ix as usize * KL_BINS + iy as usize] += 1;
            inside += 1;
        }
    }
    let cells = (KL_BINS * KL_BINS) as f64;
    let norm = 1.0 + KL_SMOOTHING * cells;
    let mut kl = 0.0;
    for ix in 0..KL_BINS {
        for iy in 0..KL_BINS {
            let q = edge_mass[ix] * edge_mass[iy] / 0.999;
            let p = if inside > 0 {
                counts[ix * KL_BINS + iy] as f64 / inside as f64
            } else {
                0.0
            };
            let (p, q) = ((p + KL_SMOOTHING) / norm, (q + KL_SMOOTHING) / norm);
            kl += p * (p / q).ln();
        }
    }
    Ok(kl)
}

/// Index of the grid time closest to `t`.
pub fn nearest_step(tr: &Trajectory, t: f64) -> usize {
    let mut best = 0;
    for (k, (tk, _)) in tr.states.iter().enumerate() {
        if (tk - t).abs() < (tr.states[best].0 - t).abs() {
            best = k;
        }
    }
    best
}

/// States of every trajectory at the grid time nearest `t`, with labels.
pub fn states_at(trajectories: &[&Trajectory], t: f64) -> Vec<(Vec<f64>, usize)> {
    trajectories
        .iter()
        .map(|tr| (tr.states[nearest_step(tr, t)].1.clone(), tr.label))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub t: f64,
    pub sw: f64,
    pub kl: Option<f64>,
}

/// Sliced-Wasserstein distance between sampled states and a reference
/// sample at each requested time.
///
/// For Gaussian datasets the reference is drawn from the exact conditional
/// marginal of each chain's label, and single-Gaussian data additionally
/// gets the histogram KL. Other datasets only have a reference at `t = 0`
/// (fresh data draws); other times are skipped.
pub fn distributional_deviation(
    trajectories: &[&Trajectory],
    dataset: &ConditionalDataset,
    t_grid: &[f64],
    n_projections: usize,
    seed: u64,
) -> Result<Vec<DeviationPoint>> {
    let gaussian = matches!(
        dataset.kind(),
        DatasetKind::GaussianSingle | DatasetKind::GaussianMixture
    );
    let mut curve = Vec::with_capacity(t_grid.len());
    for (ti, &t) in t_grid.iter().enumerate() {
        if !gaussian && t != 0.0 {
            continue;
        }
        let states = states_at(trajectories, t);
        let root = RngStream::new(seed, REFERENCE_STREAM).split(ti as u64);
        let reference: Vec<Vec<f64>> = states
            .iter()
            .enumerate()
            .map(|(i, (_, y))| {
                let mut rng = root.split(i as u64);
                if gaussian {
                    let (m, var) = dataset.oracle_marginal(t, *y)?;
                    let sd = var.sqrt();
                    Ok(m.iter().map(|mi| mi + sd * rng.standard_normal()).collect())
                } else {
                    dataset.sample_data(*y, &mut rng)
                }
            })
            .collect::<Result<_>>()?;
        let points: Vec<Vec<f64>> = states.into_iter().map(|(p, _)| p).collect();
        let sw = sliced_wasserstein(&points, &reference, n_projections, seed)?;
        let kl = if dataset.kind() == DatasetKind::GaussianSingle && dataset.dim() == 2 {
            let (m, var) = dataset.oracle_marginal(t, 0)?;
            Some(histogram_kl_gaussian(&points, &m, var)?)
        } else {
            None
        };
        curve.push(DeviationPoint { t, sw, kl });
    }
    Ok(curve)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance
/// `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaIntegral {
    pub numeric: f64,
    pub analytic: f64,
    pub abs_err: f64,
}

/// `∫₀¹ α(t) dt` by quadrature against the closed form `λ_max / (γ + 1)`.
pub fn alpha_integral(lambda_max: f64, gamma: f64) -> AlphaIntegral {
    let numeric = adaptive_simpson(&|t| alpha_schedule(t, lambda_max, gamma), 0.0, 1.0, 1e-14);
    let analytic = lambda_max / (gamma + 1.0);
    AlphaIntegral {
        numeric,
        analytic,
        abs_err: (numeric - analytic).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::OracleField;
    use crate::guidance::StepDiagnostics;
    use proptest::prelude::*;

    /// `v_c = A x`, `v_u = 0`.
    struct Linear {
        a: [[f64; 2]; 2],
    }

    impl VelocityField for Linear {
        fn dim(&self) -> usize {
            2
        }
        fn num_labels(&self) -> usize {
            1
        }
        fn velocity(&self, x: &[f64], _t: f64, c: Condition) -> Result<Vec<f64>> {
            Ok(match c {
                Condition::Label(_) => vec![
                    self.a[0][0] * x[0] + self.a[0][1] * x[1],
                    self.a[1][0] * x[0] + self.a[1][1] * x[1],
                ],
                Condition::Null => vec![0.0, 0.0],
            })
        }
    }

    struct Const(Vec<f64>);

    impl VelocityField for Const {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn num_labels(&self) -> usize {
            1
        }
        fn velocity(&self, _x: &[f64], _t: f64, _c: Condition) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cloud(seed: u64, n: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut r = RngStream::new(seed, 0);
        (0..n)
            .map(|_| vec![r.standard_normal() + shift, r.standard_normal()])
            .collect()
    }

    fn grid() -> Vec<f64> {
        vec![0.0, 0.5, 1.0]
    }

    #[test]
    fn lipschitz_of_linear_map_is_its_top_singular_value() {
        let f = Linear {
            a: [[2.0, 1.0], [0.0, 1.0]],
        };
        // Singular values of [[2,1],[0,1]]: sqrt((6 ± sqrt(20)) / 2).
        let sigma = ((6.0 + 20f64.sqrt()) / 2.0).sqrt();
        let region = Region::cube(2, 3.0).unwrap();
        let l = estimate_lipschitz(&f, &region, &grid(), &[Condition::Label(0), Condition::Null], 400, 1).unwrap();
        assert!(l <= sigma * (1.0 + 1e-9) && l >= 0.95 * sigma, "{l} vs {sigma}");
    }

    #[test]
    fn lipschitz_of_constant_field_is_zero_and_monotone_in_budget() {
        let region = Region::cube(2, 2.0).unwrap();
        let c = Const(vec![1.0, 2.0]);
        assert_eq!(
            estimate_lipschitz(&c, &region, &grid(), &[Condition::Null], 100, 0).unwrap(),
            0.0
        );
        let oracle = OracleField::new(ConditionalDataset::circle_mixture(4, 3.0, 0.3).unwrap()).unwrap();
        let conds = [Condition::Label(1), Condition::Null];
        let small = estimate_lipschitz(&oracle, &region, &grid(), &conds, 100, 5).unwrap();
        let large = estimate_lipschitz(&oracle, &region, &grid(), &conds, 200, 5).unwrap();
        assert!(large >= small);
        assert!(estimate_lipschitz(&c, &region, &grid(), &[Condition::Null], 99, 0).is_err());
    }

    #[test]
    fn b_and_vmax_examples() {
        let region = Region::cube(2, 2.0).unwrap();
        let (b, v) = estimate_b_vmax(&Const(vec![3.0, 4.0]), &region, &grid(), &[0], 100, 0).unwrap();
        assert_eq!(b, 0.0);
        assert_eq!(v, 5.0);
        let oracle = OracleField::new(ConditionalDataset::circle_mixture(4, 3.0, 0.3).unwrap()).unwrap();
        let small = estimate_b_vmax(&oracle, &region, &grid(), &[0, 1, 2, 3], 100, 2).unwrap();
        let large = estimate_b_vmax(&oracle, &region, &grid(), &[0, 1, 2, 3], 300, 2).unwrap();
        assert!(large.0 >= small.0 && large.1 >= small.1);
    }

    #[test]
    fn lemma1_constant_field_has_no_drift() {
        let ds = ConditionalDataset::gaussian_single(vec![1.0, 0.0], 0.5).unwrap();
        let states = on_path_states(&ds, &[0], 50, 0.1, 1.0, 0).unwrap();
        let r = check_lemma1(&Const(vec![1.0, -1.0]), &states, 0.1, 1.0, 1.0).unwrap();
        assert_eq!(r.literal.max_lhs, 0.0);
        assert_eq!(r.literal.violation_rate, 0.0);
    }

    #[test]
    fn lemma1_linear_field_matches_hand_computation() {
        // Δv(x) = A x for every t, so Δv(x̃) − Δv(x) = A (Δt/2) A x.
        let f = Linear {
            a: [[0.5, -1.0], [2.0, 0.3]],
        };
        let ds = ConditionalDataset::gaussian_single(vec![1.0, 0.0], 0.5).unwrap();
        let states = on_path_states(&ds, &[0], 20, 0.2, 1.0, 4).unwrap();
        let dt = 0.125;
        let r = check_lemma1(&f, &states, dt, 0.0, 0.0).unwrap();
        for (s, lhs) in states.iter().zip(&r.literal.lhs) {
            let ax = f.velocity(&s.x, 0.0, Condition::Label(0)).unwrap();
            let aax = f.velocity(&ax, 0.0, Condition::Label(0)).unwrap();
            let want = 0.5 * dt * l2_norm(&aax);
            assert!((lhs - want).abs() <= 1e-10 * (1.0 + want), "{lhs} vs {want}");
        }
        assert_eq!(r.literal.lhs, r.common_time.lhs);
    }

    #[test]
    fn lemma1_scaling_on_oracle_is_linear() {
        let ds = ConditionalDataset::circle_mixture(4, 3.0, 0.3).unwrap();
        let oracle = OracleField::new(ds.clone()).unwrap();
        let states = on_path_states(&ds, &[0, 1, 2, 3], 200, 1.0 / 32.0, 1.0, 7).unwrap();
        let dts = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
        let r = lemma1_scaling(&oracle, &states, &dts).unwrap();
        assert!((0.7..=1.3).contains(&r.slope), "{r:?}");
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    fn fake_trajectory(alpha: f64, dv: [f64; 2], dt: f64) -> Trajectory {
        let x0 = vec![0.5, -0.25];
        let v_c = [1.0, 2.0];
        let refp: Vec<f64> = x0.iter().zip(&v_c).map(|(a, v)| a + dt * v).collect();
        let x1: Vec<f64> = x0
            .iter()
            .zip(&v_c)
            .zip(&dv)
            .map(|((a, v), d)| a + dt * (v + alpha * d))
            .collect();
        Trajectory {
            label: 0,
            states: vec![(1.0, x0), (1.0 - dt, x1)],
            diagnostics: vec![StepDiagnostics {
                alpha,
                dv_norm: l2_norm(&dv),
                v_c_norm: l2_norm(&v_c),
                deviation_from_conditional: l2_norm(&[dt * alpha * dv[0], dt * alpha * dv[1]]),
                nfe: 3,
            }],
            reference_states: Some(vec![refp]),
        }
    }

    #[test]
    fn prop1_accepts_consistent_trajectories() {
        let tr = fake_trajectory(0.7, [3.0, -4.0], 0.25);
        let r = check_prop1(&[&tr], 5.0).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_prop1(&[&tr], 4.0).unwrap();
        assert!(!r.pass);
        assert_eq!(r.bound.violations(), 1);
        let zero = fake_trajectory(0.0, [3.0, -4.0], 0.25);
        let r = check_prop1(&[&zero], 0.0).unwrap();
        assert!(r.pass && r.max_deviation == 0.0);
    }

    #[test]
    fn prop1_requires_diagnostics_and_references() {
        let mut tr = fake_trajectory(0.7, [3.0, -4.0], 0.25);
        tr.reference_states = None;
        assert!(matches!(check_prop1(&[&tr], 5.0), Err(Error::Input(_))));
        let mut tr = fake_trajectory(0.7, [3.0, -4.0], 0.25);
        tr.diagnostics.clear();
        assert!(matches!(check_prop1(&[&tr], 5.0), Err(Error::Input(_))));
    }

    #[test]
    fn manifold_distance_examples() {
        let bank = cloud(1, 500, 0.0);
        let s = manifold_distance(&bank[..50], &bank).unwrap();
        assert_eq!((s.mean, s.median, s.p95), (0.0, 0.0, 0.0));
        assert!(manifold_distance(&bank, &[]).is_err());
    }

    #[test]
    fn nearest_neighbour_distance_scales_with_bank_size() {
        // In 2-D the typical nearest-neighbour distance scales like M^(-1/2).
        let ds = ConditionalDataset::gaussian_single(vec![2.0, 0.0], 0.5).unwrap();
        let queries = manifold_bank(&ds, 0, 0.0, 400, 99).unwrap();
        let small = manifold_distance(&queries, &manifold_bank(&ds, 0, 0.0, 1000, 1).unwrap()).unwrap();
        let large = manifold_distance(&queries, &manifold_bank(&ds, 0, 0.0, 16_000, 1).unwrap()).unwrap();
        let ratio = small.p95 / large.p95;
        assert!((2.0..=8.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn wasserstein_1d_known_values() {
        assert_eq!(wasserstein_1d_sorted(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((wasserstein_1d_sorted(&[0.0, 1.0], &[2.0, 3.0]) - 2.0).abs() < 1e-15);
        // One point against two: quantile functions differ on the upper half.
        let w = wasserstein_1d_sorted(&[0.0], &[0.0, 2.0]);
        assert!((w - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sliced_wasserstein_matches_brute_force_projections() {
        let a = cloud(2, 300, 0.0);
        let b = cloud(3, 200, 1.5);
        let sw = sliced_wasserstein(&a, &b, 1000, 8).unwrap();
        let mut rng = RngStream::new(8, SLICE_STREAM);
        let mut total = 0.0;
        for _ in 0..1000 {
            let u = rng.unit_vector(2);
            let mut pa: Vec<f64> = a.iter().map(|p| p[0] * u[0] + p[1] * u[1]).collect();
            let mut pb: Vec<f64> = b.iter().map(|p| p[0] * u[0] + p[1] * u[1]).collect();
            pa.sort_by(f64::total_cmp);
            pb.sort_by(f64::total_cmp);
            // Brute force on the common refinement of both empirical CDFs.
            let (n, m) = (pa.len(), pb.len());
            let mut s = 0.0;
            for k in 0..n * m {
                s += (pa[k / m] - pb[k / n]).powi(2);
            }
            total += (s / (n * m) as f64).sqrt();
        }
        assert!((sw - total / 1000.0).abs() < 1e-12, "{sw} vs {}", total / 1000.0);
    }

    #[test]
    fn energy_distance_examples() {
        let p = vec![vec![1.0, 2.0]];
        let q = vec![vec![4.0, 6.0]];
        assert_eq!(energy_distance(&p, &q).unwrap(), 10.0);
        let a = cloud(4, 60, 0.0);
        let mut b = a.clone();
        b.reverse();
        assert!(energy_distance(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn histogram_kl_is_small_for_matching_samples() {
        let pts = cloud(5, 100_000, 0.0);
        let kl = histogram_kl_gaussian(&pts, &[0.0, 0.0], 1.0).unwrap();
        let shifted = histogram_kl_gaussian(&pts, &[1.0, 0.0], 1.0).unwrap();
        assert!(kl < 0.05, "{kl}");
        assert!(shifted > 5.0 * kl, "{shifted} vs {kl}");
    }

    #[test]
    fn deviation_curve_handles_empty_grid_and_non_gaussian_data() {
        let ds = ConditionalDataset::two_moons(0.05).unwrap();
        let tr = fake_trajectory(0.0, [0.0, 0.0], 1.0);
        assert!(distributional_deviation(&[&tr, &tr], &ds, &[], 10, 0)
            .unwrap()
            .is_empty());
        let curve = distributional_deviation(&[&tr, &tr], &ds, &[0.5, 0.0], 10, 0).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].t, 0.0);
        assert!(curve[0].kl.is_none());
    }

    #[test]
    fn alpha_integral_matches_closed_form() {
        for gamma in [0.0, 0.5, 1.0, 2.0, 3.5] {
            let r = alpha_integral(1.3, gamma);
            assert!(r.abs_err <= 1e-10, "gamma {gamma}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn metrics_are_symmetric_and_non_negative(seed in 0u64..10_000, na in 2usize..40, nb in 2usize..40, shift in -2.0f64..2.0) {
            let a = cloud(seed, na, 0.0);
            let b = cloud(seed + 1, nb, shift);
            let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(sliced_wasserstein(&a, &a, 16, seed).unwrap(), 0.0);
            let e = energy_distance(&a, &b).unwrap();
            prop_assert!(e >= -1e-12);
            prop_assert!((e - energy_distance(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
        }
    }
}
