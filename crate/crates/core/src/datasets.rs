//! Conditional toy distributions `p_0(·|y)`, the standard-normal prior and
//! the straight-line noise/data path.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data). A path point is
//! `x_t = (1 − t)·x0 + t·x1` and its regression target is the data-direction
//! velocity `x0 − x1`, so an Euler step `x + Δt·v` with decreasing `t` moves
//! toward data.
//!
//! For the Gaussian kinds the conditional expectation of the target given
//! `x_t` is available in closed form. With `x0 ~ N(μ, s²I)` and
//! `x1 ~ N(0, I)` independent,
//!
//! ```text
//! V(t)       = (1 − t)²·s² + t²
//! E[x0 − x1 | x_t = x] = μ + c(t)·(x − (1 − t)μ),   c(t) = ((1 − t)·s² − t) / V(t)
//! ```
//!
//! The null-condition oracle mixes the per-label expressions with the
//! posterior label weights at `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::numerics::{sample_standard_normal, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianSingle,
    GaussianMixture,
    TwoMoons,
    Checkerboard,
}

/// A labelled toy distribution. Construct through the checked constructors.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalDataset {
    /// One label, `N(mean, std²·I)`.
    GaussianSingle { mean: Vec<f64>, std: f64 },
    /// Label `y` is the component `N(means[y], std²·I)`.
    GaussianMixture { means: Vec<Vec<f64>>, std: f64 },
    /// Two interleaved half circles in the plane, one per label.
    TwoMoons { noise: f64 },
    /// Dark cells of an `n × n` board of side `cell`; label `y` is the
    /// `y`-th dark cell in row-major order, sampled uniformly.
    Checkerboard { cells: usize, cell: f64 },
}

/// Serializable description of a dataset, tagged by `"kind"`.
///
/// A mixture takes either explicit `means` or `k` means spread evenly on a
/// circle of the given `radius` (default 4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianSingle {
        mean: Vec<f64>,
        std: f64,
    },
    GaussianMixture {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        means: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
        std: f64,
    },
    TwoMoons {
        noise: f64,
    },
    Checkerboard {
        cells: usize,
        cell: f64,
    },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<ConditionalDataset> {
        match self {
            DatasetSpec::GaussianSingle { mean, std } => ConditionalDataset::gaussian_single(mean.clone(), *std),
            DatasetSpec::GaussianMixture { means, k, radius, std } => match (means, k) {
                (Some(m), None) if radius.is_none() => ConditionalDataset::gaussian_mixture(m.clone(), *std),
                (None, Some(k)) => ConditionalDataset::circle_mixture(*k, radius.unwrap_or(4.0), *std),
                _ => Err(Error::Config(
                    "gaussian_mixture needs either `means` or `k` (with optional `radius`)".into(),
                )),
            },
            DatasetSpec::TwoMoons { noise } => ConditionalDataset::two_moons(*noise),
            DatasetSpec::Checkerboard { cells, cell } => ConditionalDataset::checkerboard(*cells, *cell),
        }
    }
}

/// A point on the straight path between a data sample and a noise sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub y: usize,
}

fn check_std(std: f64) -> Result<()> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("data std must be positive, got {std}")));
    }
    Ok(())
}

impl ConditionalDataset {
    pub fn gaussian_single(mean: Vec<f64>, std: f64) -> Result<Self> {
        check_std(std)?;
        if mean.is_empty() {
            return Err(Error::Config("mean must have at least one coordinate".into()));
        }
        Ok(Self::GaussianSingle { mean, std })
    }

    pub fn gaussian_mixture(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        check_std(std)?;
        let Some(first) = means.first() else {
            return Err(Error::Config("mixture needs at least one mean".into()));
        };
        let d = first.len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        for i in 0..means.len() {
            for j in 0..i {
                if means[i] == means[j] {
                    return Err(Error::Config(format!("mixture means {j} and {i} coincide")));
                }
            }
        }
        Ok(Self::GaussianMixture { means, std })
    }

    /// `k` means evenly spaced on a circle of the given radius in the plane,
    /// the first one on the positive x axis.
    pub fn circle_mixture(k: usize, radius: f64, std: f64) -> Result<Self> {
        if k == 0 || !(radius > 0.0) {
            return Err(Error::Config("circle mixture needs k >= 1 and radius > 0".into()));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::gaussian_mixture(means, std)
    }

    pub fn two_moons(noise: f64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!("moon noise must be >= 0, got {noise}")));
        }
        Ok(Self::TwoMoons { noise })
    }

    pub fn checkerboard(cells: usize, cell: f64) -> Result<Self> {
        if cells < 2 || !cells.is_multiple_of(2) || !(cell > 0.0) {
            return Err(Error::Config(
                "checkerboard needs an even cell count >= 2 and cell > 0".into(),
            ));
        }
        Ok(Self::Checkerboard { cells, cell })
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            Self::GaussianSingle { .. } => DatasetKind::GaussianSingle,
            Self::GaussianMixture { .. } => DatasetKind::GaussianMixture,
            Self::TwoMoons { .. } => DatasetKind::TwoMoons,
            Self::Checkerboard { .. } => DatasetKind::Checkerboard,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianSingle { mean, .. } => mean.len(),
            Self::GaussianMixture { means, .. } => means[0].len(),
            Self::TwoMoons { .. } | Self::Checkerboard { .. } => 2,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Self::GaussianSingle { .. } => 1,
            Self::GaussianMixture { means, .. } => means.len(),
            Self::TwoMoons { .. } => 2,
            Self::Checkerboard { cells, .. } => cells * cells / 2,
        }
    }

    pub fn check_label(&self, y: usize) -> Result<()> {
        let k = self.num_labels();
        if y >= k {
            return Err(Error::Label {
                label: y,
                num_labels: k,
            });
        }
        Ok(())
    }

    /// Mean and isotropic std of the Gaussian attached to label `y`.
    pub fn gaussian_component(&self, y: usize) -> Result<(&[f64], f64)> {
        self.check_label(y)?;
        match self {
            Self::GaussianSingle { mean, std } => Ok((mean, *std)),
            Self::GaussianMixture { means, std } => Ok((&means[y], *std)),
            _ => Err(Error::Unsupported(format!(
                "{:?} has no closed-form Gaussian components",
                self.kind()
            ))),
        }
    }

    /// A representative point per label, used as plot targets.
    pub fn label_centers(&self) -> Vec<Vec<f64>> {
        match self {
            Self::GaussianSingle { mean, .. } => vec![mean.clone()],
            Self::GaussianMixture { means, .. } => means.clone(),
            Self::TwoMoons { .. } => vec![vec![0.0, 1.0], vec![1.0, -0.5]],
            Self::Checkerboard { cells, cell } => (0..self.num_labels())
                .map(|y| {
                    let (i, j) = self.dark_cell(*cells, y);
                    let half = *cells as f64 * cell / 2.0;
                    vec![-half + (j as f64 + 0.5) * cell, -half + (i as f64 + 0.5) * cell]
                })
                .collect(),
        }
    }

    fn dark_cell(&self, cells: usize, y: usize) -> (usize, usize) {
        // Dark cells are those with (row + col) even; enumerate row-major.
        let per_row = cells / 2;
        let row = y / per_row;
        let col = 2 * (y % per_row) + (row % 2);
        (row, col)
    }

    /// Draw `x0 ~ p_0(·|y)`.
    pub fn sample_data(&self, y: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.check_label(y)?;
        Ok(match self {
            Self::GaussianSingle { mean, std } => gaussian_draw(mean, *std, rng),
            Self::GaussianMixture { means, std } => gaussian_draw(&means[y], *std, rng),
            Self::TwoMoons { noise } => {
                let a = std::f64::consts::PI * rng.uniform();
                let (bx, by) = if y == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                let nx = rng.standard_normal();
                let ny = rng.standard_normal();
                vec![2.0 * (bx - 0.5) + noise * nx, 2.0 * (by - 0.25) + noise * ny]
            }
            Self::Checkerboard { cells, cell } => {
                let (row, col) = self.dark_cell(*cells, y);
                let half = *cells as f64 * cell / 2.0;
                let u = rng.uniform();
                let v = rng.uniform();
                vec![-half + (col as f64 + u) * cell, -half + (row as f64 + v) * cell]
            }
        })
    }

    /// Draw `(x0, x1)` with `x0 ~ p_0(·|y)` and independent `x1 ~ N(0, I)`.
    pub fn sample_pair(&self, y: usize, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
        let x0 = self.sample_data(y, rng)?;
        let x1 = sample_standard_normal(rng, self.dim());
        Ok((x0, x1))
    }

    pub fn sample_path_point(&self, y: usize, t: f64, rng: &mut RngStream) -> Result<PathPoint> {
        let (x0, x1) = self.sample_pair(y, rng)?;
        let x_t = interpolate(&x0, &x1, t)?;
        Ok(PathPoint { x_t, t, x0, x1, y })
    }

    /// `E[x0 − x1 | x_t = x, cond]` for the Gaussian kinds.
    pub fn oracle_velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        check_unit("t", t)?;
        let (means, std): (Vec<&[f64]>, f64) = match self {
            Self::GaussianSingle { mean, std } => (vec![mean.as_slice()], *std),
            Self::GaussianMixture { means, std } => (means.iter().map(Vec::as_slice).collect(), *std),
            _ => {
                return Err(Error::Unsupported(format!(
                    "oracle velocity is only available for Gaussian datasets, not {:?}",
                    self.kind()
                )))
            }
        };
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        match cond {
            Condition::Label(y) => {
                self.check_label(y)?;
                Ok(gaussian_posterior_velocity(means[y], std, x, t))
            }
            Condition::Null => {
                let var = path_variance(std, t);
                let s = 1.0 - t;
                // log-weights up to a shared constant, then softmax
                let logw: Vec<f64> = means
                    .iter()
                    .map(|m| {
                        let d2: f64 = x.iter().zip(m.iter()).map(|(xi, mi)| (xi - s * mi).powi(2)).sum();
                        -d2 / (2.0 * var)
                    })
                    .collect();
                let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut v = vec![0.0; x.len()];
                for (m, wk) in means.iter().zip(&w) {
                    let vk = gaussian_posterior_velocity(m, std, x, t);
                    for (acc, vi) in v.iter_mut().zip(&vk) {
                        *acc += wk / total * vi;
                    }
                }
                Ok(v)
            }
        }
    }

    /// Exact marginal `(mean, per-coordinate variance)` of `x_t` given `y`.
    pub fn oracle_marginal(&self, t: f64, y: usize) -> Result<(Vec<f64>, f64)> {
        check_unit("t", t)?;
        let (mean, std) = self.gaussian_component(y)?;
        Ok((mean.iter().map(|m| (1.0 - t) * m).collect(), path_variance(std, t)))
    }
}

fn gaussian_draw(mean: &[f64], std: f64, rng: &mut RngStream) -> Vec<f64> {
    mean.iter().map(|m| m + std * rng.standard_normal()).collect()
}

fn path_variance(std: f64, t: f64) -> f64 {
    (1.0 - t).powi(2) * std * std + t * t
}

fn gaussian_posterior_velocity(mean: &[f64], std: f64, x: &[f64], t: f64) -> Vec<f64> {
    let var = path_variance(std, t);
    let s = 1.0 - t;
    let c = if var > 0.0 { (s * std * std - t) / var } else { 1.0 };
    mean.iter().zip(x).map(|(m, xi)| m + c * (xi - s * m)).collect()
}

fn check_unit(what: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range {
            what,
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_unit("t", t)?;
    if x0.len() != x1.len() {
        return Err(Error::Dimension {
            expected: x0.len(),
            actual: x1.len(),
        });
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Data-direction regression target `x0 − x1`.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| a - b).collect()
}

/// The closed-form conditional-expectation field of a Gaussian dataset.
#[derive(Debug, Clone)]
pub struct OracleField {
    dataset: ConditionalDataset,
}

impl OracleField {
    pub fn new(dataset: ConditionalDataset) -> Result<Self> {
        dataset.gaussian_component(0)?;
        Ok(Self { dataset })
    }

    pub fn dataset(&self) -> &ConditionalDataset {
        &self.dataset
    }
}

impl VelocityField for OracleField {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn num_labels(&self) -> usize {
        self.dataset.num_labels()
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        self.dataset.oracle_velocity(x, t, cond)
    }
}
