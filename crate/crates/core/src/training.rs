//! Conditional flow-matching training with random condition dropout.
//!
//! One epoch is one optimizer step on a freshly drawn batch; the data
//! distributions are synthetic, so there is no finite dataset to cycle.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::datasets::{target_velocity, ConditionalDataset};
use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::model::MlpVelocityField;
use crate::numerics::RngStream;

/// Items per parallel work unit. Partial gradients are summed in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 16;

const TRAIN_STREAM: u64 = 0x7EA1;
const PROBE_STREAM: u64 = 0x0AC1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_p_uncond")]
    pub p_uncond: f64,
    /// Taken from the run-level seed, never from the `train` section.
    #[serde(skip)]
    pub seed: u64,
    /// Oracle-RMSE evaluation period in epochs; 0 disables evaluation.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_epochs() -> usize {
    2000
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_p_uncond() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            p_uncond: default_p_uncond(),
            seed: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "p_uncond must lie in [0, 1], got {}",
                self.p_uncond
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(epoch, mean batch loss)`
    pub loss: Vec<(usize, f64)>,
    /// `(epoch, RMSE against the closed-form field)`; empty without an oracle
    pub oracle_rmse: Vec<(usize, f64)>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss.last().map(|&(_, l)| l)
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    for n in [grads.len(), state.m.len()] {
        if n != params.len() {
            return Err(Error::Shape {
                expected: params.len(),
                actual: n,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

struct TrainingItem {
    x_t: Vec<f64>,
    t: f64,
    cond: Condition,
    target: Vec<f64>,
}

fn draw_item(
    dataset: &ConditionalDataset,
    k: usize,
    p_uncond: f64,
    rng: &RngStream,
    slot: usize,
    batch_size: usize,
) -> Result<TrainingItem> {
    // Slots 2j and 2j+1 share (y, x0) and use mirrored noise x1 / -x1.
    let mut r = rng.split((slot / 2) as u64);
    let y = r.index(k);
    let (x0, mut x1) = dataset.sample_pair(y, &mut r)?;
    if slot % 2 == 1 {
        x1.iter_mut().for_each(|v| *v = -*v);
    }
    let mut r = rng.split(slot as u64 + (1 << 40));
    // Stratified time: slot i draws t uniformly from [i/B, (i+1)/B).
    let t = (slot as f64 + r.uniform()) / batch_size as f64;
    let cond = if r.bernoulli(p_uncond) {
        Condition::Null
    } else {
        Condition::Label(y)
    };
    let x_t: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Ok(TrainingItem {
        x_t,
        t,
        cond,
        target: target_velocity(&x0, &x1),
    })
}

/// The flow-matching objective of any field on the batch `cfm_loss` would
/// draw from the same stream. No gradient.
pub fn cfm_objective<F: VelocityField>(
    field: &F,
    dataset: &ConditionalDataset,
    batch_size: usize,
    p_uncond: f64,
    rng: &RngStream,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let k = dataset.num_labels();
    let mut total = 0.0;
    for i in 0..batch_size {
        let item = draw_item(dataset, k, p_uncond, rng, i, batch_size)?;
        let v = field.velocity(&item.x_t, item.t, item.cond)?;
        total += v.iter().zip(&item.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / batch_size as f64)
}

/// Mean over a batch of `‖v(x_t, t, ỹ) − (x0 − x1)‖²` and its gradient.
///
/// Item `i` draws from `rng.split(i)`: a label, a data/noise pair, `t ~ U[0, 1]`
/// and the dropout coin that replaces the label by the null condition.
pub fn cfm_loss(
    field: &MlpVelocityField,
    dataset: &ConditionalDataset,
    batch_size: usize,
    p_uncond: f64,
    rng: &RngStream,
) -> Result<(f64, Vec<f64>)> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n_params = field.num_params();
    let k = dataset.num_labels();
    let partials: Vec<Result<(f64, Vec<f64>)>> = (0..batch_size.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(batch_size) {
                let item = draw_item(dataset, k, p_uncond, rng, i, batch_size)?;
                loss += field.forward_backward(&item.x_t, item.t, item.cond, &item.target, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    // forward_backward accumulates ∂(½‖r‖²); the mean of ‖r‖² needs 2/B.
    let b = batch_size as f64;
    grad.iter_mut().for_each(|g| *g *= 2.0 / b);
    Ok((loss / b, grad))
}

/// Fixed probe set for comparing a learned field with the closed-form one:
/// on-path points `(x_t, t, y)` inside the 99%-mass ellipsoid of the
/// conditional marginal at `t`.
#[derive(Debug, Clone)]
pub struct OracleProbes {
    pub points: Vec<(Vec<f64>, f64, usize)>,
    pub targets: Vec<Vec<f64>>,
}

impl OracleProbes {
    pub fn sample(dataset: &ConditionalDataset, n: usize, seed: u64) -> Result<Self> {
        let d = dataset.dim();
        let radius2 = ChiSquared::new(d as f64)
            .map_err(|e| Error::Config(e.to_string()))?
            .inverse_cdf(0.99);
        let mut rng = RngStream::new(seed, PROBE_STREAM);
        let k = dataset.num_labels();
        let mut points = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        while points.len() < n {
            let y = rng.index(k);
            let t = rng.uniform();
            let p = dataset.sample_path_point(y, t, &mut rng)?;
            let (m, var) = dataset.oracle_marginal(t, y)?;
            let r2: f64 = p.x_t.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / var;
            if r2 <= radius2 {
                targets.push(dataset.oracle_velocity(&p.x_t, t, Condition::Label(y))?);
                points.push((p.x_t, t, y));
            }
        }
        Ok(Self { points, targets })
    }

    /// Root mean squared vector error of `field` on the probe set.
    pub fn rmse(&self, field: &MlpVelocityField) -> Result<f64> {
        let errs: Vec<Result<f64>> = self
            .points
            .par_iter()
            .zip(&self.targets)
            .map(|((x, t, y), target)| {
                let v = field.forward(x, *t, Condition::Label(*y))?;
                Ok(v.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            })
            .collect();
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok((total / self.points.len() as f64).sqrt())
    }
}

/// Train `field` in place. When `probes` is given the oracle RMSE is
/// recorded every `eval_every` epochs and after the final epoch.
pub fn train(
    field: &mut MlpVelocityField,
    dataset: &ConditionalDataset,
    config: &TrainConfig,
    probes: Option<&OracleProbes>,
) -> Result<TrainReport> {
    config.validate()?;
    if field.dim() != dataset.dim() || field.num_labels() != dataset.num_labels() {
        return Err(Error::Config(format!(
            "model shape (d={}, K={}) does not match dataset (d={}, K={})",
            field.dim(),
            field.num_labels(),
            dataset.dim(),
            dataset.num_labels()
        )));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut state = AdamState::new(field.num_params());
    let root = RngStream::new(config.seed, TRAIN_STREAM);
    let mut last_finite = None;
    for epoch in 0..config.epochs {
        let (loss, grad) = cfm_loss(
            field,
            dataset,
            config.batch_size,
            config.p_uncond,
            &root.split(epoch as u64),
        )?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NanLoss { epoch, last_finite });
        }
        adam_step(field.params_mut(), &grad, &mut state, config)?;
        report.loss.push((epoch, loss));
        last_finite = Some(epoch);
        if let Some(p) = probes {
            let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
            if due || epoch + 1 == config.epochs {
                report.oracle_rmse.push((epoch, p.rmse(field)?));
            }
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
