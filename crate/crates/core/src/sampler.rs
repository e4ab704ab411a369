//! Euler integration from noise (`t = 1`) to data (`t = 0`) under a
//! guidance rule, with optional trajectory and reference-step recording.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::guidance::{GuidanceStrategy, StepDiagnostics, StrategyState};
use crate::numerics::{all_finite, sample_standard_normal, RngStream};

const SAMPLER_STREAM: u64 = 0x5A3F;

fn default_steps() -> usize {
    28
}

fn default_chains() -> usize {
    200
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    /// Two-stage Heun. The last step, whose end point is `t = 0`, falls back
    /// to Euler so that Rect-CFG++ never sees a negative mid-point.
    Heun,
}

/// Which label each chain is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Labels {
    Fixed(usize),
    /// Chain `i` uses label `i mod K`.
    #[default]
    Cycle,
}

impl Labels {
    pub fn label_for(&self, chain: usize, num_labels: usize) -> usize {
        match *self {
            Labels::Fixed(y) => y,
            Labels::Cycle => chain % num_labels.max(1),
        }
    }
}

impl Serialize for Labels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Labels::Fixed(y) => s.serialize_u64(*y as u64),
            Labels::Cycle => s.serialize_str("cycle"),
        }
    }
}

impl<'de> Deserialize<'de> for Labels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(y) => Ok(Labels::Fixed(y)),
            Raw::Word(w) if w == "cycle" => Ok(Labels::Cycle),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "label must be an index or \"cycle\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    /// Explicit decreasing grid from 1 to 0; overrides `n_steps` when set.
    #[serde(default)]
    pub time_grid: Option<Vec<f64>>,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default)]
    pub labels: Labels,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default)]
    pub record_reference: bool,
    /// Fail the whole run when any chain goes non-finite.
    #[serde(default = "default_true")]
    pub strict: bool,
    #[serde(default)]
    pub integrator: Integrator,
    /// Taken from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: default_steps(),
            time_grid: None,
            n_chains: default_chains(),
            labels: Labels::Cycle,
            record_trajectory: false,
            record_reference: false,
            strict: true,
            integrator: Integrator::Euler,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// The validated time grid `t_0 = 1 > t_1 > … > t_N = 0`.
    pub fn grid(&self) -> Result<Vec<f64>> {
        match &self.time_grid {
            Some(g) => {
                validate_grid(g)?;
                Ok(g.clone())
            }
            None => uniform_grid(self.n_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be >= 1".into()));
        }
        self.grid().map(|_| ())
    }
}

/// `t_k = 1 − k/N` for `k = 0..=N`.
pub fn uniform_grid(n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    let n = n_steps as f64;
    Ok((0..=n_steps).map(|k| 1.0 - k as f64 / n).collect())
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Config("time grid needs at least two points".into()));
    }
    if grid[0] != 1.0 || grid[grid.len() - 1] != 0.0 {
        return Err(Error::Config("time grid must start at 1 and end at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("time grid must be strictly decreasing".into()));
    }
    Ok(())
}

/// `x + Δt·v̂`. A non-finite result is reported against `step`.
pub fn ode_update(x: &[f64], v_hat: &[f64], dt: f64, step: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if x.len() != v_hat.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: v_hat.len(),
        });
    }
    let out: Vec<f64> = x.iter().zip(v_hat).map(|(a, v)| a + dt * v).collect();
    if !all_finite(&out) {
        return Err(Error::Numeric { step });
    }
    Ok(out)
}

/// The purely conditional Euler step `x + Δt·v(x, t, y)`.
pub fn conditional_reference_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
) -> Result<Vec<f64>> {
    let v = field.velocity(x, t, Condition::Label(y))?;
    Ok(x.iter().zip(&v).map(|(a, v)| a + dt * v).collect())
}

/// A recorded chain: `N + 1` states, `N` step diagnostics and optionally
/// the conditional reference step launched from each of the first `N`
/// states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub label: usize,
    pub states: Vec<(f64, Vec<f64>)>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub reference_states: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub chain: usize,
    pub label: usize,
    pub final_point: Vec<f64>,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Successful chains in chain order.
    pub chains: Vec<ChainResult>,
    /// Chains that went non-finite (lenient mode only) with their errors.
    pub failed: Vec<(usize, String)>,
}

impl SampleOutput {
    pub fn final_points(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.final_point.clone()).collect()
    }

    pub fn trajectories(&self) -> Vec<&Trajectory> {
        self.chains.iter().filter_map(|c| c.trajectory.as_ref()).collect()
    }
}

/// Random streams of one chain. The initial noise and any corrector noise
/// come from separate substreams, so rules that draw no noise share
/// identical starting points.
fn chain_streams(seed: u64, chain: usize) -> (RngStream, RngStream) {
    let root = RngStream::new(seed, SAMPLER_STREAM).split(chain as u64);
    (root.split(0), root.split(1))
}

/// Draw the starting point of `chain` exactly as [`sample`] does.
pub fn initial_point(seed: u64, chain: usize, dim: usize) -> Vec<f64> {
    sample_standard_normal(&mut chain_streams(seed, chain).0, dim)
}

/// Integrate `config.n_chains` chains in parallel.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    strategy.validate()?;
    config.validate()?;
    let grid = config.grid()?;
    let k = field.num_labels();
    if let Labels::Fixed(y) = config.labels {
        if y >= k {
            return Err(Error::Label {
                label: y,
                num_labels: k,
            });
        }
    }
    let results: Vec<Result<ChainResult>> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| run_chain(field, strategy, config, &grid, chain, config.labels.label_for(chain, k)))
        .collect();
    let mut out = SampleOutput {
        chains: Vec::with_capacity(results.len()),
        failed: Vec::new(),
    };
    for (chain, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => out.chains.push(c),
            Err(e @ Error::Numeric { .. }) if !config.strict => out.failed.push((chain, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn run_chain<F: VelocityField + ?Sized>(
    field: &F,
    strategy: &GuidanceStrategy,
    config: &SamplerConfig,
    grid: &[f64],
    chain: usize,
    y: usize,
) -> Result<ChainResult> {
    let (mut init, mut noise) = chain_streams(config.seed, chain);
    let mut x = sample_standard_normal(&mut init, field.dim());
    let mut state = StrategyState::default();
    let n = grid.len() - 1;
    let mut states = Vec::new();
    let mut diagnostics = Vec::new();
    let mut references = Vec::new();
    if config.record_trajectory {
        states.reserve(n + 1);
        states.push((grid[0], x.clone()));
    }
    for step in 0..n {
        let (t, t_next) = (grid[step], grid[step + 1]);
        let dt = t - t_next;
        if config.record_reference {
            references.push(conditional_reference_step(field, &x, t, dt, y)?);
        }
        let (v1, diag) = strategy.velocity(field, &x, t, dt, y, &mut state, &mut noise)?;
        let v = match config.integrator {
            Integrator::Heun if step + 1 < n => {
                let x_pred = ode_update(&x, &v1, dt, step)?;
                let (v2, _) = strategy.velocity(field, &x_pred, t_next, dt, y, &mut state, &mut noise)?;
                v1.iter().zip(&v2).map(|(a, b)| 0.5 * (a + b)).collect()
            }
            _ => v1,
        };
        x = ode_update(&x, &v, dt, step)?;
        if config.record_trajectory {
            states.push((t_next, x.clone()));
            diagnostics.push(diag);
        }
    }
    let trajectory = config.record_trajectory.then(|| Trajectory {
        label: y,
        states,
        diagnostics,
        reference_states: config.record_reference.then_some(references),
    });
    Ok(ChainResult {
        chain,
        label: y,
        final_point: x,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{ConditionalDataset, OracleField};
    use crate::numerics::{l2_norm, mean, sub};
    use crate::CountingField;

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

    /// Blows up once `t` drops below 0.5 for odd-indexed starting signs.
    struct Explosive;

    impl VelocityField for Explosive {
        fn dim(&self) -> usize {
            1
        }
        fn num_labels(&self) -> usize {
            1
        }
        fn velocity(&self, x: &[f64], t: f64, _c: Condition) -> Result<Vec<f64>> {
            Ok(vec![if t < 0.5 && x[0] > 0.0 { f64::INFINITY } else { 0.0 }])
        }
    }

    fn oracle() -> OracleField {
        OracleField::new(ConditionalDataset::gaussian_single(vec![2.0, 0.0], 0.5).unwrap()).unwrap()
    }

    #[test]
    fn ode_update_examples() {
        assert_eq!(ode_update(&[1.0, 2.0], &[0.0, 0.0], 0.3, 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(ode_update(&[0.0, 0.0], &[1.0, 2.0], 0.1, 0).unwrap(), vec![0.1, 0.2]);
        assert!(matches!(
            ode_update(&[0.0], &[f64::NAN], 0.1, 7),
            Err(Error::Numeric { step: 7 })
        ));
        assert!(ode_update(&[0.0], &[1.0], 0.0, 0).is_err());
    }

    #[test]
    fn constant_velocity_moves_by_exactly_its_value() {
        let c = vec![0.3, -1.7];
        let cfg = SamplerConfig {
            n_steps: 16,
            n_chains: 5,
            seed: 9,
            ..SamplerConfig::default()
        };
        let out = sample(&Const(c.clone()), &GuidanceStrategy::None, &cfg).unwrap();
        for r in &out.chains {
            let x0 = initial_point(9, r.chain, 2);
            for i in 0..2 {
                assert!((r.final_point[i] - (x0[i] + c[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_oracle_step_lands_on_the_mean() {
        let cfg = SamplerConfig {
            n_steps: 1,
            n_chains: 4,
            ..SamplerConfig::default()
        };
        let out = sample(&oracle(), &GuidanceStrategy::None, &cfg).unwrap();
        for r in &out.chains {
            assert!(l2_norm(&sub(&r.final_point, &[2.0, 0.0])) < 1e-12);
        }
    }

    #[test]
    fn oracle_sampling_recovers_the_mean() {
        let cfg = SamplerConfig {
            n_chains: 10_000,
            seed: 3,
            ..SamplerConfig::default()
        };
        let out = sample(&oracle(), &GuidanceStrategy::None, &cfg).unwrap();
        let m = mean(&out.final_points());
        assert!(l2_norm(&sub(&m, &[2.0, 0.0])) < 0.05, "{m:?}");
    }

    #[test]
    fn reduction_lattice_is_bit_identical() {
        let cfg = SamplerConfig {
            n_chains: 50,
            seed: 4,
            ..SamplerConfig::default()
        };
        let f = oracle();
        let a = sample(&f, &GuidanceStrategy::None, &cfg).unwrap().final_points();
        let b = sample(&f, &GuidanceStrategy::Cfg { omega: 1.0 }, &cfg)
            .unwrap()
            .final_points();
        let c = sample(&f, &GuidanceStrategy::rect(0.0, 1.0), &cfg)
            .unwrap()
            .final_points();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn recording_shapes_and_reference_identity() {
        let cfg = SamplerConfig {
            n_steps: 10,
            n_chains: 3,
            record_trajectory: true,
            record_reference: true,
            ..SamplerConfig::default()
        };
        let f = oracle();
        let out = sample(&f, &GuidanceStrategy::None, &cfg).unwrap();
        for r in &out.chains {
            let tr = r.trajectory.as_ref().unwrap();
            assert_eq!(tr.states.len(), 11);
            assert_eq!(tr.diagnostics.len(), 10);
            let refs = tr.reference_states.as_ref().unwrap();
            assert_eq!(refs.len(), 10);
            for k in 0..10 {
                assert_eq!(refs[k], tr.states[k + 1].1);
            }
            assert_eq!(tr.states[0].0, 1.0);
            assert_eq!(tr.states[10].0, 0.0);
        }
    }

    #[test]
    fn runs_are_deterministic_and_count_evaluations() {
        let cfg = SamplerConfig {
            n_steps: 7,
            n_chains: 13,
            seed: 21,
            ..SamplerConfig::default()
        };
        let f = CountingField::new(oracle());
        let s = GuidanceStrategy::rect(1.0, 1.0);
        let a = sample(&f, &s, &cfg).unwrap();
        assert_eq!(f.count(), 13 * 7 * 3);
        let b = sample(&f, &s, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_and_lenient_failure_policies() {
        let cfg = SamplerConfig {
            n_steps: 4,
            n_chains: 20,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            sample(&Explosive, &GuidanceStrategy::None, &cfg),
            Err(Error::Numeric { step: 3 })
        ));
        let lenient = SamplerConfig { strict: false, ..cfg };
        let out = sample(&Explosive, &GuidanceStrategy::None, &lenient).unwrap();
        assert!(!out.failed.is_empty());
        assert_eq!(out.failed.len() + out.chains.len(), 20);
        assert!(out.chains.iter().all(|c| c.final_point[0] <= 0.0));
    }

    #[test]
    fn heun_is_exact_for_constant_fields_and_finishes() {
        let cfg = SamplerConfig {
            n_steps: 5,
            n_chains: 2,
            integrator: Integrator::Heun,
            ..SamplerConfig::default()
        };
        let f = Const(vec![1.0]);
        let out = sample(&f, &GuidanceStrategy::rect(1.0, 1.0), &cfg).unwrap();
        for r in &out.chains {
            assert!((r.final_point[0] - initial_point(0, r.chain, 1)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_validation() {
        assert_eq!(uniform_grid(4).unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(uniform_grid(0).is_err());
        assert!(validate_grid(&[1.0, 0.7, 0.2, 0.0]).is_ok());
        assert!(validate_grid(&[1.0, 0.2, 0.2, 0.0]).is_err());
        assert!(validate_grid(&[0.9, 0.0]).is_err());
        assert!(validate_grid(&[1.0, 0.1]).is_err());
        let g = uniform_grid(28).unwrap();
        let total: f64 = g.windows(2).map(|w| w[0] - w[1]).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn labels_config() {
        assert_eq!(serde_json::from_str::<Labels>("3").unwrap(), Labels::Fixed(3));
        assert_eq!(serde_json::from_str::<Labels>("\"cycle\"").unwrap(), Labels::Cycle);
        assert!(serde_json::from_str::<Labels>("\"all\"").is_err());
        assert_eq!(Labels::Cycle.label_for(10, 8), 2);
        let cfg = SamplerConfig {
            labels: Labels::Fixed(1),
            ..SamplerConfig::default()
        };
        assert!(matches!(
            sample(&oracle(), &GuidanceStrategy::None, &cfg),
            Err(Error::Label { .. })
        ));
    }
}
