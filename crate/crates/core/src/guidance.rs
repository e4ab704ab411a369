//! Per-step effective velocities for the guidance rules.
//!
//! Every rule is a pure function of the field, the current state and the
//! step size, except APG, which carries a momentum vector per chain
//! ([`StrategyState`]). Diagnostics describe how far the guided Euler step
//! lands from the purely conditional one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VelocityField};
use crate::numerics::{dot_unchecked, l2_norm, sample_standard_normal, scale, sub, RngStream};

fn default_gamma() -> f64 {
    1.0
}

/// Shape of the corrector weight `α(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSchedule {
    /// `λ_max (1 − t)^γ`.
    #[default]
    Power,
    /// `λ_max` at every time.
    Constant,
    /// Piecewise-linear interpolation through `(t, α)` knots, held constant
    /// outside the knot range. `λ_max` is ignored.
    Table { knots: Vec<(f64, f64)> },
}

/// A guidance rule and its parameters. Serialized with a `"name"` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceStrategy {
    None,
    Cfg {
        omega: f64,
    },
    RectCfgpp {
        lambda_max: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        sigma_noise: f64,
        #[serde(default)]
        schedule: AlphaSchedule,
    },
    Apg {
        eta: f64,
        r: f64,
        beta: f64,
    },
    CfgZeroStar {
        omega: f64,
        #[serde(default)]
        zero_init_steps: usize,
    },
}

impl GuidanceStrategy {
    pub fn rect(lambda_max: f64, gamma: f64) -> Self {
        GuidanceStrategy::RectCfgpp {
            lambda_max,
            gamma,
            sigma_noise: 0.0,
            schedule: AlphaSchedule::Power,
        }
    }

    /// The config name of the rule.
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceStrategy::None => "none",
            GuidanceStrategy::Cfg { .. } => "cfg",
            GuidanceStrategy::RectCfgpp { .. } => "rect_cfgpp",
            GuidanceStrategy::Apg { .. } => "apg",
            GuidanceStrategy::CfgZeroStar { .. } => "cfg_zero_star",
        }
    }

    /// A short label including the main parameter, e.g. `cfg(omega=3)`.
    pub fn label(&self) -> String {
        match self {
            GuidanceStrategy::None => "none".into(),
            GuidanceStrategy::Cfg { omega } => format!("cfg(omega={omega})"),
            GuidanceStrategy::RectCfgpp { lambda_max, gamma, .. } => {
                format!("rect_cfgpp(lambda_max={lambda_max},gamma={gamma})")
            }
            GuidanceStrategy::Apg { eta, r, beta } => format!("apg(eta={eta},r={r},beta={beta})"),
            GuidanceStrategy::CfgZeroStar { omega, zero_init_steps } => {
                format!("cfg_zero_star(omega={omega},zero_init_steps={zero_init_steps})")
            }
        }
    }

    /// Field evaluations per step.
    pub fn nfe_per_step(&self) -> u32 {
        match self {
            GuidanceStrategy::None => 1,
            GuidanceStrategy::RectCfgpp { .. } => 3,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |what: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be finite, got {v}")))
            }
        };
        match self {
            GuidanceStrategy::None => Ok(()),
            GuidanceStrategy::Cfg { omega } => finite("omega", *omega),
            GuidanceStrategy::RectCfgpp {
                lambda_max,
                gamma,
                sigma_noise,
                schedule,
            } => {
                for (what, v) in [
                    ("lambda_max", *lambda_max),
                    ("gamma", *gamma),
                    ("sigma_noise", *sigma_noise),
                ] {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::Config(format!("{what} must be finite and >= 0, got {v}")));
                    }
                }
                if let AlphaSchedule::Table { knots } = schedule {
                    if knots.is_empty() {
                        return Err(Error::Config("alpha table needs at least one knot".into()));
                    }
                    for w in knots.windows(2) {
                        if !(w[1].0 > w[0].0) {
                            return Err(Error::Config("alpha table times must be strictly increasing".into()));
                        }
                    }
                    for &(t, a) in knots {
                        if !((0.0..=1.0).contains(&t) && a.is_finite() && a >= 0.0) {
                            return Err(Error::Config(format!("bad alpha table knot ({t}, {a})")));
                        }
                    }
                }
                Ok(())
            }
            GuidanceStrategy::Apg { eta, r, beta } => {
                finite("eta", *eta)?;
                if !(r.is_finite() && *r > 0.0) {
                    return Err(Error::Config(format!("r must be > 0, got {r}")));
                }
                if !(0.0..1.0).contains(beta) {
                    return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
                }
                Ok(())
            }
            GuidanceStrategy::CfgZeroStar { omega, .. } => finite("omega", *omega),
        }
    }

    /// One step's effective velocity. `rng` is only drawn from by
    /// Rect-CFG++ with `sigma_noise > 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity<F: VelocityField + ?Sized>(
        &self,
        field: &F,
        x: &[f64],
        t: f64,
        dt: f64,
        y: usize,
        state: &mut StrategyState,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, StepDiagnostics)> {
        let out = match self {
            GuidanceStrategy::None => unguided_velocity(field, x, t, dt, y),
            GuidanceStrategy::Cfg { omega } => cfg_velocity(field, x, t, dt, y, *omega),
            GuidanceStrategy::RectCfgpp {
                lambda_max,
                gamma,
                sigma_noise,
                schedule,
            } => {
                let alpha = schedule_alpha(schedule, t, *lambda_max, *gamma);
                let noise = (*sigma_noise > 0.0).then_some((*sigma_noise, rng));
                rect_cfgpp_with_alpha(field, x, t, dt, y, alpha, noise)
            }
            GuidanceStrategy::Apg { eta, r, beta } => {
                apg_velocity(field, x, t, dt, y, *eta, *r, *beta, &mut state.apg_momentum)
            }
            GuidanceStrategy::CfgZeroStar { omega, zero_init_steps } => {
                cfg_zero_star_velocity(field, x, t, dt, y, *omega, state.step_index, *zero_init_steps)
            }
        };
        state.step_index += 1;
        out
    }
}

/// Mutable per-chain state: the step counter and APG's momentum.
#[derive(Debug, Clone, Default)]
pub struct StrategyState {
    pub step_index: usize,
    pub apg_momentum: Option<Vec<f64>>,
}

/// What one guided step did, relative to the plain conditional Euler step.
///
/// `alpha` is the weight applied to the guidance difference (the corrector
/// weight for Rect-CFG++, `|ω − 1|` for CFG, `η` for APG, 0 otherwise).
/// `deviation_from_conditional` is `‖Δt·(v̂ − v_c)‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub alpha: f64,
    pub dv_norm: f64,
    pub v_c_norm: f64,
    pub deviation_from_conditional: f64,
    pub nfe: u32,
}

/// `λ_max (1 − t)^γ`, with `0^0 = 1`.
pub fn alpha_schedule(t: f64, lambda_max: f64, gamma: f64) -> f64 {
    lambda_max * (1.0 - t).powf(gamma)
}

fn schedule_alpha(schedule: &AlphaSchedule, t: f64, lambda_max: f64, gamma: f64) -> f64 {
    match schedule {
        AlphaSchedule::Power => alpha_schedule(t, lambda_max, gamma),
        AlphaSchedule::Constant => lambda_max,
        AlphaSchedule::Table { knots } => {
            let (first, last) = (knots[0], knots[knots.len() - 1]);
            if t <= first.0 {
                return first.1;
            }
            if t >= last.0 {
                return last.1;
            }
            let i = knots.partition_point(|k| k.0 <= t);
            let (a, b) = (knots[i - 1], knots[i]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range {
            what: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

fn diagnostics(alpha: f64, dv_norm: f64, v_c: &[f64], v_hat: &[f64], dt: f64, nfe: u32) -> StepDiagnostics {
    let gap: Vec<f64> = v_hat.iter().zip(v_c).map(|(a, b)| dt * (a - b)).collect();
    StepDiagnostics {
        alpha,
        dv_norm,
        v_c_norm: l2_norm(v_c),
        deviation_from_conditional: l2_norm(&gap),
        nfe,
    }
}

/// Plain conditional velocity, one evaluation.
pub fn unguided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_time(t)?;
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let d = diagnostics(0.0, 0.0, &v_c, &v_c, dt, 1);
    Ok((v_c, d))
}

/// `(1 − ω) v_u + ω v_c`, two evaluations.
pub fn cfg_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
    omega: f64,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_time(t)?;
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let v_u = field.velocity(x, t, Condition::Null)?;
    let v: Vec<f64> = v_c
        .iter()
        .zip(&v_u)
        .map(|(c, u)| (1.0 - omega) * u + omega * c)
        .collect();
    let dv_norm = l2_norm(&sub(&v_c, &v_u));
    let d = diagnostics((omega - 1.0).abs(), dv_norm, &v_c, &v, dt, 2);
    Ok((v, d))
}

/// The predictor–corrector rule with the power schedule.
///
/// Predicts `x̃ = x + (Δt/2) v_c(x, t)`, optionally perturbs it with
/// `N(0, σ²I)` noise, and corrects with the guidance difference measured at
/// `(x̃, t − Δt/2)`: `v̂ = v_c + α(t) (v_c(x̃) − v_u(x̃))`. Three evaluations.
#[allow(clippy::too_many_arguments)]
pub fn rect_cfgpp_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
    lambda_max: f64,
    gamma: f64,
    sigma_noise: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    let alpha = alpha_schedule(t, lambda_max, gamma);
    let noise = (sigma_noise > 0.0).then_some((sigma_noise, rng));
    rect_cfgpp_with_alpha(field, x, t, dt, y, alpha, noise)
}

fn rect_cfgpp_with_alpha<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
    alpha: f64,
    noise: Option<(f64, &mut RngStream)>,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_time(t)?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let mid = t - dt / 2.0;
    if mid < 0.0 {
        return Err(Error::Schedule { t, dt, mid });
    }
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let mut x_tilde: Vec<f64> = x.iter().zip(&v_c).map(|(a, v)| a + 0.5 * dt * v).collect();
    if let Some((sigma, rng)) = noise {
        let eps = sample_standard_normal(rng, x.len());
        x_tilde.iter_mut().zip(&eps).for_each(|(a, e)| *a += sigma * e);
    }
    let v_c_half = field.velocity(&x_tilde, mid, Condition::Label(y))?;
    let v_u_half = field.velocity(&x_tilde, mid, Condition::Null)?;
    let dv = sub(&v_c_half, &v_u_half);
    let v: Vec<f64> = v_c.iter().zip(&dv).map(|(c, d)| c + alpha * d).collect();
    let d = StepDiagnostics {
        alpha,
        dv_norm: l2_norm(&dv),
        v_c_norm: l2_norm(&v_c),
        deviation_from_conditional: l2_norm(&scale(&dv, dt * alpha)),
        nfe: 3,
    };
    Ok((v, d))
}

/// Momentum-smoothed, orthogonally projected and norm-saturated guidance.
///
/// `m ← β m + (1 − β)(v_c − v_u)`; the component of `m` parallel to `v_c` is
/// dropped, the rest is clipped to norm `r`, scaled by `η` and added to
/// `v_c`. A `None` momentum starts from zero.
#[allow(clippy::too_many_arguments)]
pub fn apg_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
    eta: f64,
    r: f64,
    beta: f64,
    momentum: &mut Option<Vec<f64>>,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_time(t)?;
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let v_u = field.velocity(x, t, Condition::Null)?;
    let diff = sub(&v_c, &v_u);
    let m = momentum.get_or_insert_with(|| vec![0.0; diff.len()]);
    if m.len() != diff.len() {
        return Err(Error::Dimension {
            expected: m.len(),
            actual: diff.len(),
        });
    }
    m.iter_mut()
        .zip(&diff)
        .for_each(|(m, d)| *m = beta * *m + (1.0 - beta) * d);
    let guide = saturate(&orthogonal_part(m, &v_c), r);
    let v: Vec<f64> = v_c.iter().zip(&guide).map(|(c, g)| c + eta * g).collect();
    let d = diagnostics(eta.abs(), l2_norm(&diff), &v_c, &v, dt, 2);
    Ok((v, d))
}

/// `a` minus its projection onto `b`; `a` itself when `b` is (nearly) zero.
pub fn orthogonal_part(a: &[f64], b: &[f64]) -> Vec<f64> {
    let bb = dot_unchecked(b, b);
    if bb.sqrt() < 1e-12 {
        return a.to_vec();
    }
    let c = dot_unchecked(a, b) / bb;
    a.iter().zip(b).map(|(x, y)| x - c * y).collect()
}

/// Rescale `a` to norm `min(‖a‖, r)`.
pub fn saturate(a: &[f64], r: f64) -> Vec<f64> {
    let n = l2_norm(a);
    if n > r {
        scale(a, r / n)
    } else {
        a.to_vec()
    }
}

/// `(1 − ω) s* v_u + ω v_c` with `s* = ⟨v_c, v_u⟩ / ⟨v_u, v_u⟩`, or the
/// zero velocity while `step_index < zero_init_steps`. Both evaluations run
/// on every step, including zeroed ones.
#[allow(clippy::too_many_arguments)]
pub fn cfg_zero_star_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    y: usize,
    omega: f64,
    step_index: usize,
    zero_init_steps: usize,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_time(t)?;
    let v_c = field.velocity(x, t, Condition::Label(y))?;
    let v_u = field.velocity(x, t, Condition::Null)?;
    let dv_norm = l2_norm(&sub(&v_c, &v_u));
    let v = if step_index < zero_init_steps {
        vec![0.0; v_c.len()]
    } else {
        let s = projection_scale(&v_c, &v_u);
        v_c.iter()
            .zip(&v_u)
            .map(|(c, u)| (1.0 - omega) * s * u + omega * c)
            .collect()
    };
    let d = diagnostics(0.0, dv_norm, &v_c, &v, dt, 2);
    Ok((v, d))
}

/// Least-squares `s` minimising `‖v_c − s v_u‖`; 0 when `‖v_u‖ < 1e-12`.
pub fn projection_scale(v_c: &[f64], v_u: &[f64]) -> f64 {
    let uu = dot_unchecked(v_u, v_u);
    if uu.sqrt() < 1e-12 {
        return 0.0;
    }
    dot_unchecked(v_c, v_u) / uu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CountingField;
    use proptest::prelude::*;

    /// `v_c ≡ a`, `v_u ≡ b` everywhere.
    struct ConstField {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl VelocityField for ConstField {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn num_labels(&self) -> usize {
            1
        }
        fn velocity(&self, _x: &[f64], _t: f64, cond: Condition) -> Result<Vec<f64>> {
            Ok(match cond {
                Condition::Label(_) => self.a.clone(),
                Condition::Null => self.b.clone(),
            })
        }
    }

    /// A field that varies in both `x` and `t`, with distinct branches.
    struct Wavy;

    impl VelocityField for Wavy {
        fn dim(&self) -> usize {
            2
        }
        fn num_labels(&self) -> usize {
            1
        }
        fn velocity(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
            let k = if cond == Condition::Null { 0.3 } else { 1.0 };
            Ok(vec![(x[0] * k + t).sin() - x[1], (x[1] * t).cos() * k + x[0] * 0.5])
        }
    }

    fn const_field() -> ConstField {
        ConstField {
            a: vec![1.0, -2.0],
            b: vec![0.5, 3.0],
        }
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_schedule(1.0, 2.0, 1.0), 0.0);
        assert_eq!(alpha_schedule(1.0, 2.0, 0.5), 0.0);
        assert_eq!(alpha_schedule(0.0, 0.7, 3.0), 0.7);
        assert_eq!(alpha_schedule(0.5, 0.5, 1.0), 0.25);
        assert_eq!(alpha_schedule(1.0, 0.9, 0.0), 0.9);
    }

    #[test]
    fn table_schedule_interpolates() {
        let s = AlphaSchedule::Table {
            knots: vec![(0.0, 1.0), (0.5, 3.0), (1.0, 0.0)],
        };
        assert_eq!(schedule_alpha(&s, 0.25, 9.0, 1.0), 2.0);
        assert_eq!(schedule_alpha(&s, 0.75, 9.0, 1.0), 1.5);
        assert_eq!(schedule_alpha(&s, 1.0, 9.0, 1.0), 0.0);
        assert_eq!(schedule_alpha(&AlphaSchedule::Constant, 1.0, 0.4, 1.0), 0.4);
    }

    #[test]
    fn cfg_examples() {
        let f = const_field();
        let (v, _) = cfg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 1.0).unwrap();
        assert_eq!(v, f.a);
        let (v, _) = cfg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 0.0).unwrap();
        assert_eq!(v, f.b);
        let (v, _) = cfg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 3.0).unwrap();
        assert_eq!(v, vec![3.0 * 1.0 - 2.0 * 0.5, 3.0 * -2.0 - 2.0 * 3.0]);
    }

    #[test]
    fn cfg_deviation_is_scaled_guidance_difference() {
        let (omega, dt) = (4.0, 0.05);
        let (_, d) = cfg_velocity(&Wavy, &[0.3, -1.2], 0.6, dt, 0, omega).unwrap();
        let want = dt * (omega - 1.0) * d.dv_norm;
        assert!((d.deviation_from_conditional - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn rect_examples() {
        let f = const_field();
        let mut rng = RngStream::new(0, 0);
        let (v, d) = rect_cfgpp_velocity(&f, &[1.0, 1.0], 0.5, 0.1, 0, 0.0, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(v, f.a);
        assert_eq!(d.deviation_from_conditional, 0.0);
        let (v, d) = rect_cfgpp_velocity(&f, &[7.0, -3.0], 0.5, 0.1, 0, 0.8, 1.0, 0.0, &mut rng).unwrap();
        let alpha = 0.4;
        assert_eq!(d.alpha, alpha);
        for i in 0..2 {
            assert!((v[i] - (f.a[i] + alpha * (f.a[i] - f.b[i]))).abs() < 1e-15);
        }
        let (v, _) = rect_cfgpp_velocity(&Wavy, &[0.2, 0.1], 1.0, 0.1, 0, 5.0, 2.0, 0.0, &mut rng).unwrap();
        assert_eq!(v, Wavy.velocity(&[0.2, 0.1], 1.0, Condition::Label(0)).unwrap());
    }

    #[test]
    fn rect_rejects_negative_midpoint() {
        let mut rng = RngStream::new(0, 0);
        let err = rect_cfgpp_velocity(&Wavy, &[0.0, 0.0], 0.04, 0.1, 0, 1.0, 1.0, 0.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Schedule { .. }));
    }

    #[test]
    fn rect_noise_is_reproducible_and_used() {
        let run = |sigma: f64| {
            let mut rng = RngStream::new(3, 1);
            rect_cfgpp_velocity(&Wavy, &[0.2, 0.1], 0.5, 0.2, 0, 1.0, 1.0, sigma, &mut rng)
                .unwrap()
                .0
        };
        assert_eq!(run(0.3), run(0.3));
        assert_ne!(run(0.3), run(0.0));
    }

    #[test]
    fn apg_examples() {
        let mut m = None;
        let (v, _) = apg_velocity(&Wavy, &[0.4, 0.9], 0.3, 0.1, 0, 0.0, 1.0, 0.5, &mut m).unwrap();
        assert_eq!(v, Wavy.velocity(&[0.4, 0.9], 0.3, Condition::Label(0)).unwrap());

        let same = ConstField {
            a: vec![1.0, 2.0],
            b: vec![1.0, 2.0],
        };
        let mut m = None;
        let (v, _) = apg_velocity(&same, &[0.0, 0.0], 0.3, 0.1, 0, 2.0, 1.0, 0.5, &mut m).unwrap();
        assert_eq!(v, same.a);
        assert_eq!(m.unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn apg_saturates_orthogonal_component() {
        // Δv = [0, 10] is orthogonal to v_c = [1, 0]; r = 1 clips it to [0, 1].
        let f = ConstField {
            a: vec![1.0, 0.0],
            b: vec![1.0, -10.0],
        };
        let mut m = None;
        let (v, _) = apg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 1.0, 1.0, 0.0, &mut m).unwrap();
        assert!((l2_norm(&sub(&v, &f.a)) - 1.0).abs() < 1e-15);
        assert!(dot_unchecked(&sub(&v, &f.a), &f.a).abs() < 1e-15);
    }

    #[test]
    fn apg_momentum_accumulates() {
        let f = ConstField {
            a: vec![1.0, 0.0],
            b: vec![1.0, -1.0],
        };
        let mut m = None;
        apg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 1.0, 10.0, 0.5, &mut m).unwrap();
        assert_eq!(m.as_deref(), Some(&[0.0, 0.5][..]));
        apg_velocity(&f, &[0.0, 0.0], 0.5, 0.1, 0, 1.0, 10.0, 0.5, &mut m).unwrap();
        assert_eq!(m.as_deref(), Some(&[0.0, 0.75][..]));
    }

    #[test]
    fn cfg_zero_star_examples() {
        let same = ConstField {
            a: vec![1.0, 2.0],
            b: vec![1.0, 2.0],
        };
        let (v, _) = cfg_zero_star_velocity(&same, &[0.0, 0.0], 0.5, 0.1, 0, 7.0, 0, 0).unwrap();
        for (a, b) in v.iter().zip(&same.a) {
            assert!((a - b).abs() < 1e-14);
        }
        let orth = ConstField {
            a: vec![1.0, 0.0],
            b: vec![0.0, 2.0],
        };
        let (v, _) = cfg_zero_star_velocity(&orth, &[0.0, 0.0], 0.5, 0.1, 0, 3.0, 0, 0).unwrap();
        assert_eq!(v, vec![3.0, 0.0]);
        let (v, _) = cfg_zero_star_velocity(&orth, &[0.0, 0.0], 0.5, 0.1, 0, 3.0, 0, 1).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert_eq!(projection_scale(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn nfe_per_step_matches_evaluations() {
        let strategies = [
            GuidanceStrategy::None,
            GuidanceStrategy::Cfg { omega: 2.0 },
            GuidanceStrategy::CfgZeroStar {
                omega: 2.0,
                zero_init_steps: 1,
            },
            GuidanceStrategy::Apg {
                eta: 1.0,
                r: 1.0,
                beta: 0.5,
            },
            GuidanceStrategy::rect(1.0, 1.0),
        ];
        for s in strategies {
            let f = CountingField::new(Wavy);
            let mut st = StrategyState::default();
            let mut rng = RngStream::new(0, 0);
            for _ in 0..3 {
                let (_, d) = s.velocity(&f, &[0.1, 0.2], 0.5, 0.1, 0, &mut st, &mut rng).unwrap();
                assert_eq!(d.nfe, s.nfe_per_step());
            }
            assert_eq!(f.count(), 3 * s.nfe_per_step() as u64, "{}", s.name());
        }
    }

    #[test]
    fn strategy_json_round_trip() {
        let s: GuidanceStrategy = serde_json::from_str(r#"{"name":"rect_cfgpp","lambda_max":0.5}"#).unwrap();
        assert_eq!(s, GuidanceStrategy::rect(0.5, 1.0));
        let s: GuidanceStrategy = serde_json::from_str(r#"{"name":"cfg_zero_star","omega":4}"#).unwrap();
        assert_eq!(
            s,
            GuidanceStrategy::CfgZeroStar {
                omega: 4.0,
                zero_init_steps: 0
            }
        );
        assert!(serde_json::from_str::<GuidanceStrategy>(r#"{"name":"cfg","omgea":4}"#).is_err());
        assert!(serde_json::from_str::<GuidanceStrategy>(r#"{"name":"bogus"}"#).is_err());
        for s in [
            GuidanceStrategy::None,
            GuidanceStrategy::Apg {
                eta: 1.0,
                r: 2.0,
                beta: 0.1,
            },
        ] {
            let text = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<GuidanceStrategy>(&text).unwrap(), s);
        }
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(GuidanceStrategy::rect(-1.0, 1.0).validate().is_err());
        assert!(GuidanceStrategy::rect(1.0, -0.5).validate().is_err());
        assert!(GuidanceStrategy::Apg {
            eta: 1.0,
            r: 0.0,
            beta: 0.5
        }
        .validate()
        .is_err());
        assert!(GuidanceStrategy::Apg {
            eta: 1.0,
            r: 1.0,
            beta: 1.0
        }
        .validate()
        .is_err());
        assert!(GuidanceStrategy::Cfg { omega: f64::NAN }.validate().is_err());
        assert!(GuidanceStrategy::rect(1.0, 0.0).validate().is_ok());
    }

    proptest! {
        #[test]
        fn alpha_is_non_increasing(
            lambda in 0.0f64..5.0,
            gamma in 0.0f64..4.0,
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(alpha_schedule(hi, lambda, gamma) <= alpha_schedule(lo, lambda, gamma));
        }

        #[test]
        fn rect_deviation_identity(
            x0 in -3.0f64..3.0,
            x1 in -3.0f64..3.0,
            t in 0.2f64..=1.0,
            dt in 0.01f64..0.4,
            lambda in 0.0f64..3.0,
            gamma in 0.0f64..3.0,
        ) {
            let mut rng = RngStream::new(0, 0);
            let (_, d) = rect_cfgpp_velocity(&Wavy, &[x0, x1], t, dt, 0, lambda, gamma, 0.0, &mut rng).unwrap();
            let want = dt * d.alpha * d.dv_norm;
            prop_assert!((d.deviation_from_conditional - want).abs() <= 1e-12 * want.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn reductions_agree_bitwise(x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, t in 0.1f64..=1.0) {
            let x = [x0, x1];
            let mut rng = RngStream::new(0, 0);
            let (a, _) = unguided_velocity(&Wavy, &x, t, 0.05, 0).unwrap();
            let (b, _) = cfg_velocity(&Wavy, &x, t, 0.05, 0, 1.0).unwrap();
            let (c, _) = rect_cfgpp_velocity(&Wavy, &x, t, 0.05, 0, 0.0, 1.0, 0.0, &mut rng).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }
}
