//! Stopping policies for a main process step.
//!
//! The sensor-driven policy runs a Markov loop over a nine-component state:
//! a simulated sensor reading is pulled towards the hidden requirement with
//! multiplicative noise, averaged into a running estimate, lifted to a
//! safety threshold at quantile `beta`, and the curve is inverted to decide
//! whether the threshold has been reached. The fixed-time policies invert
//! the curve once at a multiple of the expected requirement; the ideal
//! policy inverts it at the true requirement.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvekit::{CumulativeCurve, CurveError};
use crate::randkit::{normal_inverse_cdf, standard_normal_quantile, RandError, RngStream};

/// Main-step energy factor of the company's current practice.
pub const BASELINE_FACTOR: f64 = 1.2;

/// Default hard cap on sensor iterations, as a multiple of the iterations
/// needed to reach the expected requirement.
pub const DEFAULT_ITERATION_CAP_FACTOR: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Rand(#[from] RandError),
    #[error("stopping loop did not terminate within {cap} iterations")]
    IterationCap { cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Continue,
    Terminate,
}

/// One iteration of the sensor-driven loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoppingState {
    pub n: usize,
    /// Energy delivered so far (kWh); zero before the first iteration.
    pub cum_energy: f64,
    /// True requirement, hidden from the controller.
    pub hidden_min_energy: f64,
    pub sensor_reading: f64,
    pub deviation: f64,
    pub estimate: f64,
    pub threshold: f64,
    /// Minutes still needed to reach the threshold; `<= 0` terminates.
    pub remaining_time: f64,
    pub action: Action,
}

/// Policy-level parameters of the sensor-driven approach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbaParams {
    pub beta: f64,
    pub alpha0: f64,
    pub alpha_floor: f64,
}

/// Everything one sensor-driven stopping problem needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbaConfig {
    pub beta: f64,
    pub alpha0: f64,
    pub alpha_floor: f64,
    pub tau: f64,
    pub sigma_estimate: f64,
    pub expected_min_energy: f64,
    pub cv_min_energy: f64,
    pub iteration_cap_factor: f64,
}

impl SbaConfig {
    pub fn new(
        params: SbaParams,
        tau: f64,
        sigma_estimate: f64,
        expected_min_energy: f64,
        cv_min_energy: f64,
    ) -> Result<Self, PolicyError> {
        let cfg = Self {
            beta: params.beta,
            alpha0: params.alpha0,
            alpha_floor: params.alpha_floor,
            tau,
            sigma_estimate,
            expected_min_energy,
            cv_min_energy,
            iteration_cap_factor: DEFAULT_ITERATION_CAP_FACTOR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(self.alpha_floor >= 0.0 && self.alpha_floor <= self.alpha0 && self.alpha0.is_finite())
        {
            return bad(format!(
                "need 0 <= alpha_floor ({}) <= alpha0 ({})",
                self.alpha_floor, self.alpha0
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.sigma_estimate.is_finite() && self.sigma_estimate >= 0.0) {
            return bad(format!(
                "sigma {} must be non-negative",
                self.sigma_estimate
            ));
        }
        if !(self.expected_min_energy.is_finite() && self.expected_min_energy > 0.0) {
            return bad(format!(
                "expected minimum energy {} must be positive",
                self.expected_min_energy
            ));
        }
        if !(self.cv_min_energy.is_finite() && self.cv_min_energy >= 0.0) {
            return bad(format!("cv {} must be non-negative", self.cv_min_energy));
        }
        if self.iteration_cap_factor.is_nan() || self.iteration_cap_factor < 1.0 {
            return bad(format!(
                "iteration cap factor {} below 1",
                self.iteration_cap_factor
            ));
        }
        Ok(())
    }

    /// Threshold spread before any warm-up statistics exist.
    pub fn seed_sigma(expected_min_energy: f64, cv_min_energy: f64) -> f64 {
        cv_min_energy * expected_min_energy
    }
}

/// How the main-step stopping iteration is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicySpec {
    Sba(SbaParams),
    Opt { factor: f64 },
    Baseline,
    Ideal,
}

impl PolicySpec {
    /// Main-step energy factor for the fixed-time policies.
    pub fn main_factor(&self) -> Option<f64> {
        match self {
            PolicySpec::Opt { factor } => Some(*factor),
            PolicySpec::Baseline => Some(BASELINE_FACTOR),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicySpec::Sba(_) => "sba",
            PolicySpec::Opt { .. } => "opt",
            PolicySpec::Baseline => "baseline",
            PolicySpec::Ideal => "ideal",
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            PolicySpec::Opt { factor } if !(factor.is_finite() && *factor > 0.0) => Err(
                PolicyError::Config(format!("OPT factor {factor} must be positive")),
            ),
            PolicySpec::Sba(p) => {
                if !(p.beta > 0.0 && p.beta < 1.0) {
                    return Err(PolicyError::Config(format!(
                        "beta {} outside (0, 1)",
                        p.beta
                    )));
                }
                if !(p.alpha_floor >= 0.0 && p.alpha_floor <= p.alpha0 && p.alpha0.is_finite()) {
                    return Err(PolicyError::Config(format!(
                        "need 0 <= alpha_floor ({}) <= alpha0 ({})",
                        p.alpha_floor, p.alpha0
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Sba(p) => write!(
                f,
                "sba(beta={}, alpha0={}, floor={})",
                p.beta, p.alpha0, p.alpha_floor
            ),
            PolicySpec::Opt { factor } => write!(f, "opt(factor={factor})"),
            PolicySpec::Baseline => write!(f, "baseline(factor={BASELINE_FACTOR})"),
            PolicySpec::Ideal => f.write_str("ideal"),
        }
    }
}

/// Iterations needed to deliver a target; non-positive targets need none.
fn iterations_to(curve: &CumulativeCurve, target: f64) -> Result<usize, CurveError> {
    curve.invert(target.max(0.0))
}

/// Iteration count `L` that anchors the distortion schedule.
pub fn expected_iterations(curve: &CumulativeCurve, cfg: &SbaConfig) -> Result<usize, PolicyError> {
    Ok(curve.invert(cfg.expected_min_energy)?.max(1))
}

pub fn init_state(
    cfg: &SbaConfig,
    curve: &CumulativeCurve,
    phi_draw: f64,
) -> Result<StoppingState, PolicyError> {
    cfg.validate()?;
    if !(phi_draw.is_finite() && phi_draw > 0.0) {
        return Err(PolicyError::Config(format!(
            "requirement {phi_draw} must be positive"
        )));
    }
    let e = cfg.expected_min_energy;
    let t = threshold(e, cfg.beta, cfg.sigma_estimate)?;
    let k0 = iterations_to(curve, t)?;
    let p = remaining_time(k0, 0, cfg.tau);
    Ok(StoppingState {
        n: 0,
        cum_energy: 0.0,
        hidden_min_energy: phi_draw,
        sensor_reading: e,
        deviation: phi_draw - e,
        estimate: e,
        threshold: t,
        remaining_time: p,
        action: action_for(p),
    })
}

/// Sensor distortion (a CV) at iteration `n`: linear from `alpha0` down to
/// `alpha_floor` at iteration `l`, flat afterwards.
pub fn distortion_at(n: usize, cfg: &SbaConfig, l: usize) -> f64 {
    let slope = (cfg.alpha0 - cfg.alpha_floor) / l.max(1) as f64;
    (cfg.alpha0 - slope * n as f64).max(cfg.alpha_floor)
}

/// Next simulated sensor reading.
///
/// `nu + eta` with `eta ~ N(deviation, (alpha * |nu|)^2)` and
/// `deviation = phi - nu` is evaluated as `phi + alpha * |nu| * z`, which is
/// the same quantity without the cancellation in `nu + (phi - nu)`.
pub fn sensor_step(state: &StoppingState, cfg: &SbaConfig, l: usize, rng: &mut RngStream) -> f64 {
    let sd = distortion_at(state.n, cfg, l) * state.sensor_reading.abs();
    let z = rng.standard_normal();
    state.hidden_min_energy + sd * z
}

/// Posterior estimate: equal-weight average of prior and new reading.
pub fn bayes_update(prior: f64, reading: f64) -> f64 {
    (prior + reading) / 2.0
}

pub fn threshold(estimate: f64, beta: f64, sigma: f64) -> Result<f64, RandError> {
    normal_inverse_cdf(beta, estimate, sigma)
}

/// `(k - n_next) * tau`; zero or negative means the threshold is reached.
pub fn remaining_time(k: usize, n_next: usize, tau: f64) -> f64 {
    (k as f64 - n_next as f64) * tau
}

fn action_for(remaining: f64) -> Action {
    if remaining <= 0.0 {
        Action::Terminate
    } else {
        Action::Continue
    }
}

/// Result of a sensor-driven stopping problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbaStop {
    pub stopping_iteration: usize,
    pub terminal_estimate: f64,
    pub terminal_threshold: f64,
}

/// Runs the loop to termination, reporting every state to `observe`.
pub fn sba_drive<F>(
    cfg: &SbaConfig,
    curve: &CumulativeCurve,
    phi_draw: f64,
    rng: &mut RngStream,
    mut observe: F,
) -> Result<SbaStop, PolicyError>
where
    F: FnMut(&StoppingState),
{
    let mut state = init_state(cfg, curve, phi_draw)?;
    observe(&state);
    let l = expected_iterations(curve, cfg)?;
    let cap = (cfg.iteration_cap_factor * l as f64).ceil() as usize;
    // same value as `threshold(est, beta, sigma)`, without re-solving the quantile
    let z = standard_normal_quantile(cfg.beta);
    while state.action == Action::Continue {
        let next_n = state.n + 1;
        if next_n > cap {
            return Err(PolicyError::IterationCap { cap });
        }
        let reading = sensor_step(&state, cfg, l, rng);
        let estimate = bayes_update(state.estimate, reading);
        let thr = estimate + cfg.sigma_estimate * z;
        let k = iterations_to(curve, thr)?;
        let p = remaining_time(k, next_n, cfg.tau);
        state = StoppingState {
            n: next_n,
            cum_energy: curve.cumulative_at(next_n),
            hidden_min_energy: phi_draw,
            sensor_reading: reading,
            deviation: phi_draw - reading,
            estimate,
            threshold: thr,
            remaining_time: p,
            action: action_for(p),
        };
        observe(&state);
    }
    Ok(SbaStop {
        stopping_iteration: state.n,
        terminal_estimate: state.estimate,
        terminal_threshold: state.threshold,
    })
}

/// Runs the loop and keeps the full state trace (`N + 1` entries).
pub fn sba_run(
    cfg: &SbaConfig,
    curve: &CumulativeCurve,
    phi_draw: f64,
    rng: &mut RngStream,
) -> Result<(SbaStop, Vec<StoppingState>), PolicyError> {
    let mut trace = Vec::new();
    let stop = sba_drive(cfg, curve, phi_draw, rng, |s| trace.push(*s))?;
    Ok((stop, trace))
}

/// Planned stopping iteration for a fixed energy factor.
pub fn fixed_iterations(
    curve: &CumulativeCurve,
    factor: f64,
    expected_min_energy: f64,
) -> Result<usize, PolicyError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(PolicyError::Config(format!(
            "factor {factor} must be positive"
        )));
    }
    Ok(curve.invert(factor * expected_min_energy)?)
}

/// Stopping iteration with perfect knowledge of the requirement.
pub fn ideal_iterations(curve: &CumulativeCurve, phi_draw: f64) -> Result<usize, PolicyError> {
    if !(phi_draw.is_finite() && phi_draw > 0.0) {
        return Err(PolicyError::Config(format!(
            "requirement {phi_draw} must be positive"
        )));
    }
    Ok(curve.invert(phi_draw)?)
}
