//! Nominal ISS feedback plus the one-step observability-seeking MPC correction.
//!
//! The applied input is `u = kappa(x0) + u_obs`, where `u_obs` maximises the
//! smallest eigenvalue of the predicted Grammian inside the stability budget
//! `|u_obs| <= sigma^-1((mu/2) alpha(|x0|/2))` and subject to `u in U`.

use std::f64::consts::TAU;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::MeasurementWindow;
use crate::grammian::{min_eigenvalue, split, GrammianError, GrammianSplit};
use crate::model::{project_input, SystemModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Grammian(#[from] GrammianError),
    #[error("measurement window holds {have} of {need} samples")]
    WindowNotFull { have: usize, need: usize },
    #[error("no admissible candidate input could be evaluated")]
    NoCandidate,
    #[error("observability level {delta:.4e} below the required {delta_prime:.4e}")]
    InfeasibleStep { delta: f64, delta_prime: f64 },
}

impl From<crate::model::ModelError> for ControllerError {
    fn from(e: crate::model::ModelError) -> Self {
        ControllerError::Grammian(GrammianError::Model(e))
    }
}

/// Smoothly saturated linear feedback `kappa(x) = -k x s(|x|)` with
/// `V(x) = |x|`, `alpha(r) = delta k min(r, r_sat)` and `sigma(r) = delta r`.
///
/// Below `r_sat` the feedback is exactly linear; above it the magnitude
/// `k r s(r)` grows as `k r_sat + (u_max - k r_sat) tanh(k (r - r_sat) / (u_max - k r_sat))`,
/// which is C2 at `r_sat`, has slope at most `k`, and tends to `u_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalFeedback {
    pub gain: f64,
    pub sat_radius: f64,
    pub u_max: f64,
    /// Sampling period of the closed loop.
    pub delta: f64,
}

impl NominalFeedback {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gain > 0.0) {
            return Err("controller.gain must be positive".into());
        }
        if !(self.sat_radius > 0.0) {
            return Err("controller.sat_radius must be positive".into());
        }
        if !(self.delta > 0.0) {
            return Err("model.delta must be positive".into());
        }
        if !(self.delta * self.gain < 1.0) {
            return Err(format!(
                "controller.gain: delta * gain = {} must be below 1",
                self.delta * self.gain
            ));
        }
        if self.gain * self.sat_radius > self.u_max * (1.0 + 1e-12) {
            return Err(format!(
                "controller.sat_radius: gain * sat_radius = {} exceeds u_max = {}",
                self.gain * self.sat_radius,
                self.u_max
            ));
        }
        Ok(())
    }

    /// Feedback magnitude `k r s(r)` at distance `r` from the origin.
    pub fn magnitude(&self, r: f64) -> f64 {
        let k = self.gain;
        if r <= self.sat_radius {
            return k * r;
        }
        let base = k * self.sat_radius;
        let head = self.u_max - base;
        if head <= 0.0 {
            return self.u_max.min(base);
        }
        base + head * (k * (r - self.sat_radius) / head).tanh()
    }

    /// `kappa(x, p)`; the landmark estimate does not enter the single-integrator feedback.
    pub fn control(&self, x: &DVector<f64>, _p_hat: &DVector<f64>) -> DVector<f64> {
        let r = x.norm();
        if r == 0.0 {
            return DVector::zeros(x.len());
        }
        x * (-self.magnitude(r) / r)
    }

    pub fn lyapunov(&self, x: &DVector<f64>) -> f64 {
        x.norm()
    }

    pub fn alpha(&self, r: f64) -> f64 {
        self.delta * self.gain * r.min(self.sat_radius)
    }

    pub fn sigma(&self, r: f64) -> f64 {
        self.delta * r
    }

    pub fn sigma_inv(&self, s: f64) -> f64 {
        s / self.delta
    }
}

/// Control cost `c(u)` in the MPC objective `-delta + c(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlCost {
    #[default]
    Zero,
    Quadratic { weight: f64 },
}

impl ControlCost {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        match self {
            ControlCost::Zero => 0.0,
            ControlCost::Quadratic { weight } => weight * u.norm_squared(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Required observability level.
    pub delta_prime: f64,
    /// Fraction of the nominal decrease the correction may consume.
    pub mu: f64,
    pub control_cost: ControlCost,
    pub ring_samples: usize,
    pub refine_iters: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            delta_prime: 1.0,
            mu: 0.5,
            control_cost: ControlCost::Zero,
            ring_samples: 64,
            refine_iters: 20,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(format!("controller.mu = {} must lie in (0, 1)", self.mu));
        }
        if !(self.delta_prime > 0.0) {
            return Err("controller.delta_prime must be positive".into());
        }
        if self.ring_samples < 1 {
            return Err("controller.ring_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Radius of the corrective input allowed at measured state `x`.
pub fn obs_budget(x: &DVector<f64>, cfg: &MpcConfig, fb: &NominalFeedback) -> f64 {
    fb.sigma_inv(0.5 * cfg.mu * fb.alpha(0.5 * x.norm()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcDecision {
    pub nominal: DVector<f64>,
    pub u_obs: DVector<f64>,
    pub u_total: DVector<f64>,
    /// `lambda_min(Gamma + S_f(u_total))`.
    pub delta: f64,
    /// `delta - c(u_total)`.
    pub objective: f64,
    pub feasible: bool,
    pub budget: f64,
    /// The predicted Grammian the level was read from.
    pub grammian: DMatrix<f64>,
}

impl MpcDecision {
    pub fn require_feasible(self, delta_prime: f64) -> Result<Self, ControllerError> {
        if self.feasible {
            Ok(self)
        } else {
            Err(ControllerError::InfeasibleStep {
                delta: self.delta,
                delta_prime,
            })
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    u_obs: DVector<f64>,
    u_total: DVector<f64>,
    delta: f64,
    objective: f64,
    grammian: DMatrix<f64>,
}

impl Candidate {
    /// Higher objective wins; ties go to the smaller correction.
    fn beats(&self, other: &Candidate) -> bool {
        self.objective > other.objective
            || (self.objective == other.objective && self.u_obs.norm() < other.u_obs.norm())
    }
}

/// One instance of the MPC problem at a given time step.
pub struct MpcProblem<'a> {
    model: &'a dyn SystemModel,
    cfg: &'a MpcConfig,
    split: GrammianSplit,
    nominal: DVector<f64>,
    budget: f64,
}

impl<'a> MpcProblem<'a> {
    pub fn new(
        model: &'a dyn SystemModel,
        window: &MeasurementWindow,
        p_hat: &DVector<f64>,
        x0_t: &DVector<f64>,
        cfg: &'a MpcConfig,
        fb: &NominalFeedback,
    ) -> Result<Self, ControllerError> {
        let mut split = split(model, p_hat, window)?;
        split.current_state = x0_t.clone();
        Ok(Self {
            model,
            cfg,
            split,
            nominal: fb.control(x0_t, p_hat),
            budget: obs_budget(x0_t, cfg, fb),
        })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn nominal(&self) -> &DVector<f64> {
        &self.nominal
    }

    pub fn split(&self) -> &GrammianSplit {
        &self.split
    }

    fn polar(&self, r: f64, angle: f64) -> DVector<f64> {
        let mut u = DVector::zeros(self.nominal.len());
        u[0] = r * angle.cos();
        if u.len() > 1 {
            u[1] = r * angle.sin();
        }
        u
    }

    fn candidate(&self, u_obs: &DVector<f64>) -> Option<Candidate> {
        let u_total = project_input(&(&self.nominal + u_obs), self.model.input_radius());
        let u_obs = &u_total - &self.nominal;
        let grammian = self.split.assembled(self.model, &u_total).ok()?;
        let delta = min_eigenvalue(&grammian).ok()?;
        let objective = delta - self.cfg.control_cost.eval(&u_total);
        Some(Candidate {
            u_obs,
            u_total,
            delta,
            objective,
            grammian,
        })
    }

    /// `g(u_obs) = lambda_min(Gamma + S_f(kappa + u_obs)) - c(kappa + u_obs)`,
    /// after projecting the total input onto `U`.
    pub fn objective(&self, u_obs: &DVector<f64>) -> Option<f64> {
        self.candidate(u_obs).map(|c| c.objective)
    }

    fn decision(&self, c: Candidate) -> MpcDecision {
        MpcDecision {
            nominal: self.nominal.clone(),
            feasible: c.delta >= self.cfg.delta_prime,
            u_obs: c.u_obs,
            u_total: c.u_total,
            delta: c.delta,
            objective: c.objective,
            budget: self.budget,
            grammian: c.grammian,
        }
    }

    /// Decision that applies the given correction unchanged (e.g. zero for the nominal-only loop).
    pub fn decide(&self, u_obs: &DVector<f64>) -> Result<MpcDecision, ControllerError> {
        let c = self.candidate(u_obs).ok_or(ControllerError::NoCandidate)?;
        Ok(self.decision(c))
    }

    /// Sampled-ring search at the budget radius plus the centre, refined by a
    /// polar pattern search over `(radius, angle)`.
    ///
    /// Only planar inputs are searched; extra input coordinates stay at zero.
    pub fn solve(&self) -> Result<MpcDecision, ControllerError> {
        let zero = DVector::zeros(self.nominal.len());
        let mut best = self.candidate(&zero);
        let mut best_polar = (0.0, 0.0);
        if self.budget > 0.0 {
            let n = self.cfg.ring_samples;
            for i in 0..n {
                let angle = TAU * i as f64 / n as f64;
                if let Some(c) = self.candidate(&self.polar(self.budget, angle)) {
                    if best.as_ref().is_none_or(|b| c.beats(b)) {
                        best = Some(c);
                        best_polar = (self.budget, angle);
                    }
                }
            }
            let (mut r, mut angle) = best_polar;
            let mut dr = 0.5 * self.budget;
            let mut da = TAU / n as f64;
            for _ in 0..self.cfg.refine_iters {
                let mut moved = false;
                for (cr, ca) in [(r, angle + da), (r, angle - da), (r + dr, angle), (r - dr, angle)] {
                    let cr = cr.clamp(0.0, self.budget);
                    if let Some(c) = self.candidate(&self.polar(cr, ca)) {
                        if best.as_ref().is_none_or(|b| c.beats(b)) {
                            best = Some(c);
                            r = cr;
                            angle = ca;
                            moved = true;
                        }
                    }
                }
                if !moved {
                    dr *= 0.5;
                    da *= 0.5;
                }
            }
        }
        let best = best.ok_or(ControllerError::NoCandidate)?;
        Ok(self.decision(best))
    }
}

/// Solves the one-step observability MPC at the current measured state.
///
/// An infeasible level (below `delta_prime`) is not an error: the best
/// candidate is still returned with `feasible = false` so the loop can keep
/// going; call [`MpcDecision::require_feasible`] to turn it into one.
pub fn solve_mpc(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    p_hat: &DVector<f64>,
    x0_t: &DVector<f64>,
    cfg: &MpcConfig,
    fb: &NominalFeedback,
) -> Result<MpcDecision, ControllerError> {
    if !window.is_full() {
        return Err(ControllerError::WindowNotFull {
            have: window.len(),
            need: window.capacity(),
        });
    }
    let decision = MpcProblem::new(model, window, p_hat, x0_t, cfg, fb)?.solve()?;
    if !decision.feasible {
        warn!(
            "t={:?}: observability level {:.3e} below {:.3e}, applying best effort input",
            window.time(),
            decision.delta,
            cfg.delta_prime
        );
    }
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammian::grammian_full;
    use crate::model::BearingModel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn fb(gain: f64, sat: f64) -> NominalFeedback {
        NominalFeedback {
            gain,
            sat_radius: sat,
            u_max: 2.0,
            delta: 0.1,
        }
    }

    fn window_of(states: &[DVector<f64>]) -> MeasurementWindow {
        MeasurementWindow::from_samples(states.to_vec(), vec![v(1.0, 0.0); states.len()], vec![])
    }

    #[test]
    fn nominal_control_examples() {
        let f = fb(1.0, 1.0);
        let p = v(5.0, 8.0);
        assert_eq!(f.control(&v(0.0, 0.0), &p), v(0.0, 0.0));
        assert_eq!(f.control(&v(0.5, 0.0), &p), v(-0.5, 0.0));
        assert!(f.control(&v(1e6, -3e5), &p).norm() <= 2.0);
    }

    #[test]
    fn saturation_profile_is_continuous_and_bounded() {
        let f = fb(1.0, 1.5);
        let below = f.magnitude(1.5 - 1e-9);
        let above = f.magnitude(1.5 + 1e-9);
        assert!((below - above).abs() < 1e-8);
        for r in [0.0, 0.3, 1.5, 2.0, 5.0, 50.0, 1e9] {
            assert!(f.magnitude(r) <= 2.0 + 1e-12);
            assert!(f.magnitude(r) >= f.gain * r.min(f.sat_radius) - 1e-12);
        }
    }

    #[test]
    fn validation_rejects_bad_gains() {
        assert!(fb(1.0, 2.0).validate().is_ok());
        assert!(fb(10.0, 0.1).validate().is_err());
        assert!(fb(1.0, 3.0).validate().is_err());
        assert!(MpcConfig { mu: 1.0, ..Default::default() }.validate().is_err());
        assert!(MpcConfig { delta_prime: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn budget_examples() {
        let cfg = MpcConfig::default();
        let f = fb(1.0, 1.0);
        assert_eq!(obs_budget(&v(0.0, 0.0), &cfg, &f), 0.0);
        assert_relative_eq!(obs_budget(&v(1.0, 0.0), &cfg, &f), 0.125, epsilon = 1e-15);
        let mut last = 0.0;
        for i in 0..100 {
            let b = obs_budget(&v(0.1 * i as f64, 0.0), &cfg, &f);
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn zero_budget_reduces_to_nominal() {
        let model = BearingModel::new(0.1, 2.0);
        let states: Vec<_> = (0..10).map(|i| v(0.1 * i as f64, 0.0)).collect();
        let w = window_of(&states);
        let cfg = MpcConfig::default();
        let f = fb(1.0, 2.0);
        let d = solve_mpc(&model, &w, &v(5.0, 8.0), &v(0.0, 0.0), &cfg, &f).unwrap();
        assert_eq!(d.budget, 0.0);
        assert_eq!(d.u_obs, v(0.0, 0.0));
        assert_eq!(d.u_total, v(0.0, 0.0));
    }

    #[test]
    fn already_observable_window_keeps_zero_correction_admissible() {
        let model = BearingModel::new(0.1, 2.0);
        let p = v(0.0, 0.0);
        let states: Vec<_> = (0..10)
            .map(|i| {
                let a = TAU * i as f64 / 10.0;
                v(0.5 * a.cos(), 0.5 * a.sin())
            })
            .collect();
        let w = window_of(&states);
        let cfg = MpcConfig::default();
        let f = fb(1.0, 2.0);
        let x0 = states[9].clone();
        let d = solve_mpc(&model, &w, &p, &x0, &cfg, &f).unwrap();
        let center = MpcProblem::new(&model, &w, &p, &x0, &cfg, &f).unwrap().decide(&v(0.0, 0.0)).unwrap();
        assert!(center.feasible);
        assert!(d.feasible);
        assert!(d.objective >= center.objective);
        assert!(d.clone().require_feasible(cfg.delta_prime).is_ok());
    }

    #[test]
    fn collinear_window_is_strictly_improved() {
        // all states on the ray from the landmark through the origin
        let model = BearingModel::new(0.1, 2.0);
        let p = v(5.0, 8.0);
        let states: Vec<_> = (0..10).map(|i| v(5.0, 8.0) * (0.5 - 0.03 * i as f64)).collect();
        let w = window_of(&states);
        let cfg = MpcConfig::default();
        let f = fb(1.0, 2.0);
        let x0 = states[9].clone();
        let problem = MpcProblem::new(&model, &w, &p, &x0, &cfg, &f).unwrap();
        assert!(min_eigenvalue(&problem.split().gamma).unwrap() < 1e-12);
        assert!(problem.budget() > 0.0);
        let center = problem.objective(&v(0.0, 0.0)).unwrap();
        let d = problem.solve().unwrap();
        assert!(d.objective > center, "{} vs {}", d.objective, center);
        // 360-direction brute force confirms a strictly better direction exists
        let brute = (0..360)
            .filter_map(|i| {
                let a = TAU * i as f64 / 360.0;
                problem.objective(&v(problem.budget() * a.cos(), problem.budget() * a.sin()))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(brute > center);
        assert!(!d.feasible);
        assert!(matches!(
            d.require_feasible(cfg.delta_prime),
            Err(ControllerError::InfeasibleStep { .. })
        ));
    }

    #[test]
    fn decision_level_matches_recomputed_grammian() {
        let model = BearingModel::new(0.1, 2.0);
        let p = v(5.0, 8.0);
        let states: Vec<_> = (0..10).map(|i| v(4.0 + 0.1 * i as f64, 9.5 - 0.05 * i as f64)).collect();
        let w = window_of(&states);
        let cfg = MpcConfig::default();
        let f = fb(1.0, 2.0);
        let x0 = states[9].clone();
        let d = solve_mpc(&model, &w, &p, &x0, &cfg, &f).unwrap();
        let mut shifted: Vec<_> = states[1..].to_vec();
        shifted.push(model.dynamics(&x0, &d.u_total, &p));
        let o = grammian_full(&model, &p, &shifted).unwrap();
        assert!((min_eigenvalue(&o).unwrap() - d.delta).abs() <= 1e-10);
        assert!(d.u_obs.norm() <= d.budget + 1e-12);
        assert!(d.u_total.norm() <= 2.0 + 1e-12);
    }

    #[test]
    fn quadratic_control_cost_penalises_effort() {
        let c = ControlCost::Quadratic { weight: 2.0 };
        assert_eq!(c.eval(&v(1.0, 1.0)), 4.0);
        assert_eq!(ControlCost::Zero.eval(&v(1.0, 1.0)), 0.0);
    }

    proptest! {
        #[test]
        fn feedback_is_lipschitz_with_gain(a in -20.0..20.0f64, b in -20.0..20.0f64,
                                           c in -20.0..20.0f64, d in -20.0..20.0f64) {
            let f = fb(0.8, 2.5);
            let p = v(0.0, 0.0);
            let x = v(a, b);
            let y = v(c, d);
            let lhs = (f.control(&x, &p) - f.control(&y, &p)).norm();
            prop_assert!(lhs <= f.gain * (x - y).norm() + 1e-12);
        }

        #[test]
        fn decisions_respect_budget_and_input_set(
            seed in 0u64..500, xa in -6.0..6.0f64, xb in -6.0..6.0f64,
        ) {
            let model = BearingModel::new(0.1, 2.0);
            let p = v(5.0, 8.0);
            let spec = crate::model::NoiseSpec { nu: 2.0, seed };
            let states: Vec<_> = (0..10).map(|i| v(xa, xb) + crate::model::draw_noise(&spec, 2, i)).collect();
            prop_assume!(states.iter().all(|s| (s - &p).norm() > 0.2));
            let x0 = states[9].clone();
            let w = window_of(&states);
            let cfg = MpcConfig::default();
            let f = fb(1.0, 2.0);
            let problem = MpcProblem::new(&model, &w, &p, &x0, &cfg, &f).unwrap();
            let d = problem.solve().unwrap();
            prop_assert!(d.u_obs.norm() <= obs_budget(&x0, &cfg, &f) + 1e-12);
            prop_assert!(d.u_total.norm() <= 2.0 + 1e-12);
            prop_assert!(d.objective >= problem.objective(&v(0.0, 0.0)).unwrap());
            prop_assert!((min_eigenvalue(&d.grammian).unwrap() - d.delta).abs() <= 1e-10);
        }
    }
}
