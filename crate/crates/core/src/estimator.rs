//! Windowed moving-horizon parameter estimation.
//!
//! The cost over a window of the last `L` samples is
//! `C(p) = sum_k |y_k - h(x_k, p)|^2 + theta(p)`. [`fast_update`] applies a fixed
//! number of damped Gauss-Newton iterations per time step (the online estimate
//! `p_{t+1} = psi_t(p_t)`), while [`full_solve`] runs the same machinery to
//! convergence from several starts and serves as the reference minimiser.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{draw_noise, ModelError, NoiseSpec, SystemModel};

const JITTER_SEED: u64 = 0x5eed_a11e;
const MAX_LM_DAMPING: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("measurement window holds {have} of {need} samples")]
    WindowNotFull { have: usize, need: usize },
    #[error("damped normal equations are numerically singular")]
    LinearSolveFailure,
    #[error("no start reached gradient norm {tol:e}; best had {}", best.grad_norm)]
    NonConvergence { tol: f64, best: Box<FullSolution> },
}

/// Rolling buffer of the last `L` measured states and observations, plus the
/// `L - 1` controls applied between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    capacity: usize,
    states: VecDeque<DVector<f64>>,
    observations: VecDeque<DVector<f64>>,
    controls: VecDeque<DVector<f64>>,
    t: Option<usize>,
}

impl MeasurementWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window length must be at least 1");
        Self {
            capacity,
            states: VecDeque::with_capacity(capacity),
            observations: VecDeque::with_capacity(capacity),
            controls: VecDeque::with_capacity(capacity),
            t: None,
        }
    }

    /// Builds a full window directly from samples (oldest first).
    pub fn from_samples(
        states: Vec<DVector<f64>>,
        observations: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
    ) -> Self {
        assert_eq!(states.len(), observations.len());
        assert!(!states.is_empty());
        let capacity = states.len();
        let keep = capacity - 1;
        let skip = controls.len().saturating_sub(keep);
        Self {
            capacity,
            t: Some(capacity - 1),
            states: states.into(),
            observations: observations.into(),
            controls: controls.into_iter().skip(skip).collect(),
        }
    }

    /// Appends the sample taken at time `t`. `control_before` is the input
    /// applied at `t - 1`, when there was one.
    pub fn push(
        &mut self,
        t: usize,
        state: DVector<f64>,
        observation: DVector<f64>,
        control_before: Option<DVector<f64>>,
    ) {
        if let Some(prev) = self.t {
            assert!(t > prev, "window times must increase");
        }
        self.t = Some(t);
        self.states.push_back(state);
        self.observations.push_back(observation);
        if self.states.len() > self.capacity {
            self.states.pop_front();
            self.observations.pop_front();
        }
        if let Some(u) = control_before {
            if self.capacity > 1 {
                self.controls.push_back(u);
                if self.controls.len() > self.capacity - 1 {
                    self.controls.pop_front();
                }
            }
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.states.len() == self.capacity
    }

    /// Time index of the newest sample.
    pub fn time(&self) -> Option<usize> {
        self.t
    }

    pub fn states(&self) -> &VecDeque<DVector<f64>> {
        &self.states
    }

    pub fn observations(&self) -> &VecDeque<DVector<f64>> {
        &self.observations
    }

    pub fn controls(&self) -> &VecDeque<DVector<f64>> {
        &self.controls
    }

    pub fn latest_state(&self) -> Option<&DVector<f64>> {
        self.states.back()
    }

    fn require_full(&self) -> Result<(), EstimatorError> {
        if self.is_full() {
            Ok(())
        } else {
            Err(EstimatorError::WindowNotFull {
                have: self.len(),
                need: self.capacity,
            })
        }
    }
}

/// Penalty `theta` keeping the estimate inside `P`: zero on `P`, nonnegative and convex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyConfig {
    #[default]
    Zero,
    /// `weight * dist(p, box)^2`.
    QuadraticDistanceToBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
        weight: f64,
    },
}

impl PenaltyConfig {
    fn excess(&self, p: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        match self {
            PenaltyConfig::Zero => None,
            PenaltyConfig::QuadraticDistanceToBox { lower, upper, weight } => {
                let d = DVector::from_iterator(
                    p.len(),
                    p.iter()
                        .zip(lower.iter().zip(upper))
                        .map(|(v, (lo, hi))| v - v.clamp(*lo, *hi)),
                );
                Some((d, *weight))
            }
        }
    }

    pub fn value(&self, p: &DVector<f64>) -> f64 {
        self.excess(p).map_or(0.0, |(d, w)| w * d.norm_squared())
    }

    pub fn gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        self.excess(p)
            .map_or_else(|| DVector::zeros(p.len()), |(d, w)| d * (2.0 * w))
    }

    /// Generalised Hessian (diagonal, `2w` on the coordinates outside the box).
    pub fn hessian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        match self.excess(p) {
            None => DMatrix::zeros(p.len(), p.len()),
            Some((d, w)) => DMatrix::from_diagonal(&d.map(|v| if v != 0.0 { 2.0 * w } else { 0.0 })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Damped Gauss-Newton iterations per time step.
    pub iters_per_step: usize,
    /// Levenberg damping added to the curvature in [`fast_update`].
    pub damping: f64,
    /// Lower bound of the adaptive damping used by [`full_solve`].
    pub solve_damping_floor: f64,
    /// Gradient-norm stopping tolerance of [`full_solve`].
    pub full_solve_tol: f64,
    pub full_solve_max_iters: usize,
    /// Number of starts in [`full_solve`], the first being the supplied initial point.
    pub multistart_count: usize,
    pub jitter_radius: f64,
    pub penalty: PenaltyConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            iters_per_step: 10,
            damping: 12.0,
            solve_damping_floor: 1e-8,
            full_solve_tol: 1e-9,
            full_solve_max_iters: 200,
            multistart_count: 5,
            jitter_radius: 0.5,
            penalty: PenaltyConfig::Zero,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iters_per_step < 1 {
            return Err("estimator.iters_per_step must be at least 1".into());
        }
        if !(self.damping > 0.0) {
            return Err("estimator.damping must be positive".into());
        }
        if !(self.solve_damping_floor > 0.0) {
            return Err("estimator.solve_damping_floor must be positive".into());
        }
        if !(self.full_solve_tol > 0.0) {
            return Err("estimator.full_solve_tol must be positive".into());
        }
        if self.multistart_count < 1 {
            return Err("estimator.multistart_count must be at least 1".into());
        }
        if !(self.jitter_radius >= 0.0) {
            return Err("estimator.jitter_radius must be nonnegative".into());
        }
        Ok(())
    }
}

/// Current online estimate `p_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateState {
    pub p_hat: DVector<f64>,
}

impl EstimateState {
    pub fn new(p_hat: DVector<f64>) -> Self {
        Self { p_hat }
    }

    /// Estimation error `p_hat - p_true`.
    pub fn error(&self, p_true: &DVector<f64>) -> DVector<f64> {
        &self.p_hat - p_true
    }
}

/// Cost value with first and (Gauss-Newton) second order information.
///
/// `gradient` is the exact gradient of `value`. `gauss_newton_hessian` is the
/// Gauss-Newton curvature of `value / 2`: `sum_k J_k^T J_k + hess(theta) / 2`,
/// which at `theta = 0` is exactly the observability Grammian.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub gauss_newton_hessian: DMatrix<f64>,
}

/// Window states used for the residuals: the measured states, or a rollout
/// from the oldest measured state when the dynamics depend on `p`.
fn window_states(model: &dyn SystemModel, window: &MeasurementWindow, p: &DVector<f64>) -> Vec<DVector<f64>> {
    if !model.dynamics_depend_on_param() || window.controls().len() + 1 < window.len() {
        return window.states().iter().cloned().collect();
    }
    let mut out = Vec::with_capacity(window.len());
    let mut x = window.states()[0].clone();
    out.push(x.clone());
    for u in window.controls() {
        x = model.dynamics(&x, u, p);
        out.push(x.clone());
    }
    out
}

fn residuals(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    p: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, ModelError> {
    window_states(model, window, p)
        .iter()
        .zip(window.observations())
        .map(|(x, y)| Ok(y - model.observe(x, p)?))
        .collect()
}

/// Total derivative of each predicted observation w.r.t. `p`, through the rollout.
fn rollout_jacobians(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    p: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let n_p = p.len();
    let n_y = model.dims().n_y;
    let mut jacs = vec![DMatrix::zeros(n_y, n_p); window.len()];
    for i in 0..n_p {
        let h = 1e-6 * p[i].abs().max(1.0);
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp[i] += h;
        pm[i] -= h;
        let rp = residuals(model, window, &pp)?;
        let rm = residuals(model, window, &pm)?;
        for (j, (a, b)) in jacs.iter_mut().zip(rp.iter().zip(&rm)) {
            // residual is y - h, so dh/dp = -(dr/dp)
            j.set_column(i, &((b - a) / (2.0 * h)));
        }
    }
    Ok(jacs)
}

/// Evaluates the windowed cost at `p`.
pub fn eval_cost(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    p: &DVector<f64>,
    penalty: &PenaltyConfig,
) -> Result<CostReport, EstimatorError> {
    window.require_full()?;
    let n_p = p.len();
    let states = window_states(model, window, p);
    let jacs = if model.dynamics_depend_on_param() {
        Some(rollout_jacobians(model, window, p)?)
    } else {
        None
    };
    let mut value = 0.0;
    let mut gradient = DVector::zeros(n_p);
    let mut hessian = DMatrix::zeros(n_p, n_p);
    for (k, (x, y)) in states.iter().zip(window.observations()).enumerate() {
        let r = y - model.observe(x, p)?;
        let j = match &jacs {
            Some(js) => js[k].clone(),
            None => model.jac_obs_p(x, p)?,
        };
        value += r.norm_squared();
        gradient -= j.transpose() * &r * 2.0;
        hessian += j.transpose() * &j;
    }
    value += penalty.value(p);
    gradient += penalty.gradient(p);
    hessian += penalty.hessian(p) * 0.5;
    Ok(CostReport {
        value,
        gradient,
        gauss_newton_hessian: hessian,
    })
}

fn damped_step(report: &CostReport, damping: f64) -> Result<DVector<f64>, EstimatorError> {
    let n = report.gradient.len();
    let a = &report.gauss_newton_hessian + DMatrix::identity(n, n) * damping;
    let rhs = &report.gradient * -0.5;
    let step = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).ok_or(EstimatorError::LinearSolveFailure)?,
    };
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(EstimatorError::LinearSolveFailure)
    }
}

/// One online update `p_{t+1} = psi_t(p_t)`: `cfg.iters_per_step` damped
/// Gauss-Newton iterations started at the current estimate.
pub fn fast_update(
    model: &dyn SystemModel,
    state: &EstimateState,
    window: &MeasurementWindow,
    cfg: &EstimatorConfig,
) -> Result<EstimateState, EstimatorError> {
    let set = model.param_set();
    let mut p = state.p_hat.clone();
    for _ in 0..cfg.iters_per_step {
        let report = eval_cost(model, window, &p, &cfg.penalty)?;
        p += damped_step(&report, cfg.damping)?;
        if set.is_bounded() {
            p = set.project(&p);
        }
    }
    Ok(EstimateState::new(p))
}

/// Result of one converged (or best-effort) window solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSolution {
    pub p: DVector<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn solve_from(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    start: DVector<f64>,
    cfg: &EstimatorConfig,
) -> Result<FullSolution, EstimatorError> {
    let set = model.param_set();
    let mut p = if set.is_bounded() { set.project(&start) } else { start };
    let mut report = eval_cost(model, window, &p, &cfg.penalty)?;
    let mut mu = cfg.solve_damping_floor;
    let mut iterations = 0;
    while iterations < cfg.full_solve_max_iters {
        if report.gradient.norm() <= cfg.full_solve_tol {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while mu <= MAX_LM_DAMPING {
            let mut trial = &p + damped_step(&report, mu)?;
            if set.is_bounded() {
                trial = set.project(&trial);
            }
            let trial_report = match eval_cost(model, window, &trial, &cfg.penalty) {
                Ok(r) => r,
                Err(EstimatorError::Model(ModelError::SingularObservation { .. })) => {
                    mu *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if trial_report.value <= report.value {
                accepted = trial != p;
                p = trial;
                report = trial_report;
                mu = (mu / 10.0).max(cfg.solve_damping_floor);
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    let grad_norm = report.gradient.norm();
    Ok(FullSolution {
        p,
        cost: report.value,
        grad_norm,
        iterations,
        converged: grad_norm <= cfg.full_solve_tol,
    })
}

/// Reference minimiser of the window cost.
///
/// Runs adaptive Levenberg-Marquardt to convergence from `init` and from
/// `multistart_count - 1` deterministic jittered starts. Among the starts that
/// converge, the lowest cost wins (first found on ties).
pub fn full_solve(
    model: &dyn SystemModel,
    window: &MeasurementWindow,
    init: &DVector<f64>,
    cfg: &EstimatorConfig,
) -> Result<FullSolution, EstimatorError> {
    window.require_full()?;
    let jitter = NoiseSpec {
        nu: cfg.jitter_radius,
        seed: JITTER_SEED,
    };
    let mut best_converged: Option<FullSolution> = None;
    let mut best_any: Option<FullSolution> = None;
    for s in 0..cfg.multistart_count {
        let start = if s == 0 {
            init.clone()
        } else {
            init + draw_noise(&jitter, init.len(), s as u64)
        };
        let sol = match solve_from(model, window, start, cfg) {
            Ok(sol) => sol,
            Err(EstimatorError::Model(_)) | Err(EstimatorError::LinearSolveFailure) => continue,
            Err(e) => return Err(e),
        };
        if best_any.as_ref().is_none_or(|b| sol.cost < b.cost) {
            best_any = Some(sol.clone());
        }
        if sol.converged && best_converged.as_ref().is_none_or(|b| sol.cost < b.cost) {
            best_converged = Some(sol);
        }
    }
    match (best_converged, best_any) {
        (Some(sol), _) => Ok(sol),
        (None, Some(best)) => Err(EstimatorError::NonConvergence {
            tol: cfg.full_solve_tol,
            best: Box::new(best),
        }),
        (None, None) => Err(EstimatorError::LinearSolveFailure),
    }
}
