//! Closed-loop simulation of the estimator/controller pair and the stability
//! diagnostics evaluated on its trace.
//!
//! Timing per step `t`: measure `x0_t`, `y_t`; compute the input from `p_hat_t`;
//! step the true system; then `p_hat_{t+1} = psi_t(p_hat_t)` on the window
//! ending at `t`. The first `L - 1` steps only fill the window.

use std::fmt;
use std::io::{Read, Write};

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{obs_budget, MpcConfig, MpcProblem, NominalFeedback};
use crate::estimator::{fast_update, full_solve, EstimateState, EstimatorConfig, EstimatorError, MeasurementWindow};
use crate::grammian::{grammian_full, min_eigenvalue};
use crate::model::{draw_noise, BearingScenario, NoiseSpec, SystemModel};

/// Absolute slack when testing the error recursion, for rounding only.
pub const RECURSION_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run aborted at t={t}: {source}")]
    Aborted {
        t: usize,
        source: Box<dyn std::error::Error + Send + Sync>,
        partial: Box<SimTrace>,
    },
    #[error("trace has no oracle columns; rerun with the oracle enabled")]
    MissingOracle,
    #[error("trace is not planar: {0}")]
    NotPlanar(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NominalOnly,
    ObservabilitySeeking,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NominalOnly => "nominal-only",
            Mode::ObservabilitySeeking => "observability-seeking",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal-only" | "nominal" => Ok(Mode::NominalOnly),
            "observability-seeking" | "active" => Ok(Mode::ObservabilitySeeking),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// Inputs applied while the first window fills up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarmupPolicy {
    /// Nominal feedback only.
    #[default]
    Nominal,
    /// A fixed input sequence; nominal feedback once it runs out.
    Scripted { controls: Vec<Vec<f64>> },
}

/// Weight of the estimation error in `W(x, e) = V(x) + lambda sigma(|e|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub lambda: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub window_len: usize,
    pub p_init: DVector<f64>,
    pub estimator: EstimatorConfig,
    pub mpc: MpcConfig,
    pub feedback: NominalFeedback,
    pub noise: NoiseSpec,
    pub lyapunov: LyapunovConfig,
    pub warmup: WarmupPolicy,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_len < 2 {
            return Err("estimator.window_len must be at least 2".into());
        }
        if !(self.noise.nu >= 0.0) {
            return Err("noise.nu must be nonnegative".into());
        }
        if !(self.lyapunov.lambda > 0.0) {
            return Err("simulation.lyapunov_lambda must be positive".into());
        }
        self.estimator.validate()?;
        self.mpc.validate()?;
        self.feedback.validate()
    }
}

/// Augmented state `chi = (x, e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: DVector<f64>,
    pub e: DVector<f64>,
}

impl AugmentedState {
    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.e.norm_squared()).sqrt()
    }

    /// `W(chi) = V(x) + lambda sigma(|e|)`.
    pub fn lyapunov(&self, fb: &NominalFeedback, ly: &LyapunovConfig) -> f64 {
        fb.lyapunov(&self.x) + ly.lambda * fb.sigma(self.e.norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub u_obs: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub e: Vec<f64>,
    pub err: f64,
    /// `lambda_min` of the realized window Grammian at the true parameter.
    pub lammin: f64,
    /// `lambda_min` of the predicted Grammian certified by the controller.
    pub delta: f64,
    pub feasible: bool,
    pub v: f64,
    pub w: f64,
    pub budget: f64,
    /// Reference minimiser of the window ending at `t`.
    pub p_star: Option<Vec<f64>>,
    pub p_star_converged: Option<bool>,
}

impl TraceRow {
    pub fn chi(&self) -> AugmentedState {
        AugmentedState {
            x: DVector::from_column_slice(&self.x),
            e: DVector::from_column_slice(&self.e),
        }
    }

    fn p_star_error(&self, p_true: &[f64]) -> Option<f64> {
        self.p_star.as_ref().map(|ps| dist(ps, p_true))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub mode: Mode,
    pub window_len: usize,
    pub nu: f64,
    pub p_true: Vec<f64>,
    pub oracle: bool,
}

impl RunMeta {
    /// Number of warm-up rows (`L - 1`).
    pub fn warmup_len(&self) -> usize {
        self.window_len - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub meta: RunMeta,
    pub rows: Vec<TraceRow>,
}

impl SimTrace {
    pub fn post_warmup(&self) -> impl Iterator<Item = &TraceRow> {
        let w = self.meta.warmup_len();
        self.rows.iter().filter(move |r| r.t >= w)
    }

    pub fn final_error(&self) -> Option<f64> {
        self.rows.last().map(|r| r.err)
    }
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn abort(t: usize, e: impl std::error::Error + Send + Sync + 'static, meta: &RunMeta, rows: Vec<TraceRow>) -> SimError {
    SimError::Aborted {
        t,
        source: Box::new(e),
        partial: Box::new(SimTrace { meta: meta.clone(), rows }),
    }
}

/// Runs the bearing-only scenario.
pub fn run(
    scenario: &BearingScenario,
    cfg: &LoopConfig,
    steps: usize,
    mode: Mode,
    oracle: bool,
) -> Result<SimTrace, SimError> {
    let model = scenario.model();
    run_model(&model, &scenario.p_true(), &scenario.x0(), cfg, steps, mode, oracle)
}

/// Runs the closed loop for any single-integrator-like model (`n_u == n_x`,
/// as required by [`NominalFeedback`]).
pub fn run_model(
    model: &dyn SystemModel,
    p_true: &DVector<f64>,
    x_init: &DVector<f64>,
    cfg: &LoopConfig,
    steps: usize,
    mode: Mode,
    oracle: bool,
) -> Result<SimTrace, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    let l = cfg.window_len;
    if steps <= l {
        return Err(SimError::Config(format!("simulation.steps = {steps} must exceed the window length {l}")));
    }
    let dims = model.dims();
    let meta = RunMeta {
        seed: cfg.noise.seed,
        config_hash: String::new(),
        mode,
        window_len: l,
        nu: cfg.noise.nu,
        p_true: to_vec(p_true),
        oracle,
    };

    let mut rows: Vec<TraceRow> = Vec::with_capacity(steps);
    let mut x = x_init.clone();
    let mut est = EstimateState::new(cfg.p_init.clone());
    let mut window = MeasurementWindow::new(l);
    let mut prev_u: Option<DVector<f64>> = None;

    for t in 0..steps {
        let v0 = draw_noise(&cfg.noise, dims.n_x, 2 * t as u64);
        let vy = draw_noise(&cfg.noise, dims.n_y, 2 * t as u64 + 1);
        let y_clean = match model.observe(&x, p_true) {
            Ok(y) => y,
            Err(e) => return Err(abort(t, e, &meta, rows)),
        };
        let x0 = &x + v0;
        let y = y_clean + vy;
        window.push(t, x0.clone(), y.clone(), prev_u.take());

        let warmup = t + 1 < l;
        let problem = match MpcProblem::new(model, &window, &est.p_hat, &x0, &cfg.mpc, &cfg.feedback) {
            Ok(p) => p,
            Err(e) => return Err(abort(t, e, &meta, rows)),
        };
        let decision = if warmup {
            let u_obs = match &cfg.warmup {
                WarmupPolicy::Scripted { controls } if t < controls.len() => {
                    DVector::from_column_slice(&controls[t]) - problem.nominal()
                }
                _ => DVector::zeros(dims.n_u),
            };
            problem.decide(&u_obs)
        } else {
            match mode {
                Mode::NominalOnly => problem.decide(&DVector::zeros(dims.n_u)),
                Mode::ObservabilitySeeking => problem.solve(),
            }
        };
        let decision = match decision {
            Ok(d) => d,
            Err(e) => return Err(abort(t, e, &meta, rows)),
        };
        if !warmup && mode == Mode::ObservabilitySeeking && !decision.feasible {
            log::debug!(
                "t={t}: observability level {:.3e} below {:.3e}",
                decision.delta,
                cfg.mpc.delta_prime
            );
        }

        let states: Vec<_> = window.states().iter().cloned().collect();
        let lammin = match grammian_full(model, p_true, &states) {
            Ok(o) => min_eigenvalue(&o).unwrap_or(f64::NAN),
            Err(e) => return Err(abort(t, e, &meta, rows)),
        };

        let (p_star, p_star_converged) = if oracle && !warmup {
            match full_solve(model, &window, &est.p_hat, &cfg.estimator) {
                Ok(sol) => (Some(to_vec(&sol.p)), Some(true)),
                Err(EstimatorError::NonConvergence { best, .. }) => (Some(to_vec(&best.p)), Some(false)),
                Err(e) => return Err(abort(t, e, &meta, rows)),
            }
        } else {
            (None, None)
        };

        let e = est.error(p_true);
        let chi = AugmentedState { x: x.clone(), e: e.clone() };
        rows.push(TraceRow {
            t,
            x: to_vec(&x),
            x0: to_vec(&x0),
            y: to_vec(&y),
            u: to_vec(&decision.u_total),
            u_obs: to_vec(&decision.u_obs),
            p_hat: to_vec(&est.p_hat),
            err: e.norm(),
            e: to_vec(&e),
            lammin,
            delta: decision.delta,
            feasible: decision.feasible,
            v: cfg.feedback.lyapunov(&x),
            w: chi.lyapunov(&cfg.feedback, &cfg.lyapunov),
            budget: decision.budget,
            p_star,
            p_star_converged,
        });

        if !warmup {
            match fast_update(model, &est, &window, &cfg.estimator) {
                Ok(next) => est = next,
                Err(EstimatorError::LinearSolveFailure) => {
                    warn!("t={t}: degenerate window, keeping the previous estimate");
                }
                Err(e) => return Err(abort(t, e, &meta, rows)),
            }
        }
        x = model.dynamics(&x, &decision.u_total, p_true);
        prev_u = Some(decision.u_total);
    }
    Ok(SimTrace { meta, rows })
}

/// Outcome of fitting `|e_{t+1}| <= g |e_t| + (1 + g) |p*_t - p_true|` along a trace.
///
/// `p*_t` is the minimiser of the window that produced `p_hat_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecursionReport {
    pub steps: usize,
    /// Fraction of steps on which the supplied factor satisfies the recursion.
    pub fraction_holding: f64,
    /// Smallest factor in `[0, 1)` satisfying every step, if any.
    pub gamma_all: Option<f64>,
    /// Smallest factor in `[0, 1)` satisfying at least 95% of the steps, if any.
    pub gamma_95: Option<f64>,
}

/// Factor each step needs for the recursion to hold; `None` if no finite one does.
fn required_factors(trace: &SimTrace) -> Result<Vec<Option<f64>>, SimError> {
    let p_true = &trace.meta.p_true;
    let rows: Vec<_> = trace.post_warmup().collect();
    if rows.iter().any(|r| r.p_star.is_none()) || rows.is_empty() {
        return Err(SimError::MissingOracle);
    }
    Ok(rows
        .windows(2)
        .map(|pair| {
            let (now, next) = (pair[0], pair[1]);
            let q = now.p_star_error(p_true).unwrap_or(f64::NAN);
            let excess = next.err - q - RECURSION_SLACK;
            if excess <= 0.0 {
                Some(0.0)
            } else if now.err + q > 0.0 {
                Some(excess / (now.err + q))
            } else {
                None
            }
        })
        .collect())
}

pub fn check_error_recursion(trace: &SimTrace, gamma: f64) -> Result<ErrorRecursionReport, SimError> {
    let req = required_factors(trace)?;
    let steps = req.len();
    let holding = req.iter().filter(|r| r.is_some_and(|g| g <= gamma)).count();
    let mut sorted: Vec<f64> = req.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    sorted.sort_by(f64::total_cmp);
    let below_one = |g: f64| (g < 1.0).then_some(g);
    let gamma_all = sorted.last().copied().and_then(below_one);
    let need = ((0.95 * steps as f64).ceil() as usize).clamp(1, steps.max(1));
    let gamma_95 = sorted.get(need - 1).copied().and_then(below_one);
    Ok(ErrorRecursionReport {
        steps,
        fraction_holding: if steps == 0 { 1.0 } else { holding as f64 / steps as f64 },
        gamma_all,
        gamma_95,
    })
}

/// Empirical contraction `|p_hat_{t+1} - p*_t| / |p_hat_t - p*_t|` of the online update.
pub fn contraction_factors(trace: &SimTrace) -> Result<Vec<f64>, SimError> {
    let rows: Vec<_> = trace.post_warmup().collect();
    if rows.iter().any(|r| r.p_star.is_none()) || rows.is_empty() {
        return Err(SimError::MissingOracle);
    }
    Ok(rows
        .windows(2)
        .filter_map(|pair| {
            let ps = pair[0].p_star.as_ref()?;
            let before = dist(&pair[0].p_hat, ps);
            let after = dist(&pair[1].p_hat, ps);
            (before > 0.0).then(|| after / before)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltimateBoundReport {
    pub burn_in: usize,
    pub max_error: f64,
    /// `(1 + gamma) / (1 - gamma) * nu`; infinite when `gamma >= 1`.
    pub bound: f64,
    pub holds: bool,
}

pub fn check_ultimate_bound(trace: &SimTrace, gamma: f64, nu: f64, burn_in: usize) -> UltimateBoundReport {
    let max_error = trace
        .rows
        .iter()
        .filter(|r| r.t > burn_in)
        .map(|r| r.err)
        .fold(0.0, f64::max);
    let bound = if gamma < 1.0 {
        (1.0 + gamma) / (1.0 - gamma) * nu
    } else {
        f64::INFINITY
    };
    UltimateBoundReport {
        burn_in,
        max_error,
        bound,
        holds: max_error <= bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// `W(chi_{t+1}) - W(chi_t)` for every consecutive pair of rows.
    pub margins: Vec<f64>,
    /// Times `t` where `W` grew although the disturbance proxy was small
    /// compared with `|chi_t|`.
    pub flagged: Vec<usize>,
    pub max_increase: f64,
    /// Rows violating `lo(|chi|) <= W(chi) <= hi(|chi|)`.
    pub sandwich_violations: Vec<usize>,
}

/// Disturbance proxy below this fraction of `|chi_t|` counts as small.
pub const LYAPUNOV_PROXY_RATIO: f64 = 0.1;

/// Lower comparison bound `min(alpha_lo, lambda sigma)(r / 2)` for `W`.
pub fn w_lower_bound(r: f64, fb: &NominalFeedback, ly: &LyapunovConfig) -> f64 {
    // V(x) = |x| gives alpha_lo(r) = alpha_hi(r) = r
    (0.5 * r).min(ly.lambda * fb.sigma(0.5 * r))
}

/// Upper comparison bound `alpha_hi(r) + lambda sigma(r)` for `W`.
pub fn w_upper_bound(r: f64, fb: &NominalFeedback, ly: &LyapunovConfig) -> f64 {
    r + ly.lambda * fb.sigma(r)
}

pub fn check_lyapunov(trace: &SimTrace, fb: &NominalFeedback, ly: &LyapunovConfig) -> LyapunovReport {
    let p_true = &trace.meta.p_true;
    let nu = trace.meta.nu;
    let mut margins = Vec::with_capacity(trace.rows.len());
    let mut flagged = Vec::new();
    let mut sandwich_violations = Vec::new();
    let w: Vec<f64> = trace.rows.iter().map(|r| r.chi().lyapunov(fb, ly)).collect();
    for (i, row) in trace.rows.iter().enumerate() {
        let n = row.chi().norm();
        let tol = 1e-12 * w[i].max(1.0);
        if w[i] < w_lower_bound(n, fb, ly) - tol || w[i] > w_upper_bound(n, fb, ly) + tol {
            sandwich_violations.push(row.t);
        }
        if i + 1 < w.len() {
            let m = w[i + 1] - w[i];
            margins.push(m);
            let proxy = nu + row.p_star_error(p_true).unwrap_or(0.0);
            if m > 0.0 && proxy < LYAPUNOV_PROXY_RATIO * n {
                flagged.push(row.t);
            }
        }
    }
    LyapunovReport {
        max_increase: margins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        margins,
        flagged,
        sandwich_violations,
    }
}

/// Per-step constraint audit of a trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub budget_violations: Vec<usize>,
    pub input_violations: Vec<usize>,
    /// Feasible-flagged steps whose recomputed level falls below `delta_prime`.
    pub level_violations: Vec<usize>,
    /// Largest gap between the logged and the recomputed level.
    pub max_level_mismatch: f64,
}

impl ConstraintReport {
    pub fn total(&self) -> usize {
        self.budget_violations.len() + self.input_violations.len() + self.level_violations.len()
    }
}

/// Re-derives the budget, input bound and predicted Grammian level of every
/// post-warm-up row from the logged measured states, estimates and inputs.
pub fn check_constraints(trace: &SimTrace, model: &dyn SystemModel, cfg: &LoopConfig) -> ConstraintReport {
    let l = trace.meta.window_len;
    let mut report = ConstraintReport::default();
    for (i, row) in trace.rows.iter().enumerate() {
        if row.t < trace.meta.warmup_len() {
            continue;
        }
        let x0 = DVector::from_column_slice(&row.x0);
        let u_obs = DVector::from_column_slice(&row.u_obs);
        let u = DVector::from_column_slice(&row.u);
        if u_obs.norm() > obs_budget(&x0, &cfg.mpc, &cfg.feedback) + 1e-12 {
            report.budget_violations.push(row.t);
        }
        if u.norm() > model.input_radius() + 1e-12 {
            report.input_violations.push(row.t);
        }
        let p_hat = DVector::from_column_slice(&row.p_hat);
        let first = (i + 2).saturating_sub(l);
        let mut states: Vec<_> = trace.rows[first..=i]
            .iter()
            .map(|r| DVector::from_column_slice(&r.x0))
            .collect();
        states.push(model.dynamics(&x0, &u, &p_hat));
        let level = grammian_full(model, &p_hat, &states)
            .ok()
            .and_then(|o| min_eigenvalue(&o).ok())
            .unwrap_or(f64::NAN);
        let mismatch = (level - row.delta).abs();
        if mismatch.is_nan() || mismatch > report.max_level_mismatch {
            report.max_level_mismatch = if mismatch.is_nan() { f64::INFINITY } else { mismatch };
        }
        if row.feasible && !(level >= cfg.mpc.delta_prime) {
            report.level_violations.push(row.t);
        }
    }
    report
}

/// Run summary written next to each trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub steps: usize,
    pub warmup: usize,
    pub burn_in: usize,
    pub final_error: f64,
    pub max_post_burn_in_error: f64,
    /// Fraction of post-warm-up steps with `delta >= delta_prime`.
    pub feasibility_rate: f64,
    /// Fraction of post-warm-up steps with realized `lambda_min < 1e-3`.
    pub low_observability_rate: f64,
    pub lammin_min: f64,
    pub lammin_max: f64,
    pub constraint_violations: usize,
    pub lyapunov_flagged: usize,
    /// Recursion-fitted factor used for the ultimate bound (oracle runs only).
    pub fitted_gamma: Option<f64>,
    pub gamma_95: Option<f64>,
    pub recursion_fraction: Option<f64>,
    pub contraction_max: Option<f64>,
    pub contraction_median: Option<f64>,
    pub ultimate_bound: Option<f64>,
    pub ultimate_bound_holds: Option<bool>,
}

/// Threshold under which the realized Grammian counts as rank deficient.
pub const LOW_OBSERVABILITY: f64 = 1e-3;

pub fn summarize(trace: &SimTrace, model: &dyn SystemModel, cfg: &LoopConfig, burn_in: usize) -> RunSummary {
    let post: Vec<_> = trace.post_warmup().collect();
    let n = post.len().max(1) as f64;
    let feasible = post.iter().filter(|r| r.feasible).count() as f64 / n;
    let low = post.iter().filter(|r| r.lammin < LOW_OBSERVABILITY).count() as f64 / n;
    let lammin_min = post.iter().map(|r| r.lammin).fold(f64::INFINITY, f64::min);
    let lammin_max = post.iter().map(|r| r.lammin).fold(f64::NEG_INFINITY, f64::max);
    let bound_probe = check_ultimate_bound(trace, 0.0, trace.meta.nu, burn_in);
    let recursion = check_error_recursion(trace, 0.99).ok();
    let fitted = recursion.as_ref().and_then(|r| r.gamma_all);
    let ultimate = fitted.map(|g| check_ultimate_bound(trace, g, trace.meta.nu, burn_in));
    let contraction = contraction_factors(trace).ok().filter(|c| !c.is_empty()).map(|mut c| {
        c.sort_by(f64::total_cmp);
        (c[c.len() - 1], c[c.len() / 2])
    });
    RunSummary {
        seed: trace.meta.seed,
        mode: trace.meta.mode,
        config_hash: trace.meta.config_hash.clone(),
        steps: trace.rows.len(),
        warmup: trace.meta.warmup_len(),
        burn_in,
        final_error: trace.final_error().unwrap_or(f64::NAN),
        max_post_burn_in_error: bound_probe.max_error,
        feasibility_rate: feasible,
        low_observability_rate: low,
        lammin_min,
        lammin_max,
        constraint_violations: check_constraints(trace, model, cfg).total(),
        lyapunov_flagged: check_lyapunov(trace, &cfg.feedback, &cfg.lyapunov).flagged.len(),
        fitted_gamma: fitted,
        gamma_95: recursion.as_ref().and_then(|r| r.gamma_95),
        recursion_fraction: recursion.as_ref().map(|r| r.fraction_holding),
        contraction_max: contraction.map(|c| c.0),
        contraction_median: contraction.map(|c| c.1),
        ultimate_bound: ultimate.as_ref().map(|u| u.bound),
        ultimate_bound_holds: ultimate.map(|u| u.holds),
    }
}

/// Column order of `trace.csv`.
pub const TRACE_HEADER: [&str; 22] = [
    "t", "x1", "x2", "x01", "x02", "y1", "y2", "u1", "u2", "uobs1", "uobs2", "phat1", "phat2", "err", "lammin",
    "delta", "feasible", "V", "W", "budget", "pstar1", "pstar2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub t: usize,
    pub x1: f64,
    pub x2: f64,
    pub x01: f64,
    pub x02: f64,
    pub y1: f64,
    pub y2: f64,
    pub u1: f64,
    pub u2: f64,
    pub uobs1: f64,
    pub uobs2: f64,
    pub phat1: f64,
    pub phat2: f64,
    pub err: f64,
    pub lammin: f64,
    pub delta: f64,
    pub feasible: u8,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub budget: f64,
    pub pstar1: Option<f64>,
    pub pstar2: Option<f64>,
}

impl CsvRecord {
    fn from_row(r: &TraceRow) -> Result<Self, SimError> {
        let planar = |name: &str, v: &[f64]| {
            if v.len() == 2 {
                Ok([v[0], v[1]])
            } else {
                Err(SimError::NotPlanar(format!("{name} has {} components", v.len())))
            }
        };
        let x = planar("x", &r.x)?;
        let x0 = planar("x0", &r.x0)?;
        let y = planar("y", &r.y)?;
        let u = planar("u", &r.u)?;
        let uo = planar("u_obs", &r.u_obs)?;
        let ph = planar("p_hat", &r.p_hat)?;
        let ps = r.p_star.as_deref().map(|p| planar("p_star", p)).transpose()?;
        Ok(Self {
            t: r.t,
            x1: x[0],
            x2: x[1],
            x01: x0[0],
            x02: x0[1],
            y1: y[0],
            y2: y[1],
            u1: u[0],
            u2: u[1],
            uobs1: uo[0],
            uobs2: uo[1],
            phat1: ph[0],
            phat2: ph[1],
            err: r.err,
            lammin: r.lammin,
            delta: r.delta,
            feasible: r.feasible as u8,
            v: r.v,
            w: r.w,
            budget: r.budget,
            pstar1: ps.map(|p| p[0]),
            pstar2: ps.map(|p| p[1]),
        })
    }
}

/// Writes the planar trace in the fixed CSV layout of [`TRACE_HEADER`].
pub fn write_trace_csv<W: Write>(trace: &SimTrace, out: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in &trace.rows {
        wtr.serialize(CsvRecord::from_row(r)?)?;
    }
    if trace.rows.is_empty() {
        wtr.write_record(TRACE_HEADER)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<CsvRecord>, SimError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_HEADER {
        return Err(SimError::NotPlanar(format!("unexpected header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(SimError::from)).collect()
}
