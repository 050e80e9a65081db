//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary so the verdict lines are always printed.

use std::f64::consts::TAU;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use obsmpc::config::RunConfig;
use obsmpc::controller::{MpcConfig, MpcProblem, NominalFeedback};
use obsmpc::estimator::{eval_cost, fast_update, full_solve, EstimateState, MeasurementWindow, PenaltyConfig};
use obsmpc::grammian::grammian_full;
use obsmpc::model::{bearing_observe, BearingModel, BearingScenario};
use obsmpc::simulation::{
    check_constraints, check_error_recursion, check_lyapunov, check_ultimate_bound, run, LoopConfig, Mode,
    SimTrace,
};

const SEEDS: u64 = 20;
const STEPS: usize = 300;
const BURN_IN: usize = 100;
const ORACLE_ZERO: f64 = 1e-6;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn default_config() -> (BearingScenario, LoopConfig) {
    let cfg = RunConfig::default();
    (cfg.model.clone(), cfg.loop_config())
}

fn with_noise(lc: &LoopConfig, nu: f64, seed: u64) -> LoopConfig {
    let mut c = lc.clone();
    c.noise.nu = nu;
    c.noise.seed = seed;
    c
}

/// Runs one 20-seed sweep concurrently and returns the traces and wall time.
fn sweep(mode: Mode, oracle: bool) -> (Vec<SimTrace>, f64) {
    let (scenario, lc) = default_config();
    let start = Instant::now();
    let traces = (0..SEEDS)
        .into_par_iter()
        .map(|s| run(&scenario, &with_noise(&lc, lc.noise.nu, s), STEPS, mode, oracle).expect("run completes"))
        .collect();
    (traces, start.elapsed().as_secs_f64())
}

fn low_rate(trace: &SimTrace) -> f64 {
    let post: Vec<_> = trace.post_warmup().collect();
    post.iter().filter(|r| r.lammin < 1e-3).count() as f64 / post.len() as f64
}

fn reproduction(active: &[SimTrace], t_active: f64, nominal: &[SimTrace], t_nominal: f64) -> Verdict {
    let good_active = active.iter().filter(|t| t.final_error().unwrap() <= 0.2).count();
    let degraded = nominal
        .iter()
        .filter(|t| t.final_error().unwrap() >= 0.5 || low_rate(t) >= 0.5)
        .count();
    let worst = active.iter().map(|t| t.final_error().unwrap()).fold(0.0, f64::max);
    Verdict {
        name: "reproduction of the two-trajectory comparison",
        pass: good_active >= 18 && degraded >= 18 && t_active <= 60.0 && t_nominal <= 60.0,
        detail: format!(
            "active |e_T| <= 0.2 on {good_active}/20 (worst {worst:.3}); nominal degraded on {degraded}/20; \
             sweep times {t_active:.1}s / {t_nominal:.1}s"
        ),
    }
}

fn analytic_grammian(p: &Vector2<f64>, states: &[Vector2<f64>]) -> Matrix2<f64> {
    states.iter().fold(Matrix2::zeros(), |acc, x| {
        let d = x - p;
        let h = Vector2::new(d.y, -d.x) / d.norm_squared();
        acc + h * h.transpose()
    })
}

fn random_window(rng: &mut ChaCha8Rng, p: &Vector2<f64>, len: usize, r_min: f64, r_max: f64) -> Vec<Vector2<f64>> {
    (0..len)
        .map(|_| {
            let r = rng.random_range(r_min..r_max);
            let a = rng.random_range(0.0..TAU);
            p + Vector2::new(r * a.cos(), r * a.sin())
        })
        .collect()
}

fn dv(v: &Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn grammian_oracle() -> Verdict {
    let model = BearingModel::new(0.1, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let len = rng.random_range(1..=20);
        let states = random_window(&mut rng, &p, len, 0.5, 10.0);
        let got = grammian_full(&model, &dv(&p), &states.iter().map(dv).collect::<Vec<_>>()).unwrap();
        let want = analytic_grammian(&p, &states);
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((got[(i, j)] - want[(i, j)]).abs());
            }
        }
    }
    let pair = grammian_full(
        &model,
        &DVector::zeros(2),
        &[DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
    )
    .unwrap();
    let exact = pair == DMatrix::identity(2, 2);
    Verdict {
        name: "grammian oracle equivalence",
        pass: worst <= 1e-12 && exact,
        detail: format!("max entry gap {worst:.2e} over 1000 windows; symmetric pair gives I2 exactly: {exact}"),
    }
}

fn noise_free_window(states: &[Vector2<f64>], p: &Vector2<f64>) -> MeasurementWindow {
    let obs = states.iter().map(|x| dv(&bearing_observe(x, p).unwrap())).collect();
    let controls = vec![DVector::zeros(2); states.len() - 1];
    MeasurementWindow::from_samples(states.iter().map(dv).collect(), obs, controls)
}

fn hessian_consistency() -> Verdict {
    let model = BearingModel::new(0.1, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let p = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let len = rng.random_range(2..=20);
        let states = random_window(&mut rng, &p, len, 0.5, 10.0);
        let w = noise_free_window(&states, &p);
        let cost = eval_cost(&model, &w, &dv(&p), &PenaltyConfig::Zero).unwrap();
        let o = grammian_full(&model, &dv(&p), &states.iter().map(dv).collect::<Vec<_>>()).unwrap();
        worst = worst.max((cost.gauss_newton_hessian - o).abs().max());
    }
    Verdict {
        name: "Gauss-Newton Hessian equals the Grammian at the truth",
        pass: worst <= 1e-9,
        detail: format!("max entry gap {worst:.2e} over 500 noise-free windows"),
    }
}

fn contraction() -> Verdict {
    let model = BearingModel::new(0.1, 2.0);
    let cfg = RunConfig::default().estimator.solver;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let mut failures = 0;
    while instances < 100 {
        let p = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let states = random_window(&mut rng, &p, 10, 0.5, 3.0);
        let o = analytic_grammian(&p, &states);
        if o.symmetric_eigenvalues().min() < 1.0 {
            continue;
        }
        let w = noise_free_window(&states, &p);
        let a = rng.random_range(0.0..TAU);
        let r = rng.random_range(0.01..=0.5);
        let start = dv(&(p + Vector2::new(r * a.cos(), r * a.sin())));
        let p_star = match full_solve(&model, &w, &start, &cfg) {
            Ok(s) => s.p,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let next = fast_update(&model, &EstimateState::new(start.clone()), &w, &cfg).unwrap();
        let ratio = (&next.p_hat - &p_star).norm() / (&start - &p_star).norm();
        worst = worst.max(ratio);
        instances += 1;
    }
    Verdict {
        name: "fast update contracts toward the window minimiser",
        pass: worst <= 0.5 && failures == 0,
        detail: format!("worst ratio {worst:.3} over 100 windows with lambda_min >= 1; oracle failures {failures}"),
    }
}

fn recursion(oracle_runs: &[SimTrace]) -> Verdict {
    let mut ok = 0;
    let mut worst_fraction: f64 = 1.0;
    let mut worst_gamma: f64 = 0.0;
    for t in oracle_runs {
        let fit = check_error_recursion(t, 0.99).unwrap();
        if let Some(g) = fit.gamma_95 {
            let rep = check_error_recursion(t, g).unwrap();
            worst_fraction = worst_fraction.min(rep.fraction_holding);
            worst_gamma = worst_gamma.max(g);
            if rep.fraction_holding >= 0.95 {
                ok += 1;
            }
        } else {
            worst_fraction = 0.0;
        }
    }
    Verdict {
        name: "error recursion",
        pass: ok == oracle_runs.len(),
        detail: format!(
            "gamma < 1 holding on >= 95% of steps for {ok}/20 seeds (worst fraction {worst_fraction:.3}, \
             largest gamma {worst_gamma:.3})"
        ),
    }
}

fn ultimate_bound(oracle_runs: &[SimTrace]) -> Verdict {
    let (scenario, lc) = default_config();
    let clean = run(&scenario, &with_noise(&lc, 0.0, 0), STEPS, Mode::ObservabilitySeeking, false).unwrap();
    let clean_max = check_ultimate_bound(&clean, 0.0, 0.0, BURN_IN).max_error;
    let mut held = 0;
    let mut margins = Vec::new();
    for t in oracle_runs {
        let gamma = check_error_recursion(t, 0.99).unwrap().gamma_all.unwrap_or(1.0);
        let rep = check_ultimate_bound(t, gamma, t.meta.nu, BURN_IN);
        margins.push(rep.max_error / rep.bound);
        held += rep.holds as usize;
    }
    let worst = margins.iter().copied().fold(0.0, f64::max);
    Verdict {
        name: "ultimate bound",
        pass: clean_max <= 1e-6 && held >= 18,
        detail: format!(
            "noise-free post-burn-in error {clean_max:.2e} (<= 1e-6 required); noisy runs within bound on \
             {held}/20 (worst max/bound {worst:.3})"
        ),
    }
}

fn constraints(all: &[&SimTrace]) -> Verdict {
    let (scenario, lc) = default_config();
    let model = scenario.model();
    let mut violations = 0;
    let mut mismatch: f64 = 0.0;
    let mut feasible_steps = 0;
    for t in all {
        let rep = check_constraints(t, &model, &lc);
        violations += rep.total();
        mismatch = mismatch.max(rep.max_level_mismatch);
        feasible_steps += t.post_warmup().filter(|r| r.feasible).count();
    }
    Verdict {
        name: "constraint satisfaction",
        pass: violations == 0,
        detail: format!(
            "{violations} violations over {} runs; {feasible_steps} feasible steps re-certified; \
             max logged/recomputed level gap {mismatch:.1e}",
            all.len()
        ),
    }
}

/// Brute-force ring search written against the analytic tangent formula.
fn brute_force_ring(
    p: &Vector2<f64>,
    history: &[Vector2<f64>],
    x0: &Vector2<f64>,
    nominal: &Vector2<f64>,
    budget: f64,
    delta: f64,
    u_max: f64,
) -> f64 {
    let level = |u_obs: Vector2<f64>| {
        let mut u = nominal + u_obs;
        if u.norm() > u_max {
            u *= u_max / u.norm();
        }
        let next = x0 + delta * u;
        if (next - p).norm() < 1e-9 {
            return f64::NEG_INFINITY;
        }
        let mut states = history.to_vec();
        states.push(next);
        let o = analytic_grammian(p, &states);
        let (a, b, c) = (o[(0, 0)], o[(0, 1)], o[(1, 1)]);
        0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt()
    };
    (0..3600)
        .map(|i| {
            let a = TAU * i as f64 / 3600.0;
            level(Vector2::new(budget * a.cos(), budget * a.sin()))
        })
        .fold(level(Vector2::zeros()), f64::max)
}

fn mpc_oracle() -> Verdict {
    let model = BearingModel::new(0.1, 2.0);
    let mpc = MpcConfig::default();
    let fb = NominalFeedback {
        gain: 1.0,
        sat_radius: 2.0,
        u_max: 2.0,
        delta: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x3d);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 200 {
        let p_hat = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let states = random_window(&mut rng, &p_hat, 10, 0.5, 6.0);
        let x0 = states[9];
        if (x0 - p_hat).norm() < 1.0 || x0.norm() < 0.2 {
            continue;
        }
        let w = noise_free_window(&states, &p_hat);
        let problem = MpcProblem::new(&model, &w, &dv(&p_hat), &dv(&x0), &mpc, &fb).unwrap();
        let ours = problem.solve().unwrap().objective;
        let nominal = Vector2::new(problem.nominal()[0], problem.nominal()[1]);
        let brute = brute_force_ring(&p_hat, &states[1..], &x0, &nominal, problem.budget(), 0.1, 2.0);
        let gap = (brute - ours) / brute.abs().max(1e-12);
        worst = worst.max(gap);
        n += 1;
    }
    Verdict {
        name: "MPC solver against brute-force ring search",
        pass: worst <= 0.02,
        detail: format!("largest relative shortfall {:.3}% over 200 instances", 100.0 * worst.max(0.0)),
    }
}

fn lyapunov_decrease() -> (Verdict, SimTrace) {
    let (mut scenario, lc) = default_config();
    scenario.x0 = [1.2, 1.5];
    let lc = with_noise(&lc, 0.0, 0);
    let trace = run(&scenario, &lc, STEPS, Mode::ObservabilitySeeking, true).unwrap();
    let mut v_ok = true;
    for pair in trace.rows.windows(2) {
        if pair[0].v > 1e-6 && pair[1].v >= pair[0].v {
            v_ok = false;
        }
    }
    let report = check_lyapunov(&trace, &lc.feedback, &lc.lyapunov);
    // the oracle stops at a gradient tolerance, so its error is zero only to solver precision
    let p_true = &trace.meta.p_true;
    let zero_from = trace.rows.iter().position(|r| {
        r.p_star.as_ref().is_some_and(|ps| {
            let q: f64 = ps.iter().zip(p_true).map(|(a, b)| (a - b).powi(2)).sum();
            q.sqrt() <= ORACLE_ZERO
        })
    });
    let w_ok = match zero_from {
        Some(i) => report.margins[i..].iter().all(|m| *m <= 0.0),
        None => false,
    };
    let verdict = Verdict {
        name: "noise-free Lyapunov decrease",
        pass: v_ok && w_ok && report.sandwich_violations.is_empty(),
        detail: format!(
            "V strictly decreasing above 1e-6: {v_ok}; W nonincreasing from t={} on: {w_ok}; \
             sandwich violations {}",
            zero_from.map_or("-".into(), |i| i.to_string()),
            report.sandwich_violations.len()
        ),
    };
    (verdict, trace)
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run on a plain invocation
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let (active, t_active) = sweep(Mode::ObservabilitySeeking, false);
    let (nominal, t_nominal) = sweep(Mode::NominalOnly, false);
    let (oracle_runs, _) = sweep(Mode::ObservabilitySeeking, true);
    let (lyap, lyap_trace) = lyapunov_decrease();
    let all: Vec<&SimTrace> = active
        .iter()
        .chain(&nominal)
        .chain(&oracle_runs)
        .chain(std::iter::once(&lyap_trace))
        .collect();

    let verdicts = [
        reproduction(&active, t_active, &nominal, t_nominal),
        grammian_oracle(),
        hessian_consistency(),
        contraction(),
        recursion(&oracle_runs),
        ultimate_bound(&oracle_runs),
        constraints(&all),
        mpc_oracle(),
        lyap,
    ];
    let mut failed = 0;
    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        failed += (!v.pass) as usize;
    }
    println!("acceptance: {}/{} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
