//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfcurves::numerics::minimize_1d;
use rfcurves::predictor::{predict, tau1_derivative, theta_hat_samples};
use rfcurves::regularizers::{
    expected_moreau, expected_moreau_closed_form, scalar_moreau, scalar_prox, EnvelopeContext, RegularizerSpec,
    SignalSpec,
};
use rfcurves::saddle::{psi, solve_saddle, stationarity_residual, ProblemSpec, SolverOptions};
use rfcurves::simulator::{
    activation_constants, fit_elastic_net, fit_elastic_net_cd, run_trials, sizes_for_ratio, Activation,
    ExperimentConfig, FeatureKind, FitOptions,
};
use rfcurves::sweep::{run_compare, run_theory_sweep, SweepConfig};

// Tolerances and budgets.
const ENVELOPE_REL_TOL: f64 = 1e-8;
const ENVELOPE_BUDGET: Duration = Duration::from_secs(5);
const PROX_FD_TOL: f64 = 1e-6;
const PROX_BUDGET: Duration = Duration::from_secs(1);
const RESIDUAL_TOL: f64 = 1e-6;
const SADDLE_BUDGET: Duration = Duration::from_secs(600);
// Inner optima are searched within a factor 100 of the solved coordinate.
const NESTED_LOG_HALF_WIDTH: f64 = 4.605_170_185_988_092;
const DERIVATIVE_REL_TOL: f64 = 1e-4;
const COMPARE_SE_MULT: f64 = 3.0;
const COMPARE_REL_TOL: f64 = 0.05;
const PEAK_REL_TOL: f64 = 0.15;
const COMPARE_BUDGET: Duration = Duration::from_secs(600);
const SPARSITY_SE_MULT: f64 = 3.0;
const SPARSITY_ABS_TOL: f64 = 0.05;
const L1_CONTINUITY_REL_TOL: f64 = 1e-3;
const M0_GATE: f64 = 0.5;
const UNIVERSALITY_SE_MULT: f64 = 3.0;
const SOLVER_REL_GAP: f64 = 1e-8;
// Both solvers are run to full convergence; the simulation default (1e-9 on the
// prox-gradient residual) bounds the objective error only to ~1e-7 relative when
// α/m is tiny and n < m.
const ORACLE_FIT_TOL: f64 = 1e-13;

const SIGMA_EPS2: f64 = 0.1;
const ALPHAS: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1];

type Check = Result<String, String>;

fn tanh() -> (f64, f64) {
    activation_constants(&Activation::Tanh, 200).expect("tanh constants")
}

fn gamma_grid() -> Vec<f64> {
    (0..19).map(|i| ((2.0 + i as f64) / 10.0 * 1e12).round() / 1e12).collect()
}

fn spec(gamma: f64, lambda: f64, alpha: f64) -> ProblemSpec {
    let (r1, rs) = tanh();
    ProblemSpec::new(gamma, 1.0, SIGMA_EPS2, r1, rs, RegularizerSpec::elastic_net(lambda, alpha).unwrap(), SignalSpec::half_ones())
        .unwrap()
}

fn ok(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within_budget(t: Instant, budget: Duration) -> Result<Duration, String> {
    let spent = t.elapsed();
    if spent <= budget {
        Ok(spent)
    } else {
        Err(format!("took {spent:.1?}, budget {budget:?}"))
    }
}

fn c1_envelope_oracle() -> Check {
    let t = Instant::now();
    let signal = SignalSpec::half_ones();
    let grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
    let mut worst = 0.0f64;
    for &lambda in &grid {
        for &alpha in &grid {
            for &ratio in &[0.1, 0.5, 1.0, 2.0, 10.0] {
                let ctx = EnvelopeContext::new(1.0, ratio, 1.0).map_err(ok)?;
                let reg = RegularizerSpec::elastic_net(lambda, alpha).map_err(ok)?;
                let closed = expected_moreau_closed_form(lambda, alpha, &ctx, &signal);
                let quad = expected_moreau(&reg, &ctx, &signal, 200).map_err(ok)?;
                let rel = (closed - quad).abs() / closed.abs();
                worst = worst.max(rel);
                if !(rel <= ENVELOPE_REL_TOL) {
                    return Err(format!("λ={lambda} α={alpha} c2/c1={ratio}: rel err {rel:.2e}"));
                }
            }
        }
    }
    let spent = within_budget(t, ENVELOPE_BUDGET)?;
    Ok(format!("125 points, worst rel err {worst:.1e}, {spent:.2?}"))
}

fn c2_prox_properties() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp();
    let mut worst_fd = 0.0f64;
    for i in 0..1000 {
        let lambda = log_uniform(&mut rng, 1e-4, 1.0);
        let alpha = log_uniform(&mut rng, 1e-4, 1.0);
        let step = log_uniform(&mut rng, 1e-2, 1e2);
        let y1 = 3.0 * (2.0 * rng.random::<f64>() - 1.0);
        let y2 = 3.0 * (2.0 * rng.random::<f64>() - 1.0);
        let en = RegularizerSpec::elastic_net(lambda, alpha).map_err(ok)?;
        let (p1, p2) = (scalar_prox(&en, step, y1).map_err(ok)?, scalar_prox(&en, step, y2).map_err(ok)?);
        if (p1 - p2).abs() > (y1 - y2).abs() * (1.0 + 1e-12) {
            return Err(format!("point {i}: prox expands |{p1}-{p2}| > |{y1}-{y2}|"));
        }
        let h = 1e-6;
        let kink = lambda * step;
        if ((y1.abs() - kink).abs()) > 2.0 * h {
            let fd = (scalar_moreau(&en, step, y1 + h).map_err(ok)? - scalar_moreau(&en, step, y1 - h).map_err(ok)?) / (2.0 * h);
            let grad = (y1 - p1) / step;
            let err = (fd - grad).abs() / grad.abs().max(1.0);
            worst_fd = worst_fd.max(err);
            if err > PROX_FD_TOL {
                return Err(format!("point {i}: envelope gradient {grad} vs FD {fd}"));
            }
        }
        let lasso = RegularizerSpec::lasso(lambda).map_err(ok)?;
        let en0 = RegularizerSpec::elastic_net(lambda, 0.0).map_err(ok)?;
        for y in [y1, y2] {
            let (a, b) = (scalar_prox(&en0, step, y).map_err(ok)?, scalar_prox(&lasso, step, y).map_err(ok)?);
            let (ma, mb) = (scalar_moreau(&en0, step, y).map_err(ok)?, scalar_moreau(&lasso, step, y).map_err(ok)?);
            if a.to_bits() != b.to_bits() || ma.to_bits() != mb.to_bits() {
                return Err(format!("point {i}: EN(λ,0) and lasso differ at y={y}"));
            }
        }
    }
    let spent = within_budget(t, PROX_BUDGET)?;
    Ok(format!("1000 points, worst FD gradient err {worst_fd:.1e}, {spent:.2?}"))
}

/// Value of the problem over coordinates `from..4` (β, ξ maximized; q, t
/// minimized) with the earlier ones fixed, by nested Brent in log coordinates.
fn nested_value(s: &ProblemSpec, y: [f64; 4], from: usize, quad_order: usize) -> Result<f64, String> {
    if from == 4 {
        return psi(y[0], y[1], y[2], y[3], s, quad_order).map_err(ok);
    }
    let sign = if from % 2 == 0 { -1.0 } else { 1.0 };
    let centre = y[from].ln();
    let mut failure = None;
    let m = minimize_1d(
        |u| {
            let mut z = y;
            z[from] = u.exp();
            nested_value(s, z, from + 1, quad_order).map(|v| sign * v).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::INFINITY
            })
        },
        centre - NESTED_LOG_HALF_WIDTH,
        centre + NESTED_LOG_HALF_WIDTH,
        1e-10,
    )
    .map_err(ok)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(sign * m.min),
    }
}

fn c3_saddle_correctness() -> Check {
    let t = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(ok)?;
    let opts = SolverOptions::default();
    let mut solved = Vec::new();
    let mut worst = 0.0f64;
    pool.install(|| -> Result<(), String> {
        for &alpha in &ALPHAS {
            for &gamma in &gamma_grid() {
                let s = spec(gamma, 1e-3, alpha);
                let pt = solve_saddle(&s, &opts).map_err(|e| format!("γ={gamma} α={alpha}: {e}"))?;
                let r = stationarity_residual(&pt, &s);
                worst = worst.max(r);
                if !(r <= RESIDUAL_TOL) {
                    return Err(format!("γ={gamma} α={alpha}: residual {r:.2e}"));
                }
                solved.push((s, pt));
            }
        }
        Ok(())
    })?;
    let spent = within_budget(t, SADDLE_BUDGET)?;

    // Saddle inequalities at 10 random cells, 50 draws per axis. A perturbed
    // coordinate is compared through the value of the problem nested inside it:
    // with the others frozen, ψ is locally convex in β, so only the re-optimized
    // inner value is bounded by ψ*.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (s, pt) = &solved[rng.random_range(0..solved.len())];
        let x = pt.coords();
        let centre = psi(x[0], x[1], x[2], x[3], s, opts.quad_order).map_err(ok)?;
        let slack = 1e-12 * centre.abs().max(1.0);
        for axis in 0..4 {
            for _ in 0..50 {
                let mut y = x;
                y[axis] *= (rng.random_range(-1.0..1.0) * 2f64.ln()).exp();
                let v = nested_value(s, y, axis + 1, opts.quad_order)?;
                let maximized = axis % 2 == 0;
                let holds = if maximized { v <= centre + slack } else { v >= centre - slack };
                if !holds {
                    return Err(format!(
                        "γ={} axis {axis}: nested value {v} vs ψ*={centre} at {:?}",
                        s.gamma, y
                    ));
                }
            }
        }
    }
    Ok(format!("95 points, worst residual {worst:.1e}, {spent:.1?}; inequalities hold at 10 cells"))
}

fn c4_derivative_consistency() -> Check {
    let opts = SolverOptions::default();
    let points = [
        (0.3, 1e-3),
        (0.6, 1e-3),
        (0.9, 1e-3),
        (1.2, 1e-3),
        (1.8, 1e-3),
        (0.5, 1e-2),
        (1.0, 1e-2),
        (1.5, 1e-2),
        (0.7, 1e-1),
        (2.0, 1e-1),
    ];
    let mut worst = 0.0f64;
    for (gamma, alpha) in points {
        let s = spec(gamma, 1e-3, alpha);
        let pt = solve_saddle(&s, &opts).map_err(ok)?;
        let d = tau1_derivative(&s, &pt, &opts).map_err(ok)?;
        let resolved = d.resolved.ok_or("no re-solve derivative")?;
        let rel = (d.danskin - resolved).abs() / d.danskin.abs();
        worst = worst.max(rel);
        if !(rel <= DERIVATIVE_REL_TOL) {
            return Err(format!("γ={gamma} α={alpha}: Danskin {} vs re-solve {resolved} (rel {rel:.1e})", d.danskin));
        }
    }
    Ok(format!("10 points, worst rel gap {worst:.1e}"))
}

fn compare_point(gamma: f64, alpha: f64, rel_tol: f64) -> Result<String, String> {
    let cfg = SweepConfig { axis_values: vec![gamma], alpha, trials: 20, seed: 1, ..SweepConfig::default() };
    let table = run_compare(&cfg).map_err(ok)?;
    if table.error_count() > 0 {
        return Err(format!("γ={gamma}: {:?}", table.rows[0].last()));
    }
    let get = |c: &str| table.numbers(c)[0];
    let mut notes = Vec::new();
    for metric in ["train", "gen"] {
        let (th, emp, se) = (get(&format!("{metric}_theory")), get(&format!("{metric}_emp")), get(&format!("{metric}_se")));
        let allowed = (COMPARE_SE_MULT * se).max(rel_tol * th.abs());
        if !((th - emp).abs() <= allowed) {
            return Err(format!("γ={gamma} α={alpha} {metric}: theory {th:.5} vs {emp:.5}±{se:.5}"));
        }
        notes.push(format!("{metric} {th:.4}/{emp:.4}"));
    }
    Ok(format!("γ={gamma}: {}", notes.join(" ")))
}

fn c5_theory_vs_simulation() -> Check {
    let t = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().map_err(ok)?;
    let notes = pool.install(|| -> Result<Vec<String>, String> {
        Ok(vec![
            compare_point(0.5, 1e-2, COMPARE_REL_TOL)?,
            compare_point(1.5, 1e-2, COMPARE_REL_TOL)?,
            compare_point(1.05, 1e-4, PEAK_REL_TOL)?,
        ])
    })?;
    let spent = within_budget(t, COMPARE_BUDGET)?;
    Ok(format!("{}; {spent:.1?}", notes.join("; ")))
}

fn c6_double_descent() -> Check {
    let opts = SolverOptions::default();
    let gen = |gamma: f64, alpha: f64| predict(&spec(gamma, 1e-3, alpha), &opts).map(|p| p.gen_error).map_err(ok);
    let (low, peak, high) = (gen(0.5, 1e-4)?, gen(1.05, 1e-4)?, gen(2.0, 1e-4)?);
    if !(peak > low && peak > high) {
        return Err(format!("α=1e-4: gen(0.5)={low:.4} gen(1.05)={peak:.4} gen(2.0)={high:.4}"));
    }
    let cfg = SweepConfig { axis_values: gamma_grid(), alpha: 1e-1, ..SweepConfig::default() };
    let table = run_theory_sweep(&cfg).map_err(ok)?;
    if table.error_count() > 0 {
        return Err("α=1e-1 sweep had failing rows".into());
    }
    let g = table.numbers("gen_theory");
    if let Some(i) = (1..g.len() - 1).find(|&i| g[i] > g[i - 1] && g[i] > g[i + 1]) {
        return Err(format!("α=1e-1: interior local maximum at γ={}", gamma_grid()[i]));
    }
    Ok(format!("peak {peak:.3} > {low:.3}, {high:.3}; α=1e-1 curve has no interior maximum"))
}

fn c7_sparsity() -> Check {
    let opts = SolverOptions::default();
    let mut notes = Vec::new();
    let mut failures = Vec::new();

    // Analytic vs Monte-Carlo of the limiting estimator.
    let points = [
        (0.5, 1e-2, 1e-3),
        (0.5, 1e-1, 1e-3),
        (1.0, 1e-2, 1e-3),
        (1.0, 1e-1, 1e-2),
        (1.5, 1e-2, 1e-3),
        (1.5, 3e-2, 1e-3),
        (2.0, 1e-1, 1e-3),
        (0.8, 3e-2, 1e-1),
        (1.2, 1e-3, 1e-4),
        (1.8, 1e-2, 1e-2),
    ];
    let draws = 1_000_000;
    let mut worst_z = 0.0f64;
    for (k, &(gamma, lambda, alpha)) in points.iter().enumerate() {
        let s = spec(gamma, lambda, alpha);
        let p = predict(&s, &opts).map_err(ok)?;
        let samples = theta_hat_samples(&s, &p.saddle, draws, 100 + k as u64).map_err(ok)?;
        let mc = samples.iter().filter(|v| **v != 0.0).count() as f64 / draws as f64;
        let se = (p.nonzero_fraction * (1.0 - p.nonzero_fraction) / draws as f64).sqrt();
        let z = (mc - p.nonzero_fraction).abs() / se;
        worst_z = worst_z.max(z);
        if !(z <= SPARSITY_SE_MULT) {
            failures.push(format!("MC at γ={gamma} λ={lambda}: {mc} vs {} ({z:.1} SE)", p.nonzero_fraction));
        }
    }
    notes.push(format!("MC worst {worst_z:.1} SE"));

    // Analytic vs solver sparsity at the finite ratio.
    let (r1, rs) = tanh();
    let (n, m, d) = sizes_for_ratio(1.5, 1.0, 1000).map_err(ok)?;
    let reg = RegularizerSpec::elastic_net(1e-2, 1e-3).map_err(ok)?;
    let theory = predict(&ProblemSpec::from_sizes(n, m, d, SIGMA_EPS2, r1, rs, reg.clone(), SignalSpec::half_ones()).map_err(ok)?, &opts)
        .map_err(ok)?
        .nonzero_fraction;
    let mut cfg = ExperimentConfig::new(n, m, d, SIGMA_EPS2, reg);
    cfg.seed = 3;
    let agg = run_trials(&cfg, FeatureKind::Nonlinear).map_err(ok)?;
    let gap = (agg.nonzero.mean - theory).abs();
    if !(gap <= SPARSITY_ABS_TOL) {
        failures.push(format!("solver sparsity {:.4} vs theory {theory:.4}", agg.nonzero.mean));
    }
    notes.push(format!("solver {:.3} vs {theory:.3}", agg.nonzero.mean));

    // Vanishing ridge term against pure ℓ1.
    let with_ridge = predict(&spec(1.5, 1e-3, 1e-8), &opts).map_err(ok)?;
    let lasso = predict(&spec(1.5, 1e-3, 0.0), &opts).map_err(ok)?;
    let rel = (with_ridge.gen_error - lasso.gen_error).abs() / lasso.gen_error;
    if !(rel <= L1_CONTINUITY_REL_TOL) {
        failures.push(format!("ℓ1 continuity: gen {} vs {} (rel {rel:.1e})", with_ridge.gen_error, lasso.gen_error));
    }
    notes.push(format!("ℓ1 continuity rel {rel:.1e}"));
    if !(lasso.m0 < M0_GATE) {
        failures.push(format!("M0 = {:.4} at γ=1.5, λ=1e-3 is not below {M0_GATE}", lasso.m0));
    }
    notes.push(format!("M0 {:.4}", lasso.m0));

    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join("; "), notes.join("; ")))
    }
}

fn c8_universality() -> Check {
    let mut notes = Vec::new();
    for gamma in [0.5, 1.0, 1.5] {
        let (n, m, d) = sizes_for_ratio(gamma, 1.0, 1000).map_err(ok)?;
        let mut cfg = ExperimentConfig::new(n, m, d, SIGMA_EPS2, RegularizerSpec::elastic_net(1e-3, 1e-2).map_err(ok)?);
        cfg.seed = 5;
        let nl = run_trials(&cfg, FeatureKind::Nonlinear).map_err(ok)?;
        let sg = run_trials(&cfg, FeatureKind::Surrogate).map_err(ok)?;
        for (metric, a, b) in [("train", nl.train, sg.train), ("gen", nl.gen, sg.gen)] {
            let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            let z = (a.mean - b.mean).abs() / se;
            if !(z <= UNIVERSALITY_SE_MULT) {
                return Err(format!("γ={gamma} {metric}: nonlinear {:.5}±{:.5} vs surrogate {:.5}±{:.5}", a.mean, a.std_error, b.mean, b.std_error));
            }
            notes.push(format!("γ={gamma} {metric} z={z:.2}"));
        }
    }
    Ok(notes.join(", "))
}

fn c9_solver_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let grid = [1e-4, 1e-3, 1e-2, 1e-1];
    let mut worst = 0.0f64;
    for k in 0..20 {
        let (lambda, alpha) = (grid[k % 4], grid[(k / 4 + k) % 4]);
        let x = ndarray::Array2::from_shape_simple_fn((50, 80), || rng.sample::<f64, _>(rand_distr::StandardNormal));
        let y = ndarray::Array1::from_shape_simple_fn(50, || rng.sample::<f64, _>(rand_distr::StandardNormal));
        let fista = fit_elastic_net(x.view(), y.view(), lambda, alpha, &FitOptions { tol: ORACLE_FIT_TOL, max_iter: 1_000_000 }).map_err(ok)?;
        let cd = fit_elastic_net_cd(x.view(), y.view(), lambda, alpha, ORACLE_FIT_TOL, 1_000_000).map_err(ok)?;
        let gap = (fista.objective - cd.objective).abs() / cd.objective.abs();
        worst = worst.max(gap);
        if !(gap <= SOLVER_REL_GAP) {
            return Err(format!("instance {k} (λ={lambda}, α={alpha}): FISTA {} vs CD {}", fista.objective, cd.objective));
        }
    }
    Ok(format!("20 instances, worst rel objective gap {worst:.1e}"))
}

fn c10_determinism() -> Check {
    let cfg = SweepConfig { axis_values: vec![0.5, 1.5], trials: 6, seed: 17, ..SweepConfig::default() };
    let run = |threads: usize| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(ok)?;
        pool.install(|| run_compare(&cfg).and_then(|t| t.to_csv_string())).map_err(ok)
    };
    let (a, b) = (run(2)?, run(2)?);
    if a != b {
        return Err("two runs at 2 threads differ".into());
    }
    if run(1)? != a {
        return Err("1-thread run differs from 2-thread run".into());
    }
    Ok(format!("{} bytes identical across runs and thread counts", a.len()))
}

const CRITERIA: [(&str, fn() -> Check); 10] = [
    ("envelope closed form vs quadrature", c1_envelope_oracle),
    ("prox and envelope properties", c2_prox_properties),
    ("saddle stationarity and inequalities", c3_saddle_correctness),
    ("Danskin vs re-solve derivative", c4_derivative_consistency),
    ("theory vs finite-size simulation", c5_theory_vs_simulation),
    ("double-descent shape", c6_double_descent),
    ("sparsity consistency", c7_sparsity),
    ("nonlinear vs Gaussian surrogate", c8_universality),
    ("FISTA vs coordinate descent", c9_solver_oracle),
    ("compare output determinism", c10_determinism),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
