//! Observables read off a solved saddle point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{legendre_rule, normal_expectation_split, q, NORMAL_TRUNCATION};
use crate::regularizers::{
    dead_zone_edges, sample_theta_hat_coordinate, zeta_thresholds, EnvelopeContext,
};
use crate::saddle::{
    solve_saddle, solve_saddle_warm, PsiEvaluator, ProblemSpec, SaddlePoint, SolverOptions,
    TestFunction, TestFunctionKind,
};

/// Relative half-width of the boxes used for warm-started re-solves.
const WARM_WIDTH: f64 = 1e-2;
const MAX_DERIVATIVE_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub train_error: f64,
    pub gen_error: f64,
    pub nonzero_fraction: f64,
    /// Same quantity as `nonzero_fraction`, kept under the name used for the
    /// sparsity condition of the lasso analysis.
    pub m0: f64,
    pub saddle: SaddlePoint,
    /// `|danskin − resolve| / max(1, |danskin|)` for the τ1 derivative; zero when
    /// the regularizer is not strongly convex and only the Danskin route runs.
    pub derivative_method_gap: f64,
}

/// Both estimates of `∂P̃3/∂τ1` at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau1Derivative {
    pub danskin: f64,
    pub resolved: Option<f64>,
    pub gap: f64,
}

fn check_unperturbed(spec: &ProblemSpec) -> Result<()> {
    if spec.tau1 != 0.0 || spec.tau2 != 0.0 {
        return Err(Error::InvalidArgument("predictions need tau1 = tau2 = 0".into()));
    }
    Ok(())
}

/// Saddle, train, gen and sparsity in one pass.
pub fn predict(spec: &ProblemSpec, opts: &SolverOptions) -> Result<TheoryPrediction> {
    check_unperturbed(spec)?;
    let saddle = solve_saddle(spec, opts)?;
    predict_from_saddle(spec, saddle, opts)
}

/// Like [`predict`], reusing an already solved saddle point.
pub fn predict_from_saddle(
    spec: &ProblemSpec,
    saddle: SaddlePoint,
    opts: &SolverOptions,
) -> Result<TheoryPrediction> {
    check_unperturbed(spec)?;
    let derivative = tau1_derivative(spec, &saddle, opts)?;
    let nonzero = nonzero_fraction(spec, &saddle, opts.quad_order)?;
    Ok(TheoryPrediction {
        train_error: saddle.value,
        gen_error: spec.sigma_eps2 + derivative.danskin,
        nonzero_fraction: nonzero,
        m0: nonzero,
        saddle,
        derivative_method_gap: derivative.gap,
    })
}

pub fn train_error(spec: &ProblemSpec, opts: &SolverOptions) -> Result<f64> {
    check_unperturbed(spec)?;
    Ok(solve_saddle(spec, opts)?.value)
}

pub fn gen_error(spec: &ProblemSpec, opts: &SolverOptions) -> Result<f64> {
    Ok(predict(spec, opts)?.gen_error)
}

/// `∂P̃3/∂τ1` at zero. The Danskin estimate differentiates ψ in τ1 with the
/// saddle frozen; when μ > 0 the problem is also re-solved at `τ1 = ±h` and the
/// two estimates compared.
pub fn tau1_derivative(
    spec: &ProblemSpec,
    saddle: &SaddlePoint,
    opts: &SolverOptions,
) -> Result<Tau1Derivative> {
    let star = spec.tau1_star();
    let h = 1e-5 * star.max(1.0);
    let ev = PsiEvaluator::new(spec, opts.quad_order, opts.envelope)?;
    let x = saddle.coords();
    let danskin = (ev.eval_tau1(x, h)? - ev.eval_tau1(x, -h)?) / (2.0 * h);
    if !(spec.reg.mu() > 0.0) {
        return Ok(Tau1Derivative { danskin, resolved: None, gap: 0.0 });
    }
    // The re-solve must stay inside the admissible perturbation range.
    let h2 = h.min(star);
    let up = solve_saddle_warm(&spec.clone().with_tau1(h2)?, opts, saddle, WARM_WIDTH)?;
    let down = solve_saddle_warm(&spec.clone().with_tau1(-h2)?, opts, saddle, WARM_WIDTH)?;
    let resolved = (up.value - down.value) / (2.0 * h2);
    let gap = (danskin - resolved).abs() / danskin.abs().max(1.0);
    if gap > MAX_DERIVATIVE_GAP {
        return Err(Error::Inconsistency { gap });
    }
    Ok(Tau1Derivative { danskin, resolved: Some(resolved), gap })
}

/// Asymptotic fraction of nonzero coordinates, `Σ_a w_a [Q(ζ1) + Q(ζ2)]` for the
/// elastic-net family; for custom penalties one minus the limit of a narrow bump.
pub fn nonzero_fraction(spec: &ProblemSpec, saddle: &SaddlePoint, quad_order: usize) -> Result<f64> {
    match spec.reg.elastic_net_params() {
        Some((lambda, _)) if lambda == 0.0 => Ok(1.0),
        Some((lambda, _)) => Ok(spec
            .signal
            .atoms()
            .iter()
            .map(|atom| {
                let (z1, z2) = zeta_thresholds(saddle.c1, saddle.c2, spec.gamma, lambda, atom.value);
                atom.weight * (q(z1) + q(z2))
            })
            .sum::<f64>()
            .clamp(0.0, 1.0)),
        None => {
            let bump = TestFunction::bump(1e-3 * spec.signal.scale())?;
            Ok((1.0 - expected_test_function(spec, saddle, &bump, quad_order)?).clamp(0.0, 1.0))
        }
    }
}

/// φ at which the estimator coordinate crosses `level`, if inside the truncated line.
fn crossing(
    spec: &ProblemSpec,
    ctx: &EnvelopeContext,
    theta_star: f64,
    level: f64,
) -> Result<Option<f64>> {
    // The coordinate is nonincreasing in φ.
    let g = |phi: f64| -> Result<f64> {
        Ok(sample_theta_hat_coordinate(&spec.reg, ctx, theta_star, phi)? - level)
    };
    let (mut lo, mut hi) = (-NORMAL_TRUNCATION, NORMAL_TRUNCATION);
    if g(lo)? < 0.0 || g(hi)? > 0.0 {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// `E[h̄(θ̂)]` over atoms and φ at a frozen saddle point, by piecewise quadrature.
pub fn expected_test_function(
    spec: &ProblemSpec,
    saddle: &SaddlePoint,
    h: &TestFunction,
    quad_order: usize,
) -> Result<f64> {
    let ctx = saddle.envelope_context(spec.gamma)?;
    let rule = legendre_rule(quad_order)?;
    let mut total = 0.0;
    for atom in spec.signal.atoms() {
        let mut cuts = Vec::new();
        if let Some((lambda, _)) = spec.reg.elastic_net_params() {
            if lambda > 0.0 {
                cuts.extend(dead_zone_edges(lambda, &ctx, atom.value));
            }
        }
        for edge in h.support_edges() {
            if let Some(phi) = crossing(spec, &ctx, atom.value, edge)? {
                cuts.push(phi);
            }
        }
        let mut err = None;
        let e = normal_expectation_split(&rule, &cuts, |phi| {
            match sample_theta_hat_coordinate(&spec.reg, &ctx, atom.value, phi) {
                Ok(x) => h.eval(x),
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        total += atom.weight * e;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunctionLimit {
    pub value: f64,
    /// Relative gap to the re-solved `∂P̃3/∂τ2`, when that check applies.
    pub resolve_gap: Option<f64>,
}

/// Limit of `(1/m) Σ h̄(θ̂_i)`.
///
/// The value is the quadrature expectation at the unperturbed saddle. For
/// `h̄(x) = x²` with an elastic-net penalty and μ > 0 the perturbed problem stays
/// in closed form, and the value is cross-checked against a re-solve at `τ2 = ±h`.
pub fn test_function_limit(
    spec: &ProblemSpec,
    h: &TestFunction,
    opts: &SolverOptions,
) -> Result<TestFunctionLimit> {
    check_unperturbed(spec)?;
    let saddle = solve_saddle(spec, opts)?;
    let value = expected_test_function(spec, &saddle, h, opts.quad_order)?;
    let fast_path = matches!(h.kind(), TestFunctionKind::Square) && spec.reg.elastic_net_params().is_some();
    if !(fast_path && spec.reg.mu() > 0.0) {
        return Ok(TestFunctionLimit { value, resolve_gap: None });
    }
    let with_h = spec.clone().with_test_fn(h.clone(), 0.0)?;
    let star = with_h.tau2_star();
    let step = (1e-5 * star.max(1.0)).min(star);
    let up = solve_saddle_warm(&with_h.clone().with_test_fn(h.clone(), step)?, opts, &saddle, WARM_WIDTH)?;
    let down = solve_saddle_warm(&with_h.with_test_fn(h.clone(), -step)?, opts, &saddle, WARM_WIDTH)?;
    let resolved = (up.value - down.value) / (2.0 * step);
    let gap = (value - resolved).abs() / value.abs().max(1.0);
    if gap > MAX_DERIVATIVE_GAP {
        return Err(Error::Inconsistency { gap });
    }
    Ok(TestFunctionLimit { value, resolve_gap: Some(gap) })
}

/// One Monte-Carlo draw of a limiting estimator coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaHatDraw {
    pub theta_star: f64,
    pub phi: f64,
    pub theta_hat: f64,
}

/// `count` i.i.d. draws: atom by weight, `φ ~ N(0,1)`, then the prox map.
pub fn theta_hat_draws(
    spec: &ProblemSpec,
    saddle: &SaddlePoint,
    count: usize,
    seed: u64,
) -> Result<Vec<ThetaHatDraw>> {
    let ctx = saddle.envelope_context(spec.gamma)?;
    let atoms = spec.signal.atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut theta_star = atoms[atoms.len() - 1].value;
        for atom in atoms {
            acc += atom.weight;
            if u < acc {
                theta_star = atom.value;
                break;
            }
        }
        let phi: f64 = rng.sample(StandardNormal);
        let theta_hat = sample_theta_hat_coordinate(&spec.reg, &ctx, theta_star, phi)?;
        out.push(ThetaHatDraw { theta_star, phi, theta_hat });
    }
    Ok(out)
}

pub fn theta_hat_samples(
    spec: &ProblemSpec,
    saddle: &SaddlePoint,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(theta_hat_draws(spec, saddle, count, seed)?.into_iter().map(|d| d.theta_hat).collect())
}
