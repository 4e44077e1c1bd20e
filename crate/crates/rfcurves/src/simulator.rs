//! Finite-size experiments with random features.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::hermite_rule;
use crate::regularizers::{RegularizerSpec, ScalarFn, SignalSpec};

/// Odd activation applied elementwise to `Wz/√d`.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Erf,
    Identity,
    #[serde(skip)]
    Custom { f: ScalarFn, label: String },
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Erf => libm::erf(x),
            Activation::Identity => x,
            Activation::Custom { f, .. } => f(x),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Tanh => "tanh".into(),
            Activation::Erf => "erf".into(),
            Activation::Identity => "identity".into(),
            Activation::Custom { label, .. } => label.clone(),
        }
    }

    /// Oddness spot check on `[-5, 5]`.
    pub fn check_odd(&self) -> Result<()> {
        for i in 0..=100 {
            let x = 0.05 * i as f64;
            let (a, b) = (self.eval(x), self.eval(-x));
            if !((a + b).abs() <= 1e-12 * (1.0 + a.abs())) {
                return Err(Error::InvalidArgument(format!(
                    "activation {} is not odd at {x}",
                    self.name()
                )));
            }
        }
        Ok(())
    }
}

/// `(ρ1, ρ*²) = (E[aσ(a)], E[σ(a)²] − ρ1²)` for `a ~ N(0,1)`, by Gauss–Hermite.
pub fn activation_constants(activation: &Activation, quad_order: usize) -> Result<(f64, f64)> {
    activation.check_odd()?;
    let rule = hermite_rule(quad_order)?;
    let rho1 = rule.expect(|a| a * activation.eval(a));
    let second = rule.expect(|a| activation.eval(a).powi(2));
    let rho_star2 = second - rho1 * rho1;
    if rho_star2 < -1e-12 || !rho_star2.is_finite() {
        return Err(Error::Numeric(format!("rho_star2 = {rho_star2} for {}", activation.name())));
    }
    Ok((rho1, rho_star2.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Nonlinear,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenErrorMode {
    TestSet,
    SurrogateExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 50_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub sigma_eps2: f64,
    pub reg: RegularizerSpec,
    pub signal: SignalSpec,
    pub activation: Activation,
    pub seed: u64,
    pub trials: usize,
    pub test_size: usize,
    pub zero_threshold_scale: f64,
    /// `None` picks test-set estimation for nonlinear features and the exact
    /// covariance formula for surrogate features.
    pub gen_mode: Option<GenErrorMode>,
    pub fit: FitOptions,
}

/// `(n, m, d)` for ratio `γ = m/n` at `n + m = total`: `m = round(total·γ/(1+γ))`,
/// `d = round(m/δ)`.
pub fn sizes_for_ratio(gamma: f64, delta: f64, total: usize) -> Result<(usize, usize, usize)> {
    if !(gamma > 0.0 && delta > 0.0) {
        return Err(Error::InvalidArgument("gamma and delta must be positive".into()));
    }
    let m = (total as f64 * gamma / (1.0 + gamma)).round() as usize;
    let n = total.saturating_sub(m);
    let d = ((m as f64 / delta).round() as usize).max(1);
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("gamma {gamma} leaves an empty side at total {total}")));
    }
    Ok((n, m, d))
}

impl ExperimentConfig {
    /// Elastic-net experiment with the default protocol settings
    /// (tanh, half-ones signal, test set of 10n, threshold 0.01/√m).
    pub fn new(n: usize, m: usize, d: usize, sigma_eps2: f64, reg: RegularizerSpec) -> Self {
        Self {
            n,
            m,
            d,
            sigma_eps2,
            reg,
            signal: SignalSpec::half_ones(),
            activation: Activation::Tanh,
            seed: 0,
            trials: 20,
            test_size: 10 * n,
            zero_threshold_scale: 0.01,
            gen_mode: None,
            fit: FitOptions::default(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    pub fn eta(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    pub fn delta(&self) -> f64 {
        self.m as f64 / self.d as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::InvalidArgument("n, m, d must be positive".into()));
        }
        if !(self.sigma_eps2 >= 0.0 && self.sigma_eps2.is_finite()) {
            return Err(Error::InvalidArgument("sigma_eps2 must be >= 0".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidArgument("test_size must be >= 1".into()));
        }
        if self.reg.elastic_net_params().is_none() {
            return Err(Error::InvalidArgument("the simulator fits elastic-net penalties only".into()));
        }
        self.activation.check_odd()
    }

    fn lambda_alpha(&self) -> (f64, f64) {
        self.reg.elastic_net_params().expect("validated elastic-net penalty")
    }
}

/// One synthetic regression instance.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `m × d` first-layer weights.
    pub w: Array2<f64>,
    /// `n × d` inputs.
    pub z: Array2<f64>,
    /// `n × m` features.
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub theta_star: Array1<f64>,
    pub eps: Array1<f64>,
    pub kind: FeatureKind,
    /// `(ρ1, ρ*²)` used to build surrogate features.
    pub surrogate: Option<(f64, f64)>,
}

const DATA_STREAM: u64 = 0;
const SURROGATE_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Generator for one stream of one trial; trials are seeded `seed + trial`.
pub fn trial_rng(seed: u64, trial: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// θ* by composition: the first `⌈m·w⌉` coordinates take the first atom, and so on.
pub fn compose_theta_star(signal: &SignalSpec, m: usize) -> Array1<f64> {
    let mut theta = Array1::zeros(m);
    let mut at = 0;
    for atom in signal.atoms() {
        let count = (m as f64 * atom.weight).ceil() as usize;
        let end = (at + count).min(m);
        theta.slice_mut(ndarray::s![at..end]).fill(atom.value);
        at = end;
    }
    if at < m {
        let last = signal.atoms()[signal.atoms().len() - 1].value;
        theta.slice_mut(ndarray::s![at..]).fill(last);
    }
    theta
}

fn nonlinear_features(z: ArrayView2<f64>, w: ArrayView2<f64>, activation: &Activation) -> Array2<f64> {
    let d = w.ncols() as f64;
    let mut x = z.dot(&w.t());
    let scale = d.sqrt().recip();
    x.mapv_inplace(|v| activation.eval(v * scale));
    x
}

/// `X̃ = (ρ1/√d)·Z·Wᵀ + ρ*·G`, `G` i.i.d. standard normal.
pub fn surrogate_features(
    w: ArrayView2<f64>,
    z: ArrayView2<f64>,
    rho1: f64,
    rho_star2: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if w.ncols() != z.ncols() {
        return Err(Error::InvalidArgument(format!(
            "W has {} columns but Z has {}",
            w.ncols(),
            z.ncols()
        )));
    }
    let d = w.ncols() as f64;
    let mut x = z.dot(&w.t());
    x *= rho1 / d.sqrt();
    let rho_star = rho_star2.sqrt();
    if rho_star > 0.0 {
        let g = gaussian_matrix(x.nrows(), x.ncols(), rng);
        x.scaled_add(rho_star, &g);
    }
    Ok(x)
}

fn labels(x: &Array2<f64>, theta_star: &Array1<f64>, eps: &Array1<f64>) -> Array1<f64> {
    let m = x.ncols() as f64;
    x.dot(theta_star) / m.sqrt() + eps
}

/// Nonlinear-feature instance for `trial`, reproducible from `(seed, trial)`.
pub fn generate_dataset(cfg: &ExperimentConfig, trial: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = trial_rng(cfg.seed, trial, DATA_STREAM);
    let w = gaussian_matrix(cfg.m, cfg.d, &mut rng);
    let z = gaussian_matrix(cfg.n, cfg.d, &mut rng);
    let noise = cfg.sigma_eps2.sqrt();
    let eps = Array1::from_shape_simple_fn(cfg.n, || noise * rng.sample::<f64, _>(StandardNormal));
    let theta_star = compose_theta_star(&cfg.signal, cfg.m);
    let x = nonlinear_features(z.view(), w.view(), &cfg.activation);
    let y = labels(&x, &theta_star, &eps);
    Ok(Dataset { w, z, x, y, theta_star, eps, kind: FeatureKind::Nonlinear, surrogate: None })
}

/// Surrogate-feature instance sharing `W`, `Z` and `ε` with [`generate_dataset`].
pub fn generate_surrogate_dataset(
    cfg: &ExperimentConfig,
    trial: usize,
    rho1: f64,
    rho_star2: f64,
) -> Result<Dataset> {
    let base = generate_dataset(cfg, trial)?;
    let mut rng = trial_rng(cfg.seed, trial, SURROGATE_STREAM);
    let x = surrogate_features(base.w.view(), base.z.view(), rho1, rho_star2, &mut rng)?;
    let y = labels(&x, &base.theta_star, &base.eps);
    Ok(Dataset {
        x,
        y,
        kind: FeatureKind::Surrogate,
        surrogate: Some((rho1, rho_star2)),
        ..base
    })
}

/// `(1/(2n))‖y − Xθ/√m‖² + (λ/m)‖θ‖₁ + (α/(2m))‖θ‖²`.
pub fn elastic_net_objective(x: ArrayView2<f64>, y: ArrayView1<f64>, theta: ArrayView1<f64>, lambda: f64, alpha: f64) -> f64 {
    let (n, m) = (x.nrows() as f64, x.ncols() as f64);
    let resid = &y - &(x.dot(&theta) / m.sqrt());
    resid.dot(&resid) / (2.0 * n)
        + lambda / m * theta.iter().map(|v| v.abs()).sum::<f64>()
        + alpha / (2.0 * m) * theta.dot(&theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Array1<f64>,
    pub iterations: usize,
    /// ∞-norm of the gradient mapping at `theta`.
    pub residual: f64,
    pub objective: f64,
}

fn soft(v: f64, threshold: f64) -> f64 {
    (v.abs() - threshold).max(0.0).copysign(v)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn power_iteration(g: &Array2<f64>, max_iter: usize, tol: f64) -> f64 {
    let m = g.nrows();
    let mut v = Array1::from_elem(m, (m as f64).sqrt().recip());
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let gv = g.dot(&v);
        let next = v.dot(&gv);
        let norm = gv.dot(&gv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = gv / norm;
        if (next - estimate).abs() <= tol * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Elastic-net fit by FISTA with backtracking and gradient-based restarts.
///
/// Works on the Gram form `G = XᵀX/(nm)`, `b = Xᵀy/(n√m)`, carrying `G·x` and
/// `G·y` along the iteration so each step costs one matrix–vector product.
pub fn fit_elastic_net(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    alpha: f64,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (n, m) = x.dim();
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("y has {} entries, X has {n} rows", y.len())));
    }
    if !(lambda >= 0.0 && alpha >= 0.0) {
        return Err(Error::InvalidArgument("lambda and alpha must be >= 0".into()));
    }
    if lambda == 0.0 && alpha == 0.0 && n < m {
        return Err(Error::IllPosed(format!(
            "unregularized least squares with n = {n} < m = {m} has no unique minimizer"
        )));
    }
    let (nf, mf) = (n as f64, m as f64);
    let gram = x.t().dot(&x) / (nf * mf);
    let b = x.t().dot(&y) / (nf * mf.sqrt());
    let c = y.dot(&y) / (2.0 * nf);
    let ridge = alpha / mf;
    let l1 = lambda / mf;

    let smooth = |theta: &Array1<f64>, g_theta: &Array1<f64>| -> f64 {
        0.5 * theta.dot(g_theta) - b.dot(theta) + c + 0.5 * ridge * theta.dot(theta)
    };
    let gradient = |theta: &Array1<f64>, g_theta: &Array1<f64>| -> Array1<f64> {
        g_theta - &b + &(theta * ridge)
    };
    let residual_at = |theta: &Array1<f64>, grad: &Array1<f64>, lip: f64| -> f64 {
        theta
            .iter()
            .zip(grad)
            .map(|(&t, &g)| (lip * (t - soft(t - g / lip, l1 / lip))).abs())
            .fold(0.0, f64::max)
    };

    let mut lip = power_iteration(&gram, 100, 1e-10) + ridge;
    if !(lip > 0.0) {
        lip = 1.0;
    }
    let mut theta = Array1::<f64>::zeros(m);
    let mut g_theta = Array1::<f64>::zeros(m);
    let mut point = theta.clone();
    let mut g_point = g_theta.clone();
    let mut momentum = 1.0f64;
    let mut residual = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        let grad = gradient(&point, &g_point);
        let f_point = smooth(&point, &g_point);
        let (next, g_next) = loop {
            let cand = Array1::from_shape_fn(m, |i| soft(point[i] - grad[i] / lip, l1 / lip));
            let g_cand = gram.dot(&cand);
            let diff = &cand - &point;
            let bound = f_point + grad.dot(&diff) + 0.5 * lip * diff.dot(&diff);
            if smooth(&cand, &g_cand) <= bound + 1e-15 * bound.abs().max(1.0) {
                break (cand, g_cand);
            }
            lip *= 2.0;
        };

        let grad_next = gradient(&next, &g_next);
        residual = residual_at(&next, &grad_next, lip);
        if !residual.is_finite() {
            return Err(Error::Numeric(format!("FISTA diverged at iteration {iter}")));
        }
        if residual <= opts.tol {
            let objective = smooth(&next, &g_next) + l1 * next.iter().map(|v| v.abs()).sum::<f64>();
            return Ok(FitResult { theta: next, iterations: iter, residual, objective });
        }

        let step = &next - &theta;
        let restart = (&point - &next).dot(&step) > 0.0;
        if restart {
            momentum = 1.0;
            point = next.clone();
            g_point = g_next.clone();
        } else {
            let momentum_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / momentum_next;
            point = &next + &(&step * beta);
            g_point = &g_next + &((&g_next - &g_theta) * beta);
            momentum = momentum_next;
        }
        theta = next;
        g_theta = g_next;
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual })
}

/// Cyclic proximal coordinate descent on the same objective, working directly on
/// the columns of `X` with an explicit residual. Used to cross-check FISTA.
pub fn fit_elastic_net_cd(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<FitResult> {
    let (n, m) = x.dim();
    let (nf, mf) = (n as f64, m as f64);
    let a = &x / mf.sqrt();
    let col_sq: Vec<f64> = a.axis_iter(Axis(1)).map(|c| c.dot(&c) / nf).collect();
    let mut theta = Array1::<f64>::zeros(m);
    let mut resid = y.to_owned();
    for sweep in 1..=max_sweeps {
        let mut largest = 0.0f64;
        for j in 0..m {
            let col = a.column(j);
            let old = theta[j];
            let rho = col.dot(&resid) / nf + col_sq[j] * old;
            let new = soft(rho, lambda / mf) / (col_sq[j] + alpha / mf);
            let delta = new - old;
            if delta != 0.0 {
                resid.scaled_add(-delta, &col);
                theta[j] = new;
                largest = largest.max(delta.abs());
            }
        }
        if largest <= tol {
            let objective = elastic_net_objective(x, y, theta.view(), lambda, alpha);
            return Ok(FitResult { theta, iterations: sweep, residual: largest, objective });
        }
    }
    Err(Error::NonConvergence { iterations: max_sweeps, residual: f64::NAN })
}

/// Objective value at `θ̂`, penalty included.
pub fn empirical_train_error(
    theta: ArrayView1<f64>,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    reg: &RegularizerSpec,
) -> f64 {
    let (n, m) = (x.nrows() as f64, x.ncols() as f64);
    let resid = &y - &(x.dot(&theta) / m.sqrt());
    resid.dot(&resid) / (2.0 * n) + theta.iter().map(|&v| reg.value(v)).sum::<f64>() / m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Set when the test set has fewer than 100 samples.
    pub small_test_set: bool,
}

/// Mean squared prediction error on fresh data (no ½ factor).
pub fn empirical_gen_error(
    theta: ArrayView1<f64>,
    cfg: &ExperimentConfig,
    data: &Dataset,
    mode: GenErrorMode,
    rng: &mut impl Rng,
) -> Result<GenEstimate> {
    let m = cfg.m as f64;
    let err = &data.theta_star - &theta;
    match mode {
        GenErrorMode::SurrogateExact => {
            let (rho1, rho_star2) = data.surrogate.ok_or_else(|| {
                Error::InvalidArgument("surrogate_exact needs surrogate features".into())
            })?;
            let proj = data.w.t().dot(&err);
            let quad = rho1 * rho1 / cfg.d as f64 * proj.dot(&proj) + rho_star2 * err.dot(&err);
            Ok(GenEstimate { estimate: cfg.sigma_eps2 + quad / m, std_error: 0.0, small_test_set: false })
        }
        GenErrorMode::TestSet => {
            let noise = cfg.sigma_eps2.sqrt();
            let batch = 1000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut done = 0;
            while done < cfg.test_size {
                let rows = batch.min(cfg.test_size - done);
                let z = gaussian_matrix(rows, cfg.d, rng);
                let features = match data.kind {
                    FeatureKind::Nonlinear => nonlinear_features(z.view(), data.w.view(), &cfg.activation),
                    FeatureKind::Surrogate => {
                        let (rho1, rho_star2) = data.surrogate.expect("surrogate dataset carries constants");
                        surrogate_features(data.w.view(), z.view(), rho1, rho_star2, rng)?
                    }
                };
                let signal = features.dot(&err) / m.sqrt();
                for s in signal {
                    let e: f64 = rng.sample(StandardNormal);
                    let r = s + noise * e;
                    sum += r * r;
                    sum_sq += r.powi(4);
                }
                done += rows;
            }
            let count = cfg.test_size as f64;
            let mean = sum / count;
            let var = if cfg.test_size > 1 { (sum_sq / count - mean * mean).max(0.0) * count / (count - 1.0) } else { 0.0 };
            Ok(GenEstimate {
                estimate: mean,
                std_error: (var / count).sqrt(),
                small_test_set: cfg.test_size < 100,
            })
        }
    }
}

/// Fraction of coordinates with `|θ̂_i| ≥ scale/√m`.
pub fn empirical_nonzero_fraction(theta: ArrayView1<f64>, zero_threshold_scale: f64) -> f64 {
    let m = theta.len();
    if m == 0 {
        return 0.0;
    }
    let cut = zero_threshold_scale / (m as f64).sqrt();
    theta.iter().filter(|v| v.abs() >= cut).count() as f64 / m as f64
}

/// Per-trial record, also the JSON-lines dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub train: f64,
    pub gen: f64,
    pub gen_se: f64,
    pub nonzero: f64,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std_error: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let std_error = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalAggregate {
    pub train: MetricSummary,
    pub gen: MetricSummary,
    pub nonzero: MetricSummary,
    pub trials_ok: usize,
    pub trials_failed: usize,
    /// Set when fewer than two trials succeeded and the standard errors are 0 by fiat.
    pub se_undefined: bool,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<(usize, String)>,
}

/// One full trial: data, fit, metrics.
pub fn run_trial(
    cfg: &ExperimentConfig,
    kind: FeatureKind,
    trial: usize,
    surrogate: Option<(f64, f64)>,
) -> Result<TrialRecord> {
    let data = match kind {
        FeatureKind::Nonlinear => generate_dataset(cfg, trial)?,
        FeatureKind::Surrogate => {
            let (rho1, rho_star2) = surrogate.ok_or_else(|| {
                Error::InvalidArgument("surrogate trials need activation constants".into())
            })?;
            generate_surrogate_dataset(cfg, trial, rho1, rho_star2)?
        }
    };
    let (lambda, alpha) = cfg.lambda_alpha();
    let fit = fit_elastic_net(data.x.view(), data.y.view(), lambda, alpha, &cfg.fit)?;
    let train = empirical_train_error(fit.theta.view(), data.x.view(), data.y.view(), &cfg.reg);
    let mode = cfg.gen_mode.unwrap_or(match kind {
        FeatureKind::Nonlinear => GenErrorMode::TestSet,
        FeatureKind::Surrogate => GenErrorMode::SurrogateExact,
    });
    let mut rng = trial_rng(cfg.seed, trial, TEST_STREAM);
    let gen = empirical_gen_error(fit.theta.view(), cfg, &data, mode, &mut rng)?;
    Ok(TrialRecord {
        trial,
        train,
        gen: gen.estimate,
        gen_se: gen.std_error,
        nonzero: empirical_nonzero_fraction(fit.theta.view(), cfg.zero_threshold_scale),
        iters: fit.iterations,
        seed: cfg.seed.wrapping_add(trial as u64),
    })
}

/// Run `cfg.trials` independent trials and aggregate them. Failed trials are
/// excluded and counted; more than 20% failures is an error.
pub fn run_trials(cfg: &ExperimentConfig, kind: FeatureKind) -> Result<EmpiricalAggregate> {
    cfg.validate()?;
    let surrogate = match kind {
        FeatureKind::Surrogate => Some(activation_constants(&cfg.activation, 200)?),
        FeatureKind::Nonlinear => None,
    };
    let one = |trial: usize| run_trial(cfg, kind, trial, surrogate);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<TrialRecord>> = {
        use rayon::prelude::*;
        (0..cfg.trials).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<TrialRecord>> = (0..cfg.trials).map(one).collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (trial, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push((trial, e.to_string())),
        }
    }
    if records.is_empty() || failures.len() * 5 > cfg.trials {
        return Err(Error::TooManyFailures { failed: failures.len(), total: cfg.trials });
    }
    let pick = |f: fn(&TrialRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    Ok(EmpiricalAggregate {
        train: MetricSummary::of(&pick(|r| r.train)),
        gen: MetricSummary::of(&pick(|r| r.gen)),
        nonzero: MetricSummary::of(&pick(|r| r.nonzero)),
        trials_ok: records.len(),
        trials_failed: failures.len(),
        se_undefined: records.len() < 2,
        records,
        failures,
    })
}

/// Write per-trial records as JSON lines.
pub fn write_trial_records(records: &[TrialRecord], out: &mut impl std::io::Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
