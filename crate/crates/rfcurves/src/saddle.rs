//! The scalar saddle objective ψ(β, q, ξ, t) and its max–min–max–min solver.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::minimize_1d;
use crate::regularizers::{
    expected_moreau, CustomSeparable, EnvelopeContext, RegularizerKind, RegularizerSpec,
    ScalarFn, SignalSpec,
};

/// A smooth scalar test function `h̄` applied coordinate-wise to the estimator.
#[derive(Clone)]
pub enum TestFunctionKind {
    Square,
    Identity,
    /// `exp(1 − 1/(1 − (x/ε)²))` on `|x| < ε`, zero outside; equals 1 at 0.
    Bump { eps: f64 },
    Custom { value: ScalarFn, label: String },
}

#[derive(Clone)]
pub struct TestFunction {
    kind: TestFunctionKind,
    curvature_bound: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.kind {
            TestFunctionKind::Square => "square".to_string(),
            TestFunctionKind::Identity => "identity".to_string(),
            TestFunctionKind::Bump { eps } => format!("bump(eps={eps})"),
            TestFunctionKind::Custom { label, .. } => label.clone(),
        };
        write!(f, "TestFunction({name}, l={})", self.curvature_bound)
    }
}

/// Largest |f''| of the unit bump on (-1, 1), located by a fine scan.
fn unit_bump_curvature() -> f64 {
    let h = 1e-4;
    (1..20_000)
        .map(|i| -1.0 + i as f64 * 1e-4)
        .map(|u| (unit_bump(u + h) - 2.0 * unit_bump(u) + unit_bump(u - h)) / (h * h))
        .fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn unit_bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - u * u)).exp()
    }
}

impl TestFunction {
    pub fn square() -> Self {
        Self { kind: TestFunctionKind::Square, curvature_bound: 2.0 }
    }

    pub fn identity() -> Self {
        Self { kind: TestFunctionKind::Identity, curvature_bound: 0.0 }
    }

    pub fn bump(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("bump width {eps} must be > 0")));
        }
        Ok(Self { kind: TestFunctionKind::Bump { eps }, curvature_bound: unit_bump_curvature() / (eps * eps) })
    }

    pub fn custom(value: ScalarFn, curvature_bound: f64, label: impl Into<String>) -> Result<Self> {
        if !(curvature_bound >= 0.0 && curvature_bound.is_finite()) {
            return Err(Error::InvalidArgument("curvature bound must be finite and >= 0".into()));
        }
        Ok(Self { kind: TestFunctionKind::Custom { value, label: label.into() }, curvature_bound })
    }

    pub fn kind(&self) -> &TestFunctionKind {
        &self.kind
    }

    pub fn curvature_bound(&self) -> f64 {
        self.curvature_bound
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            TestFunctionKind::Square => x * x,
            TestFunctionKind::Identity => x,
            TestFunctionKind::Bump { eps } => unit_bump(x / eps),
            TestFunctionKind::Custom { value, .. } => value(x),
        }
    }

    /// Points in estimator space where `h̄` stops being smooth enough for a single
    /// quadrature panel.
    pub fn support_edges(&self) -> Vec<f64> {
        match &self.kind {
            TestFunctionKind::Bump { eps } => vec![-*eps, *eps],
            _ => vec![],
        }
    }
}

/// An asymptotic problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub gamma: f64,
    pub eta: f64,
    pub delta: f64,
    pub sigma_eps2: f64,
    pub rho1: f64,
    pub rho_star2: f64,
    pub reg: RegularizerSpec,
    pub signal: SignalSpec,
    pub tau1: f64,
    pub tau2: f64,
    pub test_fn: Option<TestFunction>,
}

impl ProblemSpec {
    /// Instance at ratios `γ = m/n` and `δ = m/d`; `η = δ/γ`.
    pub fn new(
        gamma: f64,
        delta: f64,
        sigma_eps2: f64,
        rho1: f64,
        rho_star2: f64,
        reg: RegularizerSpec,
        signal: SignalSpec,
    ) -> Result<Self> {
        let spec = Self {
            gamma,
            eta: delta / gamma,
            delta,
            sigma_eps2,
            rho1,
            rho_star2,
            reg,
            signal,
            tau1: 0.0,
            tau2: 0.0,
            test_fn: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Instance whose ratios are read off concrete sizes.
    pub fn from_sizes(
        n: usize,
        m: usize,
        d: usize,
        sigma_eps2: f64,
        rho1: f64,
        rho_star2: f64,
        reg: RegularizerSpec,
        signal: SignalSpec,
    ) -> Result<Self> {
        let spec = Self {
            gamma: m as f64 / n as f64,
            eta: n as f64 / d as f64,
            delta: m as f64 / d as f64,
            sigma_eps2,
            rho1,
            rho_star2,
            reg,
            signal,
            tau1: 0.0,
            tau2: 0.0,
            test_fn: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tau1(mut self, tau1: f64) -> Result<Self> {
        self.tau1 = tau1;
        self.validate()?;
        Ok(self)
    }

    pub fn with_test_fn(mut self, h: TestFunction, tau2: f64) -> Result<Self> {
        self.test_fn = Some(h);
        self.tau2 = tau2;
        self.validate()?;
        Ok(self)
    }

    /// Largest admissible `|τ1|`: `(μ/8)/(ρ1²(1+2√δ)² + ρ*²)`.
    pub fn tau1_star(&self) -> f64 {
        let spread = self.rho1 * self.rho1 * (1.0 + 2.0 * self.delta.sqrt()).powi(2) + self.rho_star2;
        self.reg.mu() / 8.0 / spread
    }

    /// Largest admissible `|τ2|`: `μ/(4l)`, infinite for linear test functions.
    pub fn tau2_star(&self) -> f64 {
        let l = self.test_fn.as_ref().map_or(0.0, |h| h.curvature_bound());
        if l == 0.0 {
            f64::INFINITY
        } else {
            self.reg.mu() / (4.0 * l)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("gamma", self.gamma), ("eta", self.eta), ("delta", self.delta)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if (self.delta - self.gamma * self.eta).abs() > 1e-12 * self.delta.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta {} differs from gamma*eta {}",
                self.delta,
                self.gamma * self.eta
            )));
        }
        if !(self.sigma_eps2.is_finite() && self.sigma_eps2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_eps2 {} must be >= 0", self.sigma_eps2)));
        }
        if !self.rho1.is_finite() || !(self.rho_star2.is_finite() && self.rho_star2 >= 0.0) {
            return Err(Error::InvalidArgument("activation constants must be finite, rho_star2 >= 0".into()));
        }
        if !(self.rho1 * self.rho1 + self.rho_star2 > 0.0) {
            return Err(Error::InvalidArgument("rho1^2 + rho_star2 must be positive".into()));
        }
        let mu = self.reg.mu();
        if mu > 0.0 {
            if self.tau1.abs() > self.tau1_star() * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "|tau1| = {} exceeds tau1_star = {}",
                    self.tau1.abs(),
                    self.tau1_star()
                )));
            }
            if self.tau2.abs() > self.tau2_star() * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "|tau2| = {} exceeds tau2_star = {}",
                    self.tau2.abs(),
                    self.tau2_star()
                )));
            }
        } else if self.tau1 != 0.0 || self.tau2 != 0.0 {
            return Err(Error::InvalidArgument(
                "perturbations need a strongly convex regularizer".into(),
            ));
        }
        if self.tau2 != 0.0 && self.test_fn.is_none() {
            return Err(Error::InvalidArgument("tau2 set without a test function".into()));
        }
        Ok(())
    }
}

/// The regularizer `r + τ2·h̄` that enters the envelope term.
pub fn effective_regularizer(
    reg: &RegularizerSpec,
    test_fn: Option<&TestFunction>,
    tau2: f64,
) -> Result<RegularizerSpec> {
    let h = match test_fn {
        Some(h) if tau2 != 0.0 => h.clone(),
        _ => return Ok(reg.clone()),
    };
    if let (TestFunctionKind::Square, Some((lambda, alpha))) = (h.kind(), reg.elastic_net_params()) {
        let shifted = alpha + 2.0 * tau2;
        if shifted < 0.0 {
            return Err(Error::Domain(format!("r + tau2*h is not convex (alpha {shifted})")));
        }
        return RegularizerSpec::elastic_net(lambda, shifted);
    }
    let mu = reg.mu() - tau2.abs() * h.curvature_bound();
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("r + tau2*h loses strong convexity (mu {mu})")));
    }
    let base = reg.clone();
    let h_value = h.clone();
    let value: ScalarFn = Arc::new(move |x| base.value(x) + tau2 * h_value.eval(x));
    let derivative: Option<ScalarFn> = match reg.kind() {
        RegularizerKind::Custom(_) => None,
        _ => {
            let (lambda, alpha) = reg.elastic_net_params().unwrap();
            let h_slope = h.clone();
            Some(Arc::new(move |x: f64| {
                let dh = {
                    let step = 1e-6 * x.abs().max(1e-3);
                    (h_slope.eval(x + step) - h_slope.eval(x - step)) / (2.0 * step)
                };
                let sub = if x > 0.0 { lambda } else if x < 0.0 { -lambda } else { 0.0 };
                sub + alpha * x + tau2 * dh
            }))
        }
    };
    Ok(RegularizerSpec::custom(CustomSeparable {
        value,
        prox: None,
        derivative,
        mu,
        label: format!("{} + {tau2}*{:?}", reg.label(), h),
    })?)
}

/// `(c1, c2)` at a point; errors when `β + 2qτ1 ≤ 0`.
pub fn coupling_constants(beta: f64, q: f64, xi: f64, t: f64, spec: &ProblemSpec) -> Result<(f64, f64)> {
    coupling_at(beta, q, xi, t, spec.tau1, spec)
}

fn coupling_at(beta: f64, q: f64, xi: f64, t: f64, tau1: f64, spec: &ProblemSpec) -> Result<(f64, f64)> {
    for (name, v) in [("beta", beta), ("q", q), ("xi", xi), ("t", t)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    let b = beta + 2.0 * tau1 * q;
    if !(b > 0.0) {
        return Err(Error::Domain(format!("beta + 2*q*tau1 = {b} is not positive")));
    }
    let r1 = spec.rho1 * spec.rho1;
    let c1 = b * b * r1 * xi / (2.0 * q * q * t) + b * spec.rho_star2 / (2.0 * q);
    let c2 = (b * b * r1 * xi * xi * spec.eta / (q * q) + beta * beta * spec.rho_star2).sqrt();
    Ok((c1, c2))
}

/// Which formula supplies the expected envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeMethod {
    /// Closed form for the elastic-net family, quadrature otherwise.
    #[default]
    Auto,
    ClosedForm,
    Quadrature,
}

enum Envelope {
    Closed { lambda: f64, alpha: f64 },
    Quad { reg: RegularizerSpec, quad_order: usize },
}

/// ψ with the effective regularizer resolved once, for repeated evaluation.
pub struct PsiEvaluator<'a> {
    spec: &'a ProblemSpec,
    envelope: Envelope,
}

impl<'a> PsiEvaluator<'a> {
    pub fn new(spec: &'a ProblemSpec, quad_order: usize, method: EnvelopeMethod) -> Result<Self> {
        let reg = effective_regularizer(&spec.reg, spec.test_fn.as_ref(), spec.tau2)?;
        let envelope = match (method, reg.elastic_net_params()) {
            (EnvelopeMethod::Auto | EnvelopeMethod::ClosedForm, Some((lambda, alpha))) => {
                Envelope::Closed { lambda, alpha }
            }
            (EnvelopeMethod::ClosedForm, None) => {
                return Err(Error::InvalidArgument(format!(
                    "no closed-form envelope for {}",
                    reg.label()
                )))
            }
            _ => {
                if quad_order < 50 {
                    return Err(Error::InvalidArgument(format!("quad_order {quad_order} below 50")));
                }
                Envelope::Quad { reg, quad_order }
            }
        };
        Ok(Self { spec, envelope })
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    pub fn eval(&self, x: [f64; 4]) -> Result<f64> {
        self.eval_tau1(x, self.spec.tau1)
    }

    /// ψ at an arbitrary `τ1`, bypassing the problem's admissibility bound on `τ1`.
    pub fn eval_tau1(&self, x: [f64; 4], tau1: f64) -> Result<f64> {
        let [beta, q, xi, t] = x;
        let s = self.spec;
        let (c1, c2) = coupling_at(beta, q, xi, t, tau1, s)?;
        let ctx = EnvelopeContext::new(c1, c2, s.gamma)?;
        let var_u = c2 * c2 * s.gamma;
        // Envelope term minus c2²γ/(4c1), which the closed form cancels analytically.
        let envelope = match &self.envelope {
            Envelope::Closed { lambda, alpha } => closed_envelope_reduced(*lambda, *alpha, &ctx, &s.signal),
            Envelope::Quad { reg, quad_order } => {
                expected_moreau(reg, &ctx, &s.signal, *quad_order)? - var_u / (4.0 * c1)
            }
        };
        let b = beta + 2.0 * tau1 * q;
        let terms = [
            ("envelope", envelope),
            ("xi*t/2", xi * t / 2.0),
            ("beta*q/2", beta * q / 2.0),
            ("noise", beta * s.sigma_eps2 / (2.0 * q)),
            ("xi*beta^2/(2t*eta)", xi * beta * beta / (2.0 * t * s.eta)),
            ("b*xi^2/(2q)", -b * xi * xi / (2.0 * q)),
            ("q*beta^2/(2b*eta)", -q * beta * beta / (2.0 * b * s.eta)),
            ("beta^2/2", -beta * beta / 2.0),
        ];
        let mut total = 0.0;
        for (name, v) in terms {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("psi term {name} is {v}")));
            }
            total += v;
        }
        Ok(total)
    }
}

fn closed_envelope_reduced(lambda: f64, alpha: f64, ctx: &EnvelopeContext, signal: &SignalSpec) -> f64 {
    use crate::numerics::{q, std_normal_pdf};
    let k = 2.0 * ctx.c1 + alpha;
    let var_u = ctx.c2 * ctx.c2 * ctx.gamma;
    let spread = var_u.sqrt();
    let hinge = |z: f64| (1.0 + z * z) * q(z) - z * std_normal_pdf(z);
    signal
        .atoms()
        .iter()
        .map(|atom| {
            let a = atom.value;
            let z1 = (lambda - 2.0 * ctx.c1 * a) / spread;
            let z2 = (lambda + 2.0 * ctx.c1 * a) / spread;
            atom.weight * (ctx.c1 * a * a - var_u / (2.0 * k) * (hinge(z1) + hinge(z2)))
        })
        .sum()
}

/// ψ(β, q, ξ, t) with the envelope from the closed form when available.
pub fn psi(beta: f64, q: f64, xi: f64, t: f64, spec: &ProblemSpec, quad_order: usize) -> Result<f64> {
    psi_with_method(beta, q, xi, t, spec, quad_order, EnvelopeMethod::Auto)
}

pub fn psi_with_method(
    beta: f64,
    q: f64,
    xi: f64,
    t: f64,
    spec: &ProblemSpec,
    quad_order: usize,
    method: EnvelopeMethod,
) -> Result<f64> {
    PsiEvaluator::new(spec, quad_order, method)?.eval([beta, q, xi, t])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub grid_points: usize,
    pub shrink: f64,
    pub param_tol: f64,
    pub grad_tol: f64,
    pub max_rounds: usize,
    pub quad_order: usize,
    pub envelope: EnvelopeMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grid_points: 15,
            shrink: 3.0,
            param_tol: 1e-7,
            grad_tol: 1e-6,
            max_rounds: 60,
            quad_order: 200,
            envelope: EnvelopeMethod::Auto,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 3 {
            return Err(Error::InvalidArgument("grid_points must be >= 3".into()));
        }
        if !(self.shrink > 1.0) {
            return Err(Error::InvalidArgument("shrink must exceed 1".into()));
        }
        if !(self.param_tol > 0.0 && self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidArgument("max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// A solved saddle point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub beta: f64,
    pub q: f64,
    pub xi: f64,
    pub t: f64,
    pub c1: f64,
    pub c2: f64,
    pub value: f64,
    pub residual: f64,
    /// Set when a coordinate settled on its lower floor instead of an interior point.
    pub floor_hit: bool,
    pub rounds: usize,
}

impl SaddlePoint {
    pub fn coords(&self) -> [f64; 4] {
        [self.beta, self.q, self.xi, self.t]
    }

    pub fn envelope_context(&self, gamma: f64) -> Result<EnvelopeContext> {
        EnvelopeContext::new(self.c1, self.c2, gamma)
    }
}

const AXES: [&str; 4] = ["beta", "q", "xi", "t"];
const MAXIMIZE: [bool; 4] = [true, false, true, false];
const MAX_EXPANSIONS: usize = 12;
/// Log-width below which a grid edge hit ends the grid phase.
const HANDOFF_WIDTH: f64 = 0.1;
const FD_REL_STEP: f64 = 1e-6;

fn floors() -> [f64; 4] {
    [1e-12f64.ln(), 1e-8f64.ln(), 1e-12f64.ln(), 1e-12f64.ln()]
}

/// Centered FD gradient of ψ in the original coordinates, step `1e-6·x_i`.
fn fd_gradient(ev: &PsiEvaluator, x: [f64; 4]) -> Result<[f64; 4]> {
    let mut g = [0.0; 4];
    for i in 0..4 {
        let h = FD_REL_STEP * x[i];
        let mut up = x;
        let mut down = x;
        up[i] += h;
        down[i] -= h;
        g[i] = (ev.eval(up)? - ev.eval(down)?) / (2.0 * h);
    }
    Ok(g)
}

fn residual_with(ev: &PsiEvaluator, x: [f64; 4], free: [bool; 4]) -> Result<f64> {
    let value = ev.eval(x)?;
    let g = fd_gradient(ev, x)?;
    let scale = value.abs().max(1.0);
    Ok((0..4).filter(|&i| free[i]).map(|i| g[i].abs() / scale).fold(0.0, f64::max))
}

/// Max-norm of the centered FD gradient of ψ, scaled by `max(1, |ψ|)`.
pub fn stationarity_residual(pt: &SaddlePoint, spec: &ProblemSpec) -> f64 {
    PsiEvaluator::new(spec, SolverOptions::default().quad_order, EnvelopeMethod::Auto)
        .and_then(|ev| residual_with(&ev, pt.coords(), [true; 4]))
        .unwrap_or(f64::INFINITY)
}

/// Solve `max_β min_q max_ξ min_t ψ` from the default boxes.
pub fn solve_saddle(spec: &ProblemSpec, opts: &SolverOptions) -> Result<SaddlePoint> {
    spec.validate()?;
    opts.validate()?;
    let sigma = spec.sigma_eps2.sqrt();
    let (lo, hi) = (1e-6f64.ln(), 10f64.ln());
    let q_lo = (sigma.max(1e-6) * 0.5).ln();
    Solver::new(spec, opts)?.run([(lo, hi), (q_lo, hi), (lo, hi), (lo, hi)])
}

/// Solve starting from boxes of relative half-width `rel_width` around `start`.
pub fn solve_saddle_warm(
    spec: &ProblemSpec,
    opts: &SolverOptions,
    start: &SaddlePoint,
    rel_width: f64,
) -> Result<SaddlePoint> {
    spec.validate()?;
    opts.validate()?;
    if !(rel_width > 0.0 && rel_width < 1.0) {
        return Err(Error::InvalidArgument(format!("warm-start width {rel_width} not in (0, 1)")));
    }
    let floors = floors();
    let mut boxes = [(0.0, 0.0); 4];
    for (i, x) in start.coords().into_iter().enumerate() {
        let u = x.ln();
        boxes[i] = ((u + (1.0 - rel_width).ln()).max(floors[i]), u + (1.0 + rel_width).ln());
    }
    Solver::new(spec, opts)?.run(boxes)
}

struct Solver<'a> {
    ev: PsiEvaluator<'a>,
    opts: &'a SolverOptions,
    floors: [f64; 4],
}

impl<'a> Solver<'a> {
    fn new(spec: &'a ProblemSpec, opts: &'a SolverOptions) -> Result<Self> {
        Ok(Self { ev: PsiEvaluator::new(spec, opts.quad_order, opts.envelope)?, opts, floors: floors() })
    }

    fn eval_log(&self, u: [f64; 4]) -> f64 {
        self.ev.eval(u.map(f64::exp)).unwrap_or(f64::NAN)
    }

    fn run(&self, boxes: [(f64, f64); 4]) -> Result<SaddlePoint> {
        let (incumbent, rounds, floor_hit) = self.grid_search(boxes)?;
        let free = self.free_axes(incumbent, floor_hit);
        let polished = self.polish(incumbent, free)?;
        let refined = self.newton(polished, free)?;
        let x = refined.map(f64::exp);
        let value = self.ev.eval(x)?;
        let (c1, c2) = coupling_constants(x[0], x[1], x[2], x[3], self.ev.spec())?;
        let residual = residual_with(&self.ev, x, free)?;
        let point = SaddlePoint {
            beta: x[0],
            q: x[1],
            xi: x[2],
            t: x[3],
            c1,
            c2,
            value,
            residual,
            floor_hit: free.iter().any(|f| !f),
            rounds,
        };
        if !(residual <= self.opts.grad_tol) {
            return Err(Error::SaddleNonConvergence { best: Box::new(point), residual });
        }
        Ok(point)
    }

    fn free_axes(&self, u: [f64; 4], floor_hit: [bool; 4]) -> [bool; 4] {
        let mut free = [true; 4];
        for i in 0..4 {
            free[i] = !(floor_hit[i] && u[i] - self.floors[i] < 1e-3);
        }
        free
    }

    /// Refining grid search in log coordinates. Returns the incumbent, the number
    /// of rounds, and which axes were pinned at their floor.
    fn grid_search(&self, mut boxes: [(f64, f64); 4]) -> Result<([f64; 4], usize, [bool; 4])> {
        let g = self.opts.grid_points;
        let mut expansions = [0usize; 4];
        let mut floor_hit = [false; 4];
        let mut incumbent = boxes.map(|(lo, hi)| 0.5 * (lo + hi));
        let mut rounds = 0;
        for round in 0..self.opts.max_rounds {
            rounds = round + 1;
            let grids: Vec<Vec<f64>> = boxes
                .iter()
                .map(|&(lo, hi)| (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect())
                .collect();
            let chain = self.nested_argopt(&grids)?;
            for a in 0..4 {
                incumbent[a] = grids[a][chain[a]];
            }
            if boxes.iter().all(|(lo, hi)| hi - lo <= self.opts.param_tol) {
                break;
            }
            // An edge hit on an already narrow box means the inner optima have
            // left the box along a badly conditioned valley; the re-bracketing
            // polish handles that better than further grid expansions.
            let narrow_edge = (0..4).any(|a| {
                let (lo, hi) = boxes[a];
                let on_edge = chain[a] == g - 1 || (chain[a] == 0 && lo > self.floors[a] + 1e-12);
                on_edge && hi - lo < HANDOFF_WIDTH
            });
            if narrow_edge {
                break;
            }
            for a in 0..4 {
                let (lo, hi) = boxes[a];
                let width = hi - lo;
                let at_floor = lo <= self.floors[a] + 1e-12;
                let on_edge = chain[a] == g - 1 || (chain[a] == 0 && !at_floor);
                let half = if on_edge {
                    expansions[a] += 1;
                    if expansions[a] > MAX_EXPANSIONS {
                        return Err(Error::Unbounded { axis: AXES[a], expansions: MAX_EXPANSIONS });
                    }
                    width
                } else {
                    if chain[a] == 0 {
                        floor_hit[a] = true;
                    }
                    width / (2.0 * self.opts.shrink)
                };
                let c = incumbent[a];
                boxes[a] = ((c - half).max(self.floors[a]), (c + half).max(self.floors[a] + 2.0 * half));
            }
        }
        Ok((incumbent, rounds, floor_hit))
    }

    /// Evaluate ψ on the product grid and reduce it in the nested order.
    fn nested_argopt(&self, grids: &[Vec<f64>]) -> Result<[usize; 4]> {
        let g = self.opts.grid_points;
        let row = |i: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(g * g * g);
            for j in 0..g {
                for k in 0..g {
                    for l in 0..g {
                        out.push(self.eval_log([grids[0][i], grids[1][j], grids[2][k], grids[3][l]]));
                    }
                }
            }
            out
        };
        #[cfg(feature = "parallel")]
        let values: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..g).into_par_iter().map(row).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let values: Vec<Vec<f64>> = (0..g).map(row).collect();

        // NaN cells (domain errors) never win a comparison.
        let pick = |vals: &mut dyn Iterator<Item = f64>, maximize: bool| -> (usize, f64) {
            let mut best = (usize::MAX, f64::NAN);
            for (idx, v) in vals.enumerate() {
                if v.is_nan() {
                    continue;
                }
                let better = best.1.is_nan() || if maximize { v > best.1 } else { v < best.1 };
                if better {
                    best = (idx, v);
                }
            }
            best
        };

        let mut chains = Vec::with_capacity(g);
        let mut top = Vec::with_capacity(g);
        for cube in &values {
            let mut q_vals = Vec::with_capacity(g);
            let mut q_chain = Vec::with_capacity(g);
            for j in 0..g {
                let mut xi_vals = Vec::with_capacity(g);
                let mut t_args = Vec::with_capacity(g);
                for k in 0..g {
                    let base = (j * g + k) * g;
                    let (l, v) = pick(&mut cube[base..base + g].iter().copied(), MAXIMIZE[3]);
                    xi_vals.push(v);
                    t_args.push(l);
                }
                let (k, v) = pick(&mut xi_vals.iter().copied(), MAXIMIZE[2]);
                q_vals.push(v);
                q_chain.push((k, t_args.get(k).copied().unwrap_or(usize::MAX)));
            }
            let (j, v) = pick(&mut q_vals.iter().copied(), MAXIMIZE[1]);
            top.push(v);
            chains.push(q_chain.get(j).map(|&(k, l)| (j, k, l)));
        }
        let (i, _) = pick(&mut top.iter().copied(), MAXIMIZE[0]);
        match chains.get(i).copied().flatten() {
            Some((j, k, l)) => Ok([i, j, k, l]),
            None => Err(Error::Numeric("psi undefined on the whole search grid".into())),
        }
    }

    /// Nested Brent in log coordinates, each level bracketed around the current
    /// centre and re-bracketed whenever its optimum lands near an edge.
    fn polish(&self, start: [f64; 4], free: [bool; 4]) -> Result<[f64; 4]> {
        let mut x = start;
        let mut centres = start;
        self.nested(0, &mut x, &mut centres, free)?;
        Ok(x)
    }

    fn nested(&self, axis: usize, x: &mut [f64; 4], centres: &mut [f64; 4], free: [bool; 4]) -> Result<f64> {
        if axis == 4 {
            let v = self.eval_log(*x);
            return if v.is_finite() {
                Ok(v)
            } else {
                self.ev.eval(x.map(f64::exp))
            };
        }
        if !free[axis] {
            x[axis] = self.floors[axis];
            return self.nested(axis + 1, x, centres, free);
        }
        let sign = if MAXIMIZE[axis] { -1.0 } else { 1.0 };
        let mut half = 0.05;
        let mut centre = centres[axis];
        for _ in 0..=MAX_EXPANSIONS {
            let lo = (centre - half).max(self.floors[axis]);
            let hi = centre + half;
            let mut inner_err = None;
            let found = {
                let mut scratch = *x;
                let mut scratch_centres = *centres;
                minimize_1d(
                    |u| {
                        scratch[axis] = u;
                        match self.nested(axis + 1, &mut scratch, &mut scratch_centres, free) {
                            Ok(v) => sign * v,
                            Err(e) => {
                                inner_err.get_or_insert(e);
                                f64::NAN
                            }
                        }
                    },
                    lo,
                    hi,
                    1e-10,
                )
            };
            if let Some(e) = inner_err {
                return Err(e);
            }
            let u = found?.argmin;
            let margin = 0.02 * (hi - lo);
            let low_edge = u - lo < margin && lo > self.floors[axis];
            let high_edge = hi - u < margin;
            if !(low_edge || high_edge) {
                centres[axis] = u;
                x[axis] = u;
                return self.nested(axis + 1, x, centres, free);
            }
            centre = u;
            half *= 4.0;
        }
        Err(Error::Unbounded { axis: AXES[axis], expansions: MAX_EXPANSIONS })
    }

    /// Newton steps on the FD gradient in log coordinates; a step is kept only if
    /// it lowers the residual.
    fn newton(&self, start: [f64; 4], free: [bool; 4]) -> Result<[f64; 4]> {
        let residual = |u: [f64; 4]| residual_with(&self.ev, u.map(f64::exp), free);
        let mut u = start;
        let mut r = residual(u)?;
        for _ in 0..8 {
            if r <= 0.01 * self.opts.grad_tol {
                break;
            }
            let grad = |u: [f64; 4]| -> Result<[f64; 4]> {
                let mut g = [0.0; 4];
                for i in 0..4 {
                    let h = 1e-6;
                    let mut up = u;
                    let mut down = u;
                    up[i] += h;
                    down[i] -= h;
                    g[i] = (self.ev.eval(up.map(f64::exp))? - self.ev.eval(down.map(f64::exp))?) / (2.0 * h);
                }
                Ok(g)
            };
            let g0 = grad(u)?;
            let mut hess = [[0.0; 4]; 4];
            for j in 0..4 {
                let h = 1e-4;
                let mut up = u;
                let mut down = u;
                up[j] += h;
                down[j] -= h;
                let (gu, gd) = (grad(up)?, grad(down)?);
                for i in 0..4 {
                    hess[i][j] = (gu[i] - gd[i]) / (2.0 * h);
                }
            }
            let idx: Vec<usize> = (0..4).filter(|&i| free[i]).collect();
            let n = idx.len();
            let mut a = vec![vec![0.0; n + 1]; n];
            for (r_, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    a[r_][c] = 0.5 * (hess[i][j] + hess[j][i]);
                }
                a[r_][n] = -g0[i];
            }
            let Some(step) = solve_dense(a) else { break };
            let mut accepted = false;
            let mut scale = 1.0;
            for _ in 0..10 {
                let mut trial = u;
                for (r_, &i) in idx.iter().enumerate() {
                    trial[i] += scale * step[r_];
                }
                if let Ok(rt) = residual(trial) {
                    if rt < r {
                        u = trial;
                        r = rt;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(u)
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[pivot][col].abs() > 1e-300) {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..=n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
