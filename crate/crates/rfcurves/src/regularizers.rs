//! Separable regularizers, their scalar proximal maps and Moreau envelopes, and
//! Gaussian expectations of the envelope along the line `a − s·φ`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{hermite_rule, legendre_rule, normal_expectation_split, q, std_normal_pdf};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(step, y) -> prox`.
pub type ProxFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A user-supplied convex scalar penalty `r̄`.
#[derive(Clone)]
pub struct CustomSeparable {
    pub value: ScalarFn,
    pub prox: Option<ProxFn>,
    /// A subgradient selection. Used by the bisection prox when `prox` is absent;
    /// without it a central difference of `value` stands in.
    pub derivative: Option<ScalarFn>,
    pub mu: f64,
    pub label: String,
}

#[derive(Clone)]
pub enum RegularizerKind {
    Ridge { alpha: f64 },
    Lasso { lambda: f64 },
    ElasticNet { lambda: f64, alpha: f64 },
    Custom(CustomSeparable),
}

#[derive(Clone)]
pub struct RegularizerSpec {
    kind: RegularizerKind,
}

impl fmt::Debug for RegularizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RegularizerKind::Ridge { alpha } => write!(f, "Ridge(alpha={alpha})"),
            RegularizerKind::Lasso { lambda } => write!(f, "Lasso(lambda={lambda})"),
            RegularizerKind::ElasticNet { lambda, alpha } => {
                write!(f, "ElasticNet(lambda={lambda}, alpha={alpha})")
            }
            RegularizerKind::Custom(c) => write!(f, "Custom({}, mu={})", c.label, c.mu),
        }
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl RegularizerSpec {
    pub fn ridge(alpha: f64) -> Result<Self> {
        check_nonneg("alpha", alpha)?;
        Ok(Self { kind: RegularizerKind::Ridge { alpha } })
    }

    pub fn lasso(lambda: f64) -> Result<Self> {
        check_nonneg("lambda", lambda)?;
        Ok(Self { kind: RegularizerKind::Lasso { lambda } })
    }

    pub fn elastic_net(lambda: f64, alpha: f64) -> Result<Self> {
        check_nonneg("lambda", lambda)?;
        check_nonneg("alpha", alpha)?;
        Ok(Self { kind: RegularizerKind::ElasticNet { lambda, alpha } })
    }

    /// Wraps a custom penalty after a midpoint-convexity spot check on `[-10, 10]`.
    pub fn custom(custom: CustomSeparable) -> Result<Self> {
        check_nonneg("mu", custom.mu)?;
        let r = &custom.value;
        let grid: Vec<f64> = (0..=40).map(|i| -10.0 + 0.5 * i as f64).collect();
        for &x in &grid {
            if !r(x).is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "custom regularizer '{}' is not finite at {x}",
                    custom.label
                )));
            }
        }
        for (i, &x) in grid.iter().enumerate() {
            for &y in &grid[i + 1..] {
                let mid = r(0.5 * (x + y));
                let chord = 0.5 * (r(x) + r(y));
                if mid > chord + 1e-10 * (1.0 + chord.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "custom regularizer '{}' fails midpoint convexity between {x} and {y}",
                        custom.label
                    )));
                }
            }
        }
        Ok(Self { kind: RegularizerKind::Custom(custom) })
    }

    pub fn kind(&self) -> &RegularizerKind {
        &self.kind
    }

    /// Strong-convexity modulus.
    pub fn mu(&self) -> f64 {
        match &self.kind {
            RegularizerKind::Ridge { alpha } | RegularizerKind::ElasticNet { alpha, .. } => *alpha,
            RegularizerKind::Lasso { .. } => 0.0,
            RegularizerKind::Custom(c) => c.mu,
        }
    }

    /// `(λ, α)` for the elastic-net family, `None` for custom penalties.
    pub fn elastic_net_params(&self) -> Option<(f64, f64)> {
        match &self.kind {
            RegularizerKind::Ridge { alpha } => Some((0.0, *alpha)),
            RegularizerKind::Lasso { lambda } => Some((*lambda, 0.0)),
            RegularizerKind::ElasticNet { lambda, alpha } => Some((*lambda, *alpha)),
            RegularizerKind::Custom(_) => None,
        }
    }

    pub fn label(&self) -> String {
        format!("{self:?}")
    }

    /// `r̄(x)`.
    pub fn value(&self, x: f64) -> f64 {
        match &self.kind {
            RegularizerKind::Custom(c) => (c.value)(x),
            _ => {
                let (lambda, alpha) = self.elastic_net_params().unwrap();
                lambda * x.abs() + 0.5 * alpha * x * x
            }
        }
    }
}

#[inline]
pub fn soft_threshold(y: f64, threshold: f64) -> f64 {
    (y.abs() - threshold).max(0.0).copysign(y)
}

#[inline]
fn elastic_net_prox(lambda: f64, alpha: f64, step: f64, y: f64) -> f64 {
    let shrink = 1.0 + alpha * step;
    soft_threshold(y / shrink, lambda * step / shrink)
}

fn check_step(step: f64) -> Result<()> {
    if step.is_finite() && step > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("prox step must be finite and > 0, got {step}")))
    }
}

/// `argmin_x r̄(x) + (x − y)²/(2·step)`.
pub fn scalar_prox(reg: &RegularizerSpec, step: f64, y: f64) -> Result<f64> {
    check_step(step)?;
    match &reg.kind {
        RegularizerKind::Custom(c) => custom_prox(c, step, y),
        _ => {
            let (lambda, alpha) = reg.elastic_net_params().unwrap();
            Ok(elastic_net_prox(lambda, alpha, step, y))
        }
    }
}

fn custom_prox(c: &CustomSeparable, step: f64, y: f64) -> Result<f64> {
    if let Some(prox) = &c.prox {
        let p = prox(step, y);
        return if p.is_finite() {
            Ok(p)
        } else {
            Err(Error::Numeric(format!("custom prox '{}' returned {p}", c.label)))
        };
    }
    if !(c.mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "custom regularizer '{}' has no prox and is not strongly convex",
            c.label
        )));
    }
    let slope = |x: f64| -> f64 {
        match &c.derivative {
            Some(d) => d(x),
            None => {
                let h = 1e-6 * x.abs().max(1.0);
                ((c.value)(x + h) - (c.value)(x - h)) / (2.0 * h)
            }
        }
    };
    // Monotone stationarity map of the strongly convex prox objective.
    let stationarity = |x: f64| x - y + step * slope(x);

    let pad = y.abs() + 10.0 / c.mu;
    let (mut lo, mut hi) = (y - pad, y + pad);
    let mut widen = 0;
    while !(stationarity(lo) <= 0.0 && stationarity(hi) >= 0.0) {
        widen += 1;
        if widen > 40 {
            return Err(Error::Numeric(format!(
                "custom prox '{}' failed to bracket a root for y = {y}",
                c.label
            )));
        }
        let w = hi - lo;
        lo -= w;
        hi += w;
    }
    let tol = 1e-12 * y.abs().max(1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = stationarity(mid);
        if !g.is_finite() {
            return Err(Error::Numeric(format!("custom prox '{}' stationarity is {g}", c.label)));
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `min_x r̄(x) + (x − y)²/(2·step)`.
pub fn scalar_moreau(reg: &RegularizerSpec, step: f64, y: f64) -> Result<f64> {
    let p = scalar_prox(reg, step, y)?;
    Ok(reg.value(p) + (p - y) * (p - y) / (2.0 * step))
}

/// One atom `value` of θ* with probability `weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub weight: f64,
}

/// Distribution of θ* coordinates as a finite atom mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Atom>", into = "Vec<Atom>")]
pub struct SignalSpec {
    atoms: Vec<Atom>,
}

impl TryFrom<Vec<Atom>> for SignalSpec {
    type Error = Error;

    fn try_from(atoms: Vec<Atom>) -> Result<Self> {
        SignalSpec::new(atoms)
    }
}

impl From<SignalSpec> for Vec<Atom> {
    fn from(s: SignalSpec) -> Self {
        s.atoms
    }
}

impl SignalSpec {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("signal needs at least one atom".into()));
        }
        for a in &atoms {
            if !a.value.is_finite() || !(a.weight > 0.0) || !a.weight.is_finite() {
                return Err(Error::InvalidArgument(format!("bad signal atom {a:?}")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("signal weights sum to {total}, not 1")));
        }
        Ok(Self { atoms })
    }

    /// Half zeros, half ones.
    pub fn half_ones() -> Self {
        Self {
            atoms: vec![Atom { value: 0.0, weight: 0.5 }, Atom { value: 1.0, weight: 0.5 }],
        }
    }

    pub fn point(value: f64) -> Result<Self> {
        Self::new(vec![Atom { value, weight: 1.0 }])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight * a.value * a.value).sum()
    }

    /// Largest atom magnitude, floored at 1.
    pub fn scale(&self) -> f64 {
        self.atoms.iter().map(|a| a.value.abs()).fold(1.0, f64::max)
    }
}

/// The constants `(c1, c2, γ)` that fix the Moreau step `1/(2c1)` and the
/// Gaussian shift scale `c2√γ/(2c1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeContext {
    pub c1: f64,
    pub c2: f64,
    pub gamma: f64,
}

impl EnvelopeContext {
    pub fn new(c1: f64, c2: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("c1", c1), ("c2", c2), ("gamma", gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(Self { c1, c2, gamma })
    }

    pub fn step(&self) -> f64 {
        0.5 / self.c1
    }

    /// Standard deviation of the shifted argument `a − scale·φ`.
    pub fn scale(&self) -> f64 {
        self.c2 * self.gamma.sqrt() / (2.0 * self.c1)
    }
}

/// φ values at which the elastic-net coordinate enters or leaves the dead zone.
pub fn dead_zone_edges(lambda: f64, ctx: &EnvelopeContext, theta_star: f64) -> [f64; 2] {
    let spread = ctx.c2 * ctx.gamma.sqrt();
    let centre = 2.0 * ctx.c1 * theta_star;
    [(centre - lambda) / spread, (centre + lambda) / spread]
}

/// `E_φ[M(a − s·φ)]` summed over atoms, by quadrature.
///
/// Elastic-net family integrands are split at the dead-zone edges and integrated
/// piecewise with Gauss–Legendre; custom penalties use Gauss–Hermite.
pub fn expected_moreau(
    reg: &RegularizerSpec,
    ctx: &EnvelopeContext,
    signal: &SignalSpec,
    quad_order: usize,
) -> Result<f64> {
    if quad_order < 50 {
        return Err(Error::InvalidArgument(format!("quad_order {quad_order} below 50")));
    }
    let step = ctx.step();
    let s = ctx.scale();
    let mut total = 0.0;
    match reg.elastic_net_params() {
        Some((lambda, alpha)) => {
            let rule = legendre_rule(quad_order)?;
            for atom in signal.atoms() {
                let a = atom.value;
                let edges = if lambda > 0.0 { dead_zone_edges(lambda, ctx, a).to_vec() } else { vec![] };
                let e = normal_expectation_split(&rule, &edges, |phi| {
                    let y = a - s * phi;
                    let p = elastic_net_prox(lambda, alpha, step, y);
                    lambda * p.abs() + 0.5 * alpha * p * p + (p - y) * (p - y) / (2.0 * step)
                });
                total += atom.weight * e;
            }
        }
        None => {
            let rule = hermite_rule(quad_order)?;
            for atom in signal.atoms() {
                let mut err = None;
                let e = rule.expect(|phi| match scalar_moreau(reg, step, atom.value - s * phi) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
                total += atom.weight * e;
            }
        }
    }
    Ok(total)
}

/// `E(Z − ζ)₊²` for standard normal `Z`.
#[inline]
fn hinge_second_moment(zeta: f64) -> f64 {
    (1.0 + zeta * zeta) * q(zeta) - zeta * std_normal_pdf(zeta)
}

/// Closed form of the elastic-net expected envelope.
///
/// With `u = 2c1·y`, the envelope is `c1·y² − (|u| − λ)₊²/(2(2c1+α))`, and each
/// hinge term integrates against the Gaussian shift to `E(Z − ζ)₊²`.
pub fn expected_moreau_closed_form(
    lambda: f64,
    alpha: f64,
    ctx: &EnvelopeContext,
    signal: &SignalSpec,
) -> f64 {
    let k = 2.0 * ctx.c1 + alpha;
    let var_u = ctx.c2 * ctx.c2 * ctx.gamma;
    signal
        .atoms()
        .iter()
        .map(|atom| {
            let a = atom.value;
            let (z1, z2) = zeta_thresholds(ctx.c1, ctx.c2, ctx.gamma, lambda, a);
            let quad = ctx.c1 * a * a + var_u / (4.0 * ctx.c1);
            let hinge = var_u / (2.0 * k) * (hinge_second_moment(z1) + hinge_second_moment(z2));
            atom.weight * (quad - hinge)
        })
        .sum()
}

/// `ζ1 = (λ − 2c1θ*)/(√γ c2)`, `ζ2 = (λ + 2c1θ*)/(√γ c2)`.
pub fn zeta_thresholds(c1: f64, c2: f64, gamma: f64, lambda: f64, theta_star: f64) -> (f64, f64) {
    let spread = gamma.sqrt() * c2;
    ((lambda - 2.0 * c1 * theta_star) / spread, (lambda + 2.0 * c1 * theta_star) / spread)
}

/// One coordinate of the limiting estimator: `prox(θ* − s·φ)` with step `1/(2c1)`.
pub fn sample_theta_hat_coordinate(
    reg: &RegularizerSpec,
    ctx: &EnvelopeContext,
    theta_star: f64,
    phi: f64,
) -> Result<f64> {
    scalar_prox(reg, ctx.step(), theta_star - ctx.scale() * phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::minimize_1d;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn en(l: f64, a: f64) -> RegularizerSpec {
        RegularizerSpec::elastic_net(l, a).unwrap()
    }

    fn ctx(c1: f64, c2: f64, gamma: f64) -> EnvelopeContext {
        EnvelopeContext::new(c1, c2, gamma).unwrap()
    }

    /// Scalar envelope by brute force: dense grid, then Brent around the best cell.
    fn brute_moreau(reg: &RegularizerSpec, step: f64, y: f64) -> f64 {
        let obj = |x: f64| reg.value(x) + (x - y) * (x - y) / (2.0 * step);
        let (lo, hi) = (y - 5.0, y + 5.0);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let best = (0..=n)
            .map(|i| lo + h * i as f64)
            .min_by(|a, b| obj(*a).total_cmp(&obj(*b)))
            .unwrap();
        minimize_1d(obj, best - 2.0 * h, best + 2.0 * h, 1e-14).unwrap().min
    }

    #[test]
    fn prox_examples() {
        let lasso = RegularizerSpec::lasso(1.0).unwrap();
        assert_eq!(scalar_prox(&lasso, 1.0, 2.5).unwrap(), 1.5);
        assert_eq!(scalar_prox(&en(1.0, 1.0), 1.0, 3.0).unwrap(), 1.0);
        let ridge = RegularizerSpec::ridge(2.0).unwrap();
        assert!((scalar_prox(&ridge, 0.25, 4.0).unwrap() - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prox_rejects_bad_step() {
        assert!(scalar_prox(&en(1.0, 1.0), 0.0, 1.0).is_err());
        assert!(scalar_prox(&en(1.0, 1.0), -1.0, 1.0).is_err());
    }

    #[test]
    fn constructors_reject_negative_parameters() {
        assert!(RegularizerSpec::elastic_net(-1.0, 0.0).is_err());
        assert!(RegularizerSpec::ridge(f64::NAN).is_err());
    }

    #[test]
    fn moreau_examples() {
        let lasso = RegularizerSpec::lasso(1.0).unwrap();
        assert_eq!(scalar_moreau(&lasso, 1.0, 3.0).unwrap(), 2.5);
        assert_eq!(scalar_moreau(&lasso, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(scalar_moreau(&en(0.3, 0.2), 0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn moreau_matches_brute_force() {
        let reg = en(0.001, 0.01);
        let got = scalar_moreau(&reg, 0.7, 1.3).unwrap();
        let want = brute_moreau(&reg, 0.7, 1.3);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        for (l, a, step, y) in [(1.0, 0.5, 0.3, 0.2), (0.2, 2.0, 1.5, -2.0), (0.0, 1.0, 0.1, 0.7)] {
            let reg = en(l, a);
            let got = scalar_moreau(&reg, step, y).unwrap();
            assert!((got - brute_moreau(&reg, step, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_regularizer_has_zero_expected_envelope() {
        let v = expected_moreau(&en(0.0, 0.0), &ctx(0.7, 1.9, 1.3), &SignalSpec::half_ones(), 200)
            .unwrap();
        assert!(v.abs() < 1e-13);
    }

    #[test]
    fn ridge_expected_envelope_matches_symbolic_form() {
        // Ridge envelope is c1·α·y²/(2c1+α); y = a − s·φ has second moment a² + s².
        for (alpha, c1, c2, gamma, a) in [(0.5, 0.8, 1.1, 1.5, 1.0), (2.0, 0.1, 0.3, 0.5, -0.4)] {
            let c = ctx(c1, c2, gamma);
            let s = c.scale();
            let want = c1 * alpha * (a * a + s * s) / (2.0 * c1 + alpha);
            let sig = SignalSpec::point(a).unwrap();
            let reg = RegularizerSpec::ridge(alpha).unwrap();
            let got = expected_moreau(&reg, &c, &sig, 200).unwrap();
            assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
            let closed = expected_moreau_closed_form(0.0, alpha, &c, &sig);
            assert!((closed - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn closed_form_matches_quadrature_at_reference_point() {
        let c = ctx(1.0, 1.0, 1.0);
        let sig = SignalSpec::half_ones();
        let closed = expected_moreau_closed_form(1e-3, 1e-2, &c, &sig);
        let quad = expected_moreau(&en(1e-3, 1e-2), &c, &sig, 200).unwrap();
        assert!((closed - quad).abs() <= 1e-8 * quad.abs());
    }

    #[test]
    fn closed_form_zero_signal_matches_quadrature() {
        let sig = SignalSpec::point(0.0).unwrap();
        for (l, a) in [(0.3, 0.0), (1e-3, 1e-2), (2.0, 5.0)] {
            let c = ctx(0.4, 0.9, 1.2);
            let closed = expected_moreau_closed_form(l, a, &c, &sig);
            let quad = expected_moreau(&en(l, a), &c, &sig, 200).unwrap();
            assert!((closed - quad).abs() <= 1e-8 * quad.abs());
        }
    }

    #[test]
    fn closed_form_grid_against_quadrature() {
        let sig = SignalSpec::half_ones();
        let levels = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
        for &l in &levels {
            for &a in &levels {
                for ratio in [0.1, 0.5, 1.0, 2.0, 10.0] {
                    let c = ctx(1.0, ratio, 1.0);
                    let closed = expected_moreau_closed_form(l, a, &c, &sig);
                    let quad = expected_moreau(&en(l, a), &c, &sig, 200).unwrap();
                    let rel = (closed - quad).abs() / quad.abs();
                    assert!(rel <= 1e-8, "l {l} a {a} ratio {ratio}: rel {rel:e}");
                }
            }
        }
    }

    #[test]
    fn zeta_examples() {
        let (z1, z2) = zeta_thresholds(0.7, 1.3, 2.0, 0.4, 0.0);
        assert_eq!(z1, z2);
        assert!((z1 - 0.4 / (2f64.sqrt() * 1.3)).abs() < 1e-15);
        let (z1, z2) = zeta_thresholds(0.7, 1.3, 2.0, 0.0, 0.8);
        assert_eq!(z1, -z2);
        let (z1, z2) = zeta_thresholds(1.0, 2.0, 4.0, 0.2, 1.0);
        assert!((z1 + 0.45).abs() < 1e-15 && (z2 - 0.55).abs() < 1e-15);
        let (z1, z2) = zeta_thresholds(0.3, 0.9, 1.7, 0.25, -0.6);
        assert!((z1 + z2 - 2.0 * 0.25 / (1.7f64.sqrt() * 0.9)).abs() < 1e-14);
    }

    #[test]
    fn theta_hat_dead_zone_and_identity() {
        let c = ctx(0.6, 0.8, 1.5);
        let reg = en(0.5, 0.1);
        // |2c1θ* − c2√γφ| ≤ λ puts the coordinate in the dead zone.
        let phi = (2.0 * 0.6 * 1.0 - 0.3) / (0.8 * 1.5f64.sqrt());
        assert_eq!(sample_theta_hat_coordinate(&reg, &c, 1.0, phi).unwrap(), 0.0);
        let free = en(0.0, 0.0);
        let got = sample_theta_hat_coordinate(&free, &c, 1.0, 0.37).unwrap();
        assert_eq!(got, 1.0 - c.scale() * 0.37);
    }

    #[test]
    fn monte_carlo_nonzero_fraction_matches_q_formula() {
        let c = ctx(0.45, 0.3, 1.2);
        let (l, a) = (0.2, 0.05);
        let reg = en(l, a);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        for theta in [0.0, 1.0] {
            let hits = (0..n)
                .filter(|_| {
                    let phi: f64 = StandardNormal.sample(&mut rng);
                    sample_theta_hat_coordinate(&reg, &c, theta, phi).unwrap() != 0.0
                })
                .count();
            let (z1, z2) = zeta_thresholds(c.c1, c.c2, c.gamma, l, theta);
            let p = q(z1) + q(z2);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let frac = hits as f64 / n as f64;
            assert!((frac - p).abs() <= 3.0 * se, "theta {theta}: {frac} vs {p}");
        }
    }

    #[test]
    fn custom_prox_by_bisection_matches_closed_forms() {
        let alpha = 0.8;
        let quad_only = RegularizerSpec::custom(CustomSeparable {
            value: Arc::new(move |x| 0.5 * alpha * x * x),
            prox: None,
            derivative: None,
            mu: alpha,
            label: "quadratic".into(),
        })
        .unwrap();
        let ridge = RegularizerSpec::ridge(alpha).unwrap();
        for y in [-3.0, -0.2, 0.0, 0.9, 4.5] {
            let a = scalar_prox(&quad_only, 0.6, y).unwrap();
            let b = scalar_prox(&ridge, 0.6, y).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let with_subgradient = RegularizerSpec::custom(CustomSeparable {
            value: Arc::new(|x: f64| 0.3 * x.abs() + 0.25 * x * x),
            prox: None,
            derivative: Some(Arc::new(|x: f64| 0.3 * x.signum() * (x != 0.0) as u8 as f64 + 0.5 * x)),
            mu: 0.5,
            label: "en by hand".into(),
        })
        .unwrap();
        let reference = en(0.3, 0.5);
        for y in [-2.0, -0.1, 0.05, 0.31, 3.0] {
            let a = scalar_prox(&with_subgradient, 0.9, y).unwrap();
            let b = scalar_prox(&reference, 0.9, y).unwrap();
            assert!((a - b).abs() < 1e-11, "y {y}: {a} vs {b}");
        }
    }

    #[test]
    fn custom_quadrature_matches_closed_form_for_smooth_penalty() {
        let alpha = 0.3;
        let reg = RegularizerSpec::custom(CustomSeparable {
            value: Arc::new(move |x| 0.5 * alpha * x * x),
            prox: Some(Arc::new(move |step, y| y / (1.0 + alpha * step))),
            derivative: None,
            mu: alpha,
            label: "ridge by hand".into(),
        })
        .unwrap();
        let c = ctx(0.5, 0.7, 1.1);
        let sig = SignalSpec::half_ones();
        let got = expected_moreau(&reg, &c, &sig, 200).unwrap();
        let want = expected_moreau_closed_form(0.0, alpha, &c, &sig);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn custom_rejects_nonconvex() {
        let r = RegularizerSpec::custom(CustomSeparable {
            value: Arc::new(|x: f64| x.sin()),
            prox: None,
            derivative: None,
            mu: 1.0,
            label: "sine".into(),
        });
        assert!(r.is_err());
    }

    #[test]
    fn custom_without_prox_needs_strong_convexity() {
        let reg = RegularizerSpec::custom(CustomSeparable {
            value: Arc::new(|x: f64| x.abs()),
            prox: None,
            derivative: None,
            mu: 0.0,
            label: "abs".into(),
        })
        .unwrap();
        assert!(scalar_prox(&reg, 1.0, 2.0).is_err());
    }

    #[test]
    fn signal_validation_and_serde() {
        assert!(SignalSpec::new(vec![Atom { value: 1.0, weight: 0.6 }]).is_err());
        assert!(SignalSpec::new(vec![]).is_err());
        let s = SignalSpec::half_ones();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SignalSpec>(&text).unwrap(), s);
        assert!(serde_json::from_str::<SignalSpec>(r#"[{"value":1.0,"weight":0.2}]"#).is_err());
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(
            l in 0.0f64..2.0, a in 0.0f64..2.0, step in 0.01f64..5.0,
            y1 in -10.0f64..10.0, y2 in -10.0f64..10.0,
        ) {
            let reg = en(l, a);
            let p1 = scalar_prox(&reg, step, y1).unwrap();
            let p2 = scalar_prox(&reg, step, y2).unwrap();
            prop_assert!((p1 - p2).abs() <= (y1 - y2).abs() + 1e-15);
        }

        #[test]
        fn envelope_gradient_is_residual_over_step(
            l in 0.0f64..2.0, a in 0.0f64..2.0, step in 0.05f64..5.0, y in -10.0f64..10.0,
        ) {
            let reg = en(l, a);
            let h = 1e-6;
            // Skip points within the FD stencil of the envelope's curvature jumps.
            let edge = l * step;
            prop_assume!((y.abs() - edge).abs() > 10.0 * h);
            let fd = (scalar_moreau(&reg, step, y + h).unwrap()
                - scalar_moreau(&reg, step, y - h).unwrap()) / (2.0 * h);
            let p = scalar_prox(&reg, step, y).unwrap();
            prop_assert!((fd - (y - p) / step).abs() <= 1e-6);
        }

        #[test]
        fn envelope_decreases_with_step(
            l in 0.0f64..2.0, a in 0.0f64..2.0, s1 in 0.01f64..5.0, ds in 0.0f64..5.0,
            y in -10.0f64..10.0,
        ) {
            let reg = en(l, a);
            let small = scalar_moreau(&reg, s1, y).unwrap();
            let large = scalar_moreau(&reg, s1 + ds, y).unwrap();
            prop_assert!(large <= small + 1e-12 * small.abs().max(1.0));
            prop_assert!(small <= reg.value(y) + 1e-12 * reg.value(y).max(1.0));
        }

        #[test]
        fn elastic_net_without_ridge_is_lasso(
            l in 0.0f64..2.0, step in 0.01f64..5.0, y in -10.0f64..10.0,
        ) {
            let a = en(l, 0.0);
            let b = RegularizerSpec::lasso(l).unwrap();
            prop_assert_eq!(scalar_prox(&a, step, y).unwrap(), scalar_prox(&b, step, y).unwrap());
            prop_assert_eq!(scalar_moreau(&a, step, y).unwrap(), scalar_moreau(&b, step, y).unwrap());
        }

        #[test]
        fn elastic_net_without_lasso_is_ridge(
            a in 0.0f64..2.0, step in 0.01f64..5.0, y in -10.0f64..10.0,
        ) {
            let x = en(0.0, a);
            let r = RegularizerSpec::ridge(a).unwrap();
            prop_assert_eq!(scalar_prox(&x, step, y).unwrap(), scalar_prox(&r, step, y).unwrap());
        }
    }
}
