//! Scalar special functions, Gaussian quadrature and bracketed 1-D minimization.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian tail `P(Z > x)`, checked: NaN is rejected.
pub fn q_function(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("q_function of NaN".into()));
    }
    Ok(q(x))
}

/// Unchecked Gaussian tail for hot loops. Goes through `erfc` so the upper
/// tail keeps full relative precision.
#[inline]
pub fn q(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Nodes and weights of an interpolatory quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `Σ w_i f(x_i)`.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `d` and
/// off-diagonal `e[i]` coupling `i` and `i+1` (implicit QL), returned ascending.
fn tridiagonal_eigenvalues(mut d: Vec<f64>, off: &[f64]) -> Result<Vec<f64>> {
    let n = d.len();
    let mut e = off.to_vec();
    e.resize(n, 0.0);
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 60 {
                return Err(Error::Numeric("tridiagonal QL iteration did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Gauss–Hermite rule rescaled so that `rule.expect(f) ≈ E[f(Z)]`, `Z ~ N(0,1)`.
///
/// Nodes start as Golub–Welsch eigenvalues and are polished by Newton steps on
/// the orthonormal Hermite recurrence, which also yields the weights. The
/// recurrence is rescaled on the fly because the polynomials overflow past
/// order ~360; outer weights below the smallest subnormal come out as zero.
pub fn gauss_hermite_standard_normal(order: usize) -> Result<QuadratureRule> {
    if !(2..=512).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "Gauss-Hermite order {order} outside 2..=512"
        )));
    }
    let n = order;
    let nf = n as f64;
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let guesses = tridiagonal_eigenvalues(vec![0.0; n], &off)?;

    let pim4 = PI.powf(-0.25);
    const SCALE: f64 = 1e150;
    let ln_scale = SCALE.ln();
    // Recurrence value, derivative and rescale count at a physicists' abscissa.
    let hermite = |z: f64| -> (f64, f64, i32) {
        let (mut p1, mut p2) = (pim4, 0.0);
        let mut rescales = 0;
        for j in 1..=n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            if p1.abs() > SCALE {
                p1 /= SCALE;
                p2 /= SCALE;
                rescales += 1;
            }
        }
        (p1, (2.0 * nf).sqrt() * p2, rescales)
    };

    let half = n.div_ceil(2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let norm = PI.sqrt().ln();
    for i in 0..half {
        // Positive roots, largest first, mirrored into place.
        let mut z = if n % 2 == 1 && i == half - 1 { 0.0 } else { -guesses[i] / SQRT_2 };
        let (mut p1, mut pp, mut rescales) = hermite(z);
        for _ in 0..10 {
            let z1 = z;
            z = z1 - p1 / pp;
            (p1, pp, rescales) = hermite(z);
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let log_w = 2f64.ln() - 2.0 * (pp.abs().ln() + rescales as f64 * ln_scale);
        let w = (log_w - norm).exp();
        nodes[i] = -SQRT_2 * z;
        nodes[n - 1 - i] = SQRT_2 * z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[half - 1] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Result<QuadratureRule> {
    if !(1..=1024).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "Gauss-Legendre order {order} outside 1..=1024"
        )));
    }
    let n = order;
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Ok(QuadratureRule { nodes, weights })
}

type RuleCache = Mutex<HashMap<usize, Arc<QuadratureRule>>>;

fn cached(
    cache: &'static OnceLock<RuleCache>,
    order: usize,
    build: fn(usize) -> Result<QuadratureRule>,
) -> Result<Arc<QuadratureRule>> {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = map.lock().expect("rule cache poisoned").get(&order) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(build(order)?);
    map.lock()
        .expect("rule cache poisoned")
        .insert(order, Arc::clone(&rule));
    Ok(rule)
}

/// Memoized [`gauss_hermite_standard_normal`].
pub fn hermite_rule(order: usize) -> Result<Arc<QuadratureRule>> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, order, gauss_hermite_standard_normal)
}

/// Memoized [`gauss_legendre`].
pub fn legendre_rule(order: usize) -> Result<Arc<QuadratureRule>> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, order, gauss_legendre)
}

/// Half-width of the truncated real line used by [`normal_expectation_split`].
pub const NORMAL_TRUNCATION: f64 = 12.0;

/// `E[f(Z)]` for piecewise-smooth `f`: Gauss–Legendre on each piece of
/// `[-12, 12]` cut at `breakpoints`, weighted by the normal density.
pub fn normal_expectation_split(
    legendre: &QuadratureRule,
    breakpoints: &[f64],
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    let mut cuts: Vec<f64> = Vec::with_capacity(breakpoints.len() + 2);
    cuts.push(-NORMAL_TRUNCATION);
    cuts.extend(
        breakpoints
            .iter()
            .copied()
            .filter(|b| b.is_finite() && b.abs() < NORMAL_TRUNCATION),
    );
    cuts.push(NORMAL_TRUNCATION);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut total = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        if half <= 0.0 {
            continue;
        }
        let piece: f64 = legendre
            .nodes()
            .iter()
            .zip(legendre.weights())
            .map(|(&u, &w)| {
                let x = mid + half * u;
                w * std_normal_pdf(x) * f(x)
            })
            .sum();
        total += half * piece;
    }
    total
}

/// Result of [`minimize_1d`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub argmin: f64,
    pub min: f64,
    pub evaluations: usize,
}

const MAX_BRENT_ITERATIONS: usize = 200;

/// Brent's bracketed minimizer with golden-section fallback.
///
/// Converges to within `tol` of a local minimizer in `[lo, hi]`; the endpoints
/// themselves are never evaluated. Stops after 200 iterations regardless.
pub fn minimize_1d(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<Minimum> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "minimize_1d needs a finite bracket lo < hi, got [{lo}, {hi}]"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("minimize_1d tol {tol} must be positive")));
    }
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let mut eval = |x: f64, count: &mut usize| -> Result<f64> {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("objective is {v} at x = {x}")))
        }
    };

    let mut evaluations = 0;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = eval(x, &mut evaluations)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);

    for _ in 0..MAX_BRENT_ITERATIONS {
        let xm = 0.5 * (a + b);
        let tol1 = tol + 1e-15 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= xm { a - x } else { b - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = eval(u, &mut evaluations)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok(Minimum { argmin: x, min: fx, evaluations })
}
