//! Browser bindings: each export takes plain numbers and returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rfcurves::predictor::{predict_from_saddle, theta_hat_samples};
use rfcurves::regularizers::{RegularizerSpec, SignalSpec};
use rfcurves::saddle::{solve_saddle, solve_saddle_warm, ProblemSpec, SaddlePoint, SolverOptions};

// tanh, from `activation_constants`; fixed here so the page needs no quadrature.
const TANH_RHO1: f64 = 0.605_705_509_602_158_8;
const TANH_RHO_STAR2: f64 = 0.027_415_326_035_430_257;
const SIGMA_EPS2: f64 = 0.1;
const MAX_POINTS: usize = 60;

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub train: Option<f64>,
    pub gen: Option<f64>,
    pub nonzero: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Share of draws that are exactly zero; they are left out of `counts`.
    pub zero_fraction: f64,
    pub samples: usize,
    pub gen: f64,
}

fn options() -> SolverOptions {
    SolverOptions { grid_points: 9, ..SolverOptions::default() }
}

fn spec(gamma: f64, lambda: f64, alpha: f64) -> Result<ProblemSpec, String> {
    let reg = RegularizerSpec::elastic_net(lambda, alpha).map_err(|e| e.to_string())?;
    ProblemSpec::new(gamma, 1.0, SIGMA_EPS2, TANH_RHO1, TANH_RHO_STAR2, reg, SignalSpec::half_ones())
        .map_err(|e| e.to_string())
}

fn grid(lo: f64, hi: f64, points: usize, log: bool) -> Result<Vec<f64>, String> {
    if !(points >= 2 && points <= MAX_POINTS) {
        return Err(format!("points must lie in 2..={MAX_POINTS}"));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) || (log && lo <= 0.0) {
        return Err("need a finite range with lo < hi (and lo > 0 on a log axis)".into());
    }
    let (a, b) = if log { (lo.ln(), hi.ln()) } else { (lo, hi) };
    Ok((0..points)
        .map(|i| {
            let u = a + (b - a) * i as f64 / (points - 1) as f64;
            if log { u.exp() } else { u }
        })
        .collect())
}

/// Solve along a curve, warm-starting each point from the previous saddle.
fn curve(xs: &[f64], make: impl Fn(f64) -> Result<ProblemSpec, String>) -> Vec<CurvePoint> {
    let opts = options();
    let mut previous: Option<SaddlePoint> = None;
    xs.iter()
        .map(|&x| {
            let solved = make(x).and_then(|s| {
                let saddle = previous
                    .as_ref()
                    .and_then(|p| solve_saddle_warm(&s, &opts, p, 0.5).ok())
                    .map(Ok)
                    .unwrap_or_else(|| solve_saddle(&s, &opts))
                    .map_err(|e| e.to_string())?;
                previous = Some(saddle.clone());
                predict_from_saddle(&s, saddle, &opts).map_err(|e| e.to_string())
            });
            match solved {
                Ok(p) => CurvePoint {
                    x,
                    train: Some(p.train_error),
                    gen: Some(p.gen_error),
                    nonzero: Some(p.nonzero_fraction),
                    error: None,
                },
                Err(e) => {
                    previous = None;
                    CurvePoint { x, train: None, gen: None, nonzero: None, error: Some(e) }
                }
            }
        })
        .collect()
}

pub fn learning_curve_json(lambda: f64, alpha: f64, gamma_lo: f64, gamma_hi: f64, points: usize) -> Result<String, String> {
    let xs = grid(gamma_lo, gamma_hi, points, false)?;
    let rows = curve(&xs, |g| spec(g, lambda, alpha));
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

pub fn sparsity_curve_json(gamma: f64, alpha: f64, lambda_lo: f64, lambda_hi: f64, points: usize) -> Result<String, String> {
    let xs = grid(lambda_lo, lambda_hi, points, true)?;
    let rows = curve(&xs, |l| spec(gamma, l, alpha));
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

pub fn theta_histogram_json(gamma: f64, lambda: f64, alpha: f64, samples: usize, bins: usize, seed: u32) -> Result<String, String> {
    if !(1..=1_000_000).contains(&samples) || !(1..=200).contains(&bins) {
        return Err("samples must lie in 1..=1e6 and bins in 1..=200".into());
    }
    let s = spec(gamma, lambda, alpha)?;
    let opts = options();
    let saddle = solve_saddle(&s, &opts).map_err(|e| e.to_string())?;
    let draws = theta_hat_samples(&s, &saddle, samples, u64::from(seed)).map_err(|e| e.to_string())?;
    let gen = predict_from_saddle(&s, saddle, &opts).map_err(|e| e.to_string())?.gen_error;
    let nonzero: Vec<f64> = draws.iter().copied().filter(|v| *v != 0.0).collect();
    let zero_fraction = 1.0 - nonzero.len() as f64 / samples as f64;
    let lo = nonzero.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = nonzero.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-12);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for v in &nonzero {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    serde_json::to_string(&Histogram { edges, counts, zero_fraction, samples, gen }).map_err(|e| e.to_string())
}

/// Train/gen error and nonzero fraction over `points` evenly spaced `γ = m/n`.
#[wasm_bindgen]
pub fn learning_curve(lambda: f64, alpha: f64, gamma_lo: f64, gamma_hi: f64, points: usize) -> Result<String, JsValue> {
    learning_curve_json(lambda, alpha, gamma_lo, gamma_hi, points).map_err(|e| JsValue::from_str(&e))
}

/// The same observables over log-spaced `λ` at fixed `γ`.
#[wasm_bindgen]
pub fn sparsity_curve(gamma: f64, alpha: f64, lambda_lo: f64, lambda_hi: f64, points: usize) -> Result<String, JsValue> {
    sparsity_curve_json(gamma, alpha, lambda_lo, lambda_hi, points).map_err(|e| JsValue::from_str(&e))
}

/// Histogram of Monte-Carlo draws of a limiting estimator coordinate.
#[wasm_bindgen]
pub fn theta_histogram(gamma: f64, lambda: f64, alpha: f64, samples: usize, bins: usize, seed: u32) -> Result<String, JsValue> {
    theta_histogram_json(gamma, lambda, alpha, samples, bins, seed).map_err(|e| JsValue::from_str(&e))
}
