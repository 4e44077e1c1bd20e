//! Parameter sweeps driving the theory and the simulator, with CSV and JSON-lines output.

use std::io::Write;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::predictor::predict;
use crate::regularizers::{RegularizerSpec, SignalSpec};
use crate::saddle::{ProblemSpec, SolverOptions};
use crate::simulator::{
    activation_constants, run_trials, sizes_for_ratio, Activation, EmpiricalAggregate, ExperimentConfig,
    FeatureKind, FitOptions, GenErrorMode, MetricSummary, TrialRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Theory,
    Simulate,
    Compare,
    Universality,
    Sparsity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    #[default]
    Gamma,
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

/// A whole sweep as a single JSON document. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: Mode,
    pub sweep_axis: SweepAxis,
    pub axis_values: Vec<f64>,
    /// `m/n`; ignored on a gamma sweep.
    pub gamma: f64,
    /// `m/d`.
    pub delta: f64,
    /// Ignored on a lambda sweep.
    pub lambda: f64,
    pub alpha: f64,
    pub sigma_eps2: f64,
    pub activation: Activation,
    pub signal: SignalSpec,
    /// `n + m` for simulated points.
    pub total_size: usize,
    /// Trials per simulated point; 0 on a sparsity sweep skips the simulator.
    pub trials: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Defaults to `10n`.
    pub test_size: Option<usize>,
    pub zero_threshold_scale: f64,
    pub gen_mode: Option<GenErrorMode>,
    pub solver: SolverOptions,
    pub fit: FitOptions,
    pub output_path: Option<String>,
    pub format: OutputFormat,
    /// JSON-lines file receiving every trial record, in axis order.
    pub trial_dump: Option<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Theory,
            sweep_axis: SweepAxis::Gamma,
            axis_values: vec![0.5, 1.5],
            gamma: 1.0,
            delta: 1.0,
            lambda: 1e-3,
            alpha: 1e-2,
            sigma_eps2: 0.1,
            activation: Activation::Tanh,
            signal: SignalSpec::half_ones(),
            total_size: 1000,
            trials: 20,
            seed: 0,
            threads: None,
            test_size: None,
            zero_threshold_scale: 0.01,
            gen_mode: None,
            solver: SolverOptions::default(),
            fit: FitOptions::default(),
            output_path: None,
            format: OutputFormat::Csv,
            trial_dump: None,
        }
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis_values.is_empty() {
            return Err(Error::Config("axis_values is empty".into()));
        }
        if self.axis_values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("axis_values must be strictly increasing".into()));
        }
        if self.axis_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("axis_values must be finite".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("delta", self.delta)?;
        if self.sweep_axis == SweepAxis::Lambda {
            positive("gamma", self.gamma)?;
        }
        if !(self.sigma_eps2 >= 0.0) {
            return Err(Error::Config("sigma_eps2 must be >= 0".into()));
        }
        let simulates = matches!(self.mode, Mode::Simulate | Mode::Compare | Mode::Universality)
            || (self.mode == Mode::Sparsity && self.trials > 0);
        if simulates && self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.solver.validate()?;
        for &v in &self.axis_values {
            let (_, lambda) = self.point(v);
            if lambda < 0.0 {
                return Err(Error::Config(format!("lambda {lambda} is negative")));
            }
        }
        RegularizerSpec::elastic_net(self.lambda.max(0.0), self.alpha)?;
        Ok(())
    }

    /// `(γ, λ)` at one axis value.
    pub fn point(&self, value: f64) -> (f64, f64) {
        match self.sweep_axis {
            SweepAxis::Gamma => (value, self.lambda),
            SweepAxis::Lambda => (self.gamma, value),
        }
    }

    fn experiment(&self, gamma: f64, lambda: f64) -> Result<ExperimentConfig> {
        let (n, m, d) = sizes_for_ratio(gamma, self.delta, self.total_size)?;
        let mut cfg = ExperimentConfig::new(n, m, d, self.sigma_eps2, RegularizerSpec::elastic_net(lambda, self.alpha)?);
        cfg.signal = self.signal.clone();
        cfg.activation = self.activation.clone();
        cfg.seed = self.seed;
        cfg.trials = self.trials;
        cfg.test_size = self.test_size.unwrap_or(10 * n);
        cfg.zero_threshold_scale = self.zero_threshold_scale;
        cfg.gen_mode = self.gen_mode;
        cfg.fit = self.fit;
        Ok(cfg)
    }
}

/// One table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) if v.is_finite() => format!("{v:.16e}"),
            Cell::Num(v) => v.to_string(),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cell::Num(v) if v.is_finite() => {
                // Same 17 significant digits as the CSV, kept numeric.
                let v: f64 = format!("{v:.16e}").parse().expect("formatted float parses");
                s.serialize_f64(v)
            }
            Cell::Num(_) | Cell::Empty => s.serialize_none(),
            Cell::Int(v) => s.serialize_u64(*v),
            Cell::Text(t) => s.serialize_str(t),
        }
    }
}

/// Sweep output: one row per axis value, in axis order. The last column is
/// always `error`, empty on success.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    /// Per-point trial records, in axis order (empty for theory-only rows).
    pub trial_records: Vec<Vec<TrialRecord>>,
}

struct RowRef<'a> {
    columns: &'a [&'static str],
    row: &'a [Cell],
}

impl Serialize for RowRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.columns.len()))?;
        for (k, v) in self.columns.iter().zip(self.row) {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl Table {
    fn new(columns: Vec<&'static str>) -> Self {
        Self { columns, rows: Vec::new(), trial_records: Vec::new() }
    }

    fn push(&mut self, mut row: Vec<Cell>, error: Option<String>, records: Vec<TrialRecord>) {
        let width = self.columns.len() - 1;
        row.resize(width, Cell::Empty);
        row.push(error.map_or(Cell::Empty, Cell::Text));
        self.rows.push(row);
        self.trial_records.push(records);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    /// Numeric column by name; non-numeric cells become NaN.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.column(name) else { return Vec::new() };
        self.rows
            .iter()
            .map(|r| match r[i] {
                Cell::Num(v) => v,
                Cell::Int(v) => v as f64,
                _ => f64::NAN,
            })
            .collect()
    }

    pub fn error_count(&self) -> usize {
        self.rows.iter().filter(|r| !matches!(r.last(), Some(Cell::Empty))).count()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv)).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut out, &RowRef { columns: &self.columns, row })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write(&self, format: OutputFormat, out: impl Write) -> Result<()> {
        match format {
            OutputFormat::Csv => self.write_csv(out),
            OutputFormat::Jsonl => self.write_jsonl(out),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn num(v: f64) -> Cell {
    Cell::Num(v)
}

fn sizes(cfg: &ExperimentConfig) -> [Cell; 3] {
    [Cell::Int(cfg.n as u64), Cell::Int(cfg.m as u64), Cell::Int(cfg.d as u64)]
}

fn summary(s: MetricSummary) -> [Cell; 2] {
    [num(s.mean), num(s.std_error)]
}

fn rel_gap(empirical: f64, theory: f64) -> f64 {
    (empirical - theory) / theory.abs()
}

fn z_score(a: MetricSummary, b: MetricSummary) -> f64 {
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    if se > 0.0 {
        (a.mean - b.mean) / se
    } else if a.mean == b.mean {
        0.0
    } else {
        f64::INFINITY.copysign(a.mean - b.mean)
    }
}

struct Sweep<'a> {
    cfg: &'a SweepConfig,
    rho: (f64, f64),
}

impl<'a> Sweep<'a> {
    fn new(cfg: &'a SweepConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, rho: activation_constants(&cfg.activation, 200)? })
    }

    fn reg(&self, lambda: f64) -> Result<RegularizerSpec> {
        RegularizerSpec::elastic_net(lambda, self.cfg.alpha)
    }

    fn asymptotic(&self, gamma: f64, lambda: f64) -> Result<ProblemSpec> {
        let c = self.cfg;
        ProblemSpec::new(gamma, c.delta, c.sigma_eps2, self.rho.0, self.rho.1, self.reg(lambda)?, c.signal.clone())
    }

    /// Theory at the exact ratios of a finite experiment.
    fn finite(&self, exp: &ExperimentConfig, lambda: f64) -> Result<ProblemSpec> {
        let c = self.cfg;
        ProblemSpec::from_sizes(exp.n, exp.m, exp.d, c.sigma_eps2, self.rho.0, self.rho.1, self.reg(lambda)?, c.signal.clone())
    }

    fn lead(&self, value: f64) -> Vec<Cell> {
        let (gamma, lambda) = self.cfg.point(value);
        vec![num(gamma), num(lambda), num(self.cfg.alpha)]
    }

    fn each(&self, columns: Vec<&'static str>, row: impl Fn(f64, &mut Vec<Cell>) -> Result<Vec<TrialRecord>>) -> Table {
        let mut table = Table::new(columns);
        for &value in &self.cfg.axis_values {
            let mut cells = self.lead(value);
            match row(value, &mut cells) {
                Ok(records) => table.push(cells, None, records),
                Err(e) => table.push(cells, Some(e.to_string()), Vec::new()),
            }
        }
        table
    }
}

pub const THEORY_COLUMNS: &[&str] = &[
    "gamma", "lambda", "alpha", "train_theory", "gen_theory", "nonzero_theory", "beta", "q", "xi", "t", "residual", "error",
];

pub const SIMULATE_COLUMNS: &[&str] = &[
    "gamma", "lambda", "alpha", "n", "m", "d", "trials_ok", "trials_failed", "train_emp", "train_se", "gen_emp",
    "gen_se", "nonzero_emp", "nonzero_se", "error",
];

pub const COMPARE_COLUMNS: &[&str] = &[
    "gamma", "lambda", "alpha", "n", "m", "d", "train_theory", "gen_theory", "nonzero_theory", "train_emp", "train_se",
    "gen_emp", "gen_se", "nonzero_emp", "nonzero_se", "train_rel_gap", "gen_rel_gap", "nonzero_rel_gap", "error",
];

pub const UNIVERSALITY_COLUMNS: &[&str] = &[
    "gamma", "lambda", "alpha", "n", "m", "d", "train_nl", "train_nl_se", "gen_nl", "gen_nl_se", "nonzero_nl",
    "nonzero_nl_se", "train_sg", "train_sg_se", "gen_sg", "gen_sg_se", "nonzero_sg", "nonzero_sg_se", "train_z",
    "gen_z", "nonzero_z", "error",
];

pub const SPARSITY_COLUMNS: &[&str] = &[
    "gamma", "lambda", "alpha", "nonzero_over_m", "nonzero_over_n", "gen_theory", "nonzero_over_m_emp",
    "nonzero_over_m_se", "nonzero_over_n_emp", "nonzero_over_n_se", "error",
];

/// Asymptotic predictions at each axis value.
pub fn run_theory_sweep(cfg: &SweepConfig) -> Result<Table> {
    let sweep = Sweep::new(cfg)?;
    Ok(sweep.each(THEORY_COLUMNS.to_vec(), |value, cells| {
        let (gamma, lambda) = cfg.point(value);
        let p = predict(&sweep.asymptotic(gamma, lambda)?, &cfg.solver)?;
        let s = &p.saddle;
        cells.extend([p.train_error, p.gen_error, p.nonzero_fraction, s.beta, s.q, s.xi, s.t, s.residual].map(num));
        Ok(Vec::new())
    }))
}

/// Empirical means and standard errors at each axis value.
pub fn run_simulate(cfg: &SweepConfig) -> Result<Table> {
    let sweep = Sweep::new(cfg)?;
    Ok(sweep.each(SIMULATE_COLUMNS.to_vec(), |value, cells| {
        let (gamma, lambda) = cfg.point(value);
        let exp = cfg.experiment(gamma, lambda)?;
        let agg = run_trials(&exp, FeatureKind::Nonlinear)?;
        cells.extend(sizes(&exp));
        cells.extend([Cell::Int(agg.trials_ok as u64), Cell::Int(agg.trials_failed as u64)]);
        cells.extend(summary(agg.train));
        cells.extend(summary(agg.gen));
        cells.extend(summary(agg.nonzero));
        Ok(agg.records)
    }))
}

/// Theory at the finite ratios next to the empirical aggregate.
pub fn run_compare(cfg: &SweepConfig) -> Result<Table> {
    let sweep = Sweep::new(cfg)?;
    Ok(sweep.each(COMPARE_COLUMNS.to_vec(), |value, cells| {
        let (gamma, lambda) = cfg.point(value);
        let exp = cfg.experiment(gamma, lambda)?;
        let p = predict(&sweep.finite(&exp, lambda)?, &cfg.solver)?;
        let agg = run_trials(&exp, FeatureKind::Nonlinear)?;
        cells.extend(sizes(&exp));
        cells.extend([p.train_error, p.gen_error, p.nonzero_fraction].map(num));
        cells.extend(summary(agg.train));
        cells.extend(summary(agg.gen));
        cells.extend(summary(agg.nonzero));
        cells.extend(
            [
                rel_gap(agg.train.mean, p.train_error),
                rel_gap(agg.gen.mean, p.gen_error),
                rel_gap(agg.nonzero.mean, p.nonzero_fraction),
            ]
            .map(num),
        );
        Ok(agg.records)
    }))
}

/// Nonlinear features against their Gaussian surrogate on shared `W`, `Z`, `ε`.
pub fn run_universality(cfg: &SweepConfig) -> Result<Table> {
    let sweep = Sweep::new(cfg)?;
    Ok(sweep.each(UNIVERSALITY_COLUMNS.to_vec(), |value, cells| {
        let (gamma, lambda) = cfg.point(value);
        let exp = cfg.experiment(gamma, lambda)?;
        let nl = run_trials(&exp, FeatureKind::Nonlinear)?;
        let sg = run_trials(&exp, FeatureKind::Surrogate)?;
        cells.extend(sizes(&exp));
        for agg in [&nl, &sg] {
            cells.extend(summary(agg.train));
            cells.extend(summary(agg.gen));
            cells.extend(summary(agg.nonzero));
        }
        cells.extend([z_score(nl.train, sg.train), z_score(nl.gen, sg.gen), z_score(nl.nonzero, sg.nonzero)].map(num));
        let mut records = nl.records;
        records.extend(sg.records);
        Ok(records)
    }))
}

/// Nonzero fraction relative to `m` and to `n`, with the solver's sparsity when
/// `trials > 0`.
pub fn run_sparsity_sweep(cfg: &SweepConfig) -> Result<Table> {
    let sweep = Sweep::new(cfg)?;
    Ok(sweep.each(SPARSITY_COLUMNS.to_vec(), |value, cells| {
        let (gamma, lambda) = cfg.point(value);
        let p = predict(&sweep.asymptotic(gamma, lambda)?, &cfg.solver)?;
        cells.extend([p.nonzero_fraction, p.nonzero_fraction * gamma, p.gen_error].map(num));
        if cfg.trials == 0 {
            return Ok(Vec::new());
        }
        let exp = cfg.experiment(gamma, lambda)?;
        let agg: EmpiricalAggregate = run_trials(&exp, FeatureKind::Nonlinear)?;
        let ratio = exp.gamma();
        cells.extend([
            num(agg.nonzero.mean),
            num(agg.nonzero.std_error),
            num(agg.nonzero.mean * ratio),
            num(agg.nonzero.std_error * ratio),
        ]);
        Ok(agg.records)
    }))
}

/// Dispatch on `cfg.mode`.
pub fn run(cfg: &SweepConfig) -> Result<Table> {
    match cfg.mode {
        Mode::Theory => run_theory_sweep(cfg),
        Mode::Simulate => run_simulate(cfg),
        Mode::Compare => run_compare(cfg),
        Mode::Universality => run_universality(cfg),
        Mode::Sparsity => run_sparsity_sweep(cfg),
    }
}
