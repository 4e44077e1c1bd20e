use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use rfcurves::simulator::write_trial_records;
use rfcurves::sweep::{self, SweepConfig};

/// Learning curves of random-feature elastic-net regression: asymptotic theory
/// and finite-size simulation.
#[derive(Parser)]
#[command(name = "rfcurves", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic train/gen error and sparsity along the sweep axis.
    Theory(Overrides),
    /// Empirical means and standard errors from simulated trials.
    Simulate(Overrides),
    /// Theory next to simulation, with relative gaps.
    Compare(Overrides),
    /// Nonlinear features against their Gaussian surrogate.
    Universality(Overrides),
    /// Nonzero fraction relative to m and n.
    Sparsity(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Args)]
struct Overrides {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (alias of --output-path); stdout when absent.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    output_path: Option<String>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; falls back to RFCURVES_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// gamma or lambda.
    #[arg(long)]
    sweep_axis: Option<String>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    axis_values: Option<Vec<f64>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma_eps2: Option<f64>,
    /// tanh, erf or identity.
    #[arg(long)]
    activation: Option<String>,
    /// Atoms as JSON, e.g. '[{"value":0,"weight":0.5},{"value":1,"weight":0.5}]'.
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    total_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    zero_threshold_scale: Option<f64>,
    /// test_set or surrogate_exact.
    #[arg(long)]
    gen_mode: Option<String>,
    /// JSON-lines file for per-trial records.
    #[arg(long)]
    trial_dump: Option<String>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    shrink: Option<f64>,
    #[arg(long)]
    param_tol: Option<f64>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    quad_order: Option<usize>,
    /// auto, closed_form or quadrature.
    #[arg(long)]
    envelope: Option<String>,
    #[arg(long)]
    fit_tol: Option<f64>,
    #[arg(long)]
    fit_max_iter: Option<usize>,
    /// Print the merged config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn set(map: &mut Map<String, Value>, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        map.insert(key.to_string(), v);
    }
}

fn nested(map: &mut Map<String, Value>, section: &str, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        let entry = map.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(inner) = entry {
            inner.insert(key.to_string(), v);
        }
    }
}

impl Overrides {
    fn merged(&self, mode: &str) -> anyhow::Result<SweepConfig> {
        let base = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => Value::Object(Map::new()),
        };
        let Value::Object(mut map) = base else { bail!("config must be a JSON object") };
        let num = |v: Option<f64>| v.map(Value::from);
        let int = |v: Option<usize>| v.map(Value::from);
        let text = |v: &Option<String>| v.clone().map(Value::from);

        map.insert("mode".into(), Value::from(mode));
        set(&mut map, "output_path", text(&self.out.clone().or_else(|| self.output_path.clone())));
        set(&mut map, "format", self.format.map(|f| Value::from(match f {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        })));
        set(&mut map, "seed", self.seed.map(Value::from));
        set(&mut map, "trials", int(self.trials));
        set(&mut map, "threads", int(self.threads));
        set(&mut map, "sweep_axis", text(&self.sweep_axis));
        set(&mut map, "axis_values", self.axis_values.clone().map(Value::from));
        set(&mut map, "gamma", num(self.gamma));
        set(&mut map, "delta", num(self.delta));
        set(&mut map, "lambda", num(self.lambda));
        set(&mut map, "alpha", num(self.alpha));
        set(&mut map, "sigma_eps2", num(self.sigma_eps2));
        set(&mut map, "activation", text(&self.activation));
        if let Some(s) = &self.signal {
            map.insert("signal".into(), serde_json::from_str(s).context("parsing --signal")?);
        }
        set(&mut map, "total_size", int(self.total_size));
        set(&mut map, "test_size", int(self.test_size));
        set(&mut map, "zero_threshold_scale", num(self.zero_threshold_scale));
        set(&mut map, "gen_mode", text(&self.gen_mode));
        set(&mut map, "trial_dump", text(&self.trial_dump));
        nested(&mut map, "solver", "grid_points", int(self.grid_points));
        nested(&mut map, "solver", "shrink", num(self.shrink));
        nested(&mut map, "solver", "param_tol", num(self.param_tol));
        nested(&mut map, "solver", "grad_tol", num(self.grad_tol));
        nested(&mut map, "solver", "max_rounds", int(self.max_rounds));
        nested(&mut map, "solver", "quad_order", int(self.quad_order));
        nested(&mut map, "solver", "envelope", text(&self.envelope));
        nested(&mut map, "fit", "tol", num(self.fit_tol));
        nested(&mut map, "fit", "max_iter", int(self.fit_max_iter));

        let cfg: SweepConfig = serde_json::from_value(Value::Object(map)).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads(cfg: &SweepConfig) -> anyhow::Result<Option<usize>> {
    if let Some(t) = cfg.threads {
        return Ok(Some(t));
    }
    match std::env::var("RFCURVES_THREADS") {
        Ok(v) => {
            let t: usize = v.trim().parse().with_context(|| format!("RFCURVES_THREADS={v:?}"))?;
            if t == 0 {
                bail!("RFCURVES_THREADS must be >= 1");
            }
            Ok(Some(t))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let (mode, overrides) = match &cli.command {
        Command::Theory(o) => ("theory", o),
        Command::Simulate(o) => ("simulate", o),
        Command::Compare(o) => ("compare", o),
        Command::Universality(o) => ("universality", o),
        Command::Sparsity(o) => ("sparsity", o),
    };
    let cfg = overrides.merged(mode)?;
    if overrides.print_config {
        println!("{}", cfg.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(t) = threads(&cfg)? {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("starting thread pool")?;
    }

    let table = sweep::run(&cfg)?;
    match &cfg.output_path {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {path}"))?;
            let mut w = BufWriter::new(file);
            table.write(cfg.format, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            table.write(cfg.format, &mut w)?;
            w.flush()?;
        }
    }
    if let Some(path) = &cfg.trial_dump {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {path}"))?);
        for records in &table.trial_records {
            write_trial_records(records, &mut w)?;
        }
        w.flush()?;
    }

    let errors = table.error_count();
    if errors > 0 {
        eprintln!("rfcurves: {errors} of {} rows failed; see the error column", table.rows.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rfcurves: {e:#}");
            ExitCode::from(2)
        }
    }
}
