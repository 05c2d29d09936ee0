//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use grpo_lambda_core::traces::{build_trace_matrix, TraceConfig, TraceMatrix};

use crate::compare::{self, CompareOptions, VariantSpec};
use crate::config::{parse_style, ConfigError, ExperimentConfig, Overrides};
use crate::run::{self, read_table};
use crate::svg::{line_chart, Series};
use crate::verify::{self, VerifyOptions};

#[derive(Debug, Parser)]
#[command(
    name = "grpo-lambda",
    version,
    about = "GRPO and GRPO-λ on synthetic token MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration into a run directory.
    Train(TrainArgs),
    /// Train several variants over several seeds and summarize.
    Compare(CompareArgs),
    /// Run every oracle suite; exits 1 on any failure.
    Verify(VerifyArgs),
    /// Print a trace matrix as CSV.
    TraceDump(TraceDumpArgs),
    /// Render a metrics or curves CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct OverrideArgs {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub update: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            variant: self.variant.clone(),
            lambda: self.lambda,
            gamma: self.gamma,
            style: self.style.clone(),
            update: self.update.clone(),
            seed: self.seed,
            steps: self.steps,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Output root (default: $GRPO_LAMBDA_RUNS or ./runs).
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Worker threads for rollouts (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Base TOML configuration; variants override it.
    pub config: PathBuf,
    /// `a..b` or a comma-separated list.
    #[arg(long, default_value = "0..10")]
    pub seeds: String,
    /// `variant[:key=value,...]`, repeated; keys are lambda, gamma, style, update, lr.
    #[arg(long = "variant", required = true)]
    pub variants: Vec<String>,
    /// Reward threshold as a fraction of the maximum achievable reward.
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// Moving-average window applied before thresholding.
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Where to write curves, summary and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the trace matrices handed to the losses (self-test of the suites).
    #[arg(long)]
    pub inject_trace_fault: bool,
    /// Run reduced instance counts.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TraceDumpArgs {
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value = "recent")]
    pub style: String,
    /// Matrix size.
    #[arg(short = 't', long = "len")]
    pub len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub floor: f64,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `metrics.csv` of a run or `curves.csv` of a comparison.
    pub csv: PathBuf,
    /// Column to plot (default: mean_reward, or reward_median for curves).
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Verify(a) => cmd_verify(a),
        Command::TraceDump(a) => cmd_trace_dump(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    cfg.apply(overrides)?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config, &a.overrides.overrides())?;
    let root = a.runs_dir.unwrap_or_else(run::runs_root);
    let dir = run::with_workers(a.workers, || run::train_to_dir(&cfg, &root))??;
    let metrics = run::read_metrics(&dir.join(run::METRICS_FILE))?;
    if let Some(last) = metrics.last() {
        println!(
            "steps={} final mean_reward={} kl_to_ref={}",
            metrics.len(),
            last.mean_reward,
            last.kl_to_ref
        );
    }
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode> {
    let base = load_config(
        &a.config,
        &Overrides {
            steps: a.steps,
            ..Overrides::default()
        },
    )?;
    let opts = CompareOptions {
        seeds: compare::parse_seeds(&a.seeds)?,
        variants: a
            .variants
            .iter()
            .map(|v| VariantSpec::parse(v))
            .collect::<Result<Vec<_>>>()?,
        threshold: a.threshold,
        window: a.window,
        runs_root: a.runs_dir.unwrap_or_else(run::runs_root),
        out: a.out,
    };
    let result = run::with_workers(a.workers, || compare::run_compare(&base, &opts))??;
    print!("{}", compare::summary_table(&result));
    println!("{}", result.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let mut opts = VerifyOptions {
        seed: a.seed,
        inject_trace_fault: a.inject_trace_fault,
        ..VerifyOptions::default()
    };
    if a.quick {
        opts.lambda0_groups = 100;
        opts.identity_instances = 100;
        opts.gradient_groups = 10;
        opts.bound_instances = 10;
        opts.nae_groups = 100;
        opts.max_trace_dim = 12;
    }
    let reports = run::with_workers(a.workers, || verify::run_all(&opts))?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("{failed} suite(s) failed");
        Ok(ExitCode::from(1))
    } else {
        println!("all {} suites passed", reports.len());
        Ok(ExitCode::SUCCESS)
    }
}

/// Full square matrix, one row per line, entries in shortest round-trip form.
pub fn trace_csv(m: &TraceMatrix) -> String {
    let mut out = String::new();
    for t in 0..m.dim() {
        let row: Vec<String> = (0..m.dim()).map(|c| format!("{:?}", m.get(t, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_trace_dump(a: TraceDumpArgs) -> Result<ExitCode> {
    let cfg = TraceConfig {
        gamma: a.gamma,
        lambda: a.lambda,
        style: parse_style(&a.style)?,
        floor: a.floor,
        ..TraceConfig::default()
    };
    let m = build_trace_matrix(&cfg, a.len)?;
    let text = trace_csv(&m);
    match a.out {
        Some(path) => run::write_atomic(&path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(a: PlotArgs) -> Result<ExitCode> {
    let (header, rows) = read_table(&a.csv)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let grouped = col("variant").is_some();
    let column = a.column.unwrap_or_else(|| {
        if grouped {
            "reward_median"
        } else {
            "mean_reward"
        }
        .to_string()
    });
    let y = col(&column).with_context(|| format!("no column `{column}` in {}", a.csv.display()))?;
    let x = col("step").context("CSV has no `step` column")?;
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .with_context(|| format!("not a number: `{s}`"))
    };

    let mut series: Vec<Series> = Vec::new();
    // For curves, draw the IQR band around the median columns.
    let band_cols = column
        .strip_suffix("_median")
        .and_then(|stem| Some((col(&format!("{stem}_q1"))?, col(&format!("{stem}_q3"))?)));
    for r in &rows {
        let label = if grouped {
            r[col("variant").unwrap()].clone()
        } else {
            column.clone()
        };
        if series.last().map(|s| s.label != label).unwrap_or(true) {
            series.push(Series {
                label,
                ..Series::default()
            });
        }
        let s = series.last_mut().expect("pushed above");
        let xv = num(&r[x])?;
        s.points.push((xv, num(&r[y])?));
        if let Some((lo, hi)) = band_cols {
            s.band.push((xv, num(&r[lo])?, num(&r[hi])?));
        }
    }
    if series.is_empty() {
        bail!("{} has no rows", a.csv.display());
    }
    let svg = line_chart(&column, "step", &column, &series);
    run::write_atomic(&a.out, svg.as_bytes())?;
    println!("{}", a.out.display());
    Ok(ExitCode::SUCCESS)
}
