//! Multi-seed comparison of variants: per-step median/IQR curves and a
//! steps-to-threshold summary.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use grpo_lambda_core::trainer::{smoothed, steps_to_threshold, MetricsRow};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Overrides};
use crate::run::{self, write_atomic};
use crate::svg::{line_chart, Series};

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const NOT_REACHED: &str = "not reached";

/// A labelled set of overrides, written `variant[:key=value,...]`, e.g.
/// `grpo_lambda:lambda=0.99,style=both`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub label: String,
    pub overrides: VariantOverrides,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariantOverrides {
    pub variant: String,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub style: Option<String>,
    pub update: Option<String>,
    pub lr: Option<f64>,
}

impl VariantSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (variant, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut o = VariantOverrides {
            variant: variant.to_string(),
            ..VariantOverrides::default()
        };
        for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("expected key=value in `{kv}`"))?;
            match k {
                "lambda" => o.lambda = Some(v.parse()?),
                "gamma" => o.gamma = Some(v.parse()?),
                "lr" => o.lr = Some(v.parse()?),
                "style" => o.style = Some(v.to_string()),
                "update" => o.update = Some(v.to_string()),
                other => bail!("unknown variant key `{other}`"),
            }
        }
        Ok(Self {
            label: s.to_string(),
            overrides: o,
        })
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> Result<ExperimentConfig> {
        let o = &self.overrides;
        let mut cfg = base.clone();
        cfg.apply(&Overrides {
            variant: Some(o.variant.clone()),
            lambda: o.lambda,
            gamma: o.gamma,
            style: o.style.clone(),
            update: o.update.clone(),
            lr: o.lr,
            seed: Some(seed),
            steps: None,
        })?;
        Ok(cfg)
    }
}

/// Accepts `a..b` (half-open) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        (a.trim().parse()?..b.trim().parse()?).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!("no seeds in `{s}`");
    }
    Ok(seeds)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSpec>,
    /// Fraction of the maximum achievable reward.
    pub threshold: f64,
    /// Moving-average window for thresholds and final rewards.
    pub window: usize,
    pub runs_root: PathBuf,
    /// Output directory; defaults to `<runs_root>/compare-<hash>`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub label: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Vec<MetricsRow>>,
    pub run_dirs: Vec<PathBuf>,
    pub steps_to_threshold: Vec<Option<usize>>,
    pub final_smoothed: Vec<f64>,
}

impl VariantResult {
    /// Median over seeds, unreached seeds counting as infinitely slow.
    pub fn median_steps(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .steps_to_threshold
            .iter()
            .map(|s| s.map_or(f64::INFINITY, |x| x as f64))
            .collect();
        v.sort_by(f64::total_cmp);
        let m = quantile_sorted(&v, 0.5);
        m.is_finite().then_some(m)
    }

    pub fn median_final(&self) -> f64 {
        let mut v = self.final_smoothed.clone();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, 0.5)
    }

    pub fn reached(&self) -> usize {
        self.steps_to_threshold
            .iter()
            .filter(|s| s.is_some())
            .count()
    }

    pub fn max_kl(&self) -> f64 {
        self.metrics
            .iter()
            .flatten()
            .map(|m| m.kl_to_ref)
            .fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
    }

    pub fn all_kl_finite(&self) -> bool {
        self.metrics
            .iter()
            .flatten()
            .all(|m| m.kl_to_ref.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub out_dir: PathBuf,
    pub threshold: f64,
    pub variants: Vec<VariantResult>,
}

/// Linear interpolation between order statistics of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_iqr(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        quantile_sorted(values, 0.5),
        quantile_sorted(values, 0.25),
        quantile_sorted(values, 0.75),
    )
}

fn compare_hash(base: &ExperimentConfig, opts: &CompareOptions) -> String {
    let mut h = Sha256::new();
    h.update(base.to_toml());
    for v in &opts.variants {
        h.update(v.label.as_bytes());
        h.update([0]);
    }
    for s in &opts.seeds {
        h.update(s.to_le_bytes());
    }
    h.update(opts.threshold.to_le_bytes());
    h.update((opts.window as u64).to_le_bytes());
    h.finalize()[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn run_compare(base: &ExperimentConfig, opts: &CompareOptions) -> Result<CompareResult> {
    if opts.variants.len() < 2 {
        bail!("compare needs at least two variants");
    }
    let env = base.env_spec()?;
    let threshold = opts.threshold * env.max_achievable_reward();
    let jobs: Vec<(usize, u64)> = (0..opts.variants.len())
        .flat_map(|v| opts.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let configs = jobs
        .iter()
        .map(|&(v, s)| opts.variants[v].apply(base, s))
        .collect::<Result<Vec<_>>>()?;
    // Specs that resolve to the same configuration share one run.
    let mut unique: Vec<&ExperimentConfig> = Vec::new();
    let mut slot = Vec::with_capacity(configs.len());
    for cfg in &configs {
        match unique.iter().position(|u| *u == cfg) {
            Some(i) => slot.push(i),
            None => {
                slot.push(unique.len());
                unique.push(cfg);
            }
        }
    }
    let outcomes = unique
        .par_iter()
        .map(|cfg| -> Result<(PathBuf, Vec<MetricsRow>)> {
            let outcome =
                run::train(cfg).with_context(|| format!("run {} failed", cfg.run_name()))?;
            let dir = opts.runs_root.join(cfg.run_name());
            run::write_run_dir(&dir, cfg, &outcome)?;
            Ok((dir, outcome.metrics))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut variants: Vec<VariantResult> = opts
        .variants
        .iter()
        .map(|v| VariantResult {
            label: v.label.clone(),
            seeds: Vec::new(),
            metrics: Vec::new(),
            run_dirs: Vec::new(),
            steps_to_threshold: Vec::new(),
            final_smoothed: Vec::new(),
        })
        .collect();
    for (&(v, seed), &i) in jobs.iter().zip(&slot) {
        let (dir, metrics) = outcomes[i].clone();
        let rewards: Vec<f64> = metrics.iter().map(|m| m.mean_reward).collect();
        let r = &mut variants[v];
        r.seeds.push(seed);
        r.steps_to_threshold
            .push(steps_to_threshold(&rewards, threshold, opts.window));
        r.final_smoothed.push(
            smoothed(&rewards, opts.window)
                .last()
                .copied()
                .unwrap_or(0.0),
        );
        r.metrics.push(metrics);
        r.run_dirs.push(dir);
    }

    let out_dir = opts.out.clone().unwrap_or_else(|| {
        opts.runs_root
            .join(format!("compare-{}", compare_hash(base, opts)))
    });
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let result = CompareResult {
        out_dir,
        threshold,
        variants,
    };
    write_outputs(&result)?;
    Ok(result)
}

struct Curve {
    step: usize,
    reward: (f64, f64, f64),
    kl: (f64, f64, f64),
}

fn curves(v: &VariantResult) -> Vec<Curve> {
    let steps = v.metrics.iter().map(Vec::len).min().unwrap_or(0);
    (0..steps)
        .map(|t| {
            let mut r: Vec<f64> = v.metrics.iter().map(|m| m[t].mean_reward).collect();
            let mut k: Vec<f64> = v.metrics.iter().map(|m| m[t].kl_to_ref).collect();
            Curve {
                step: t,
                reward: median_iqr(&mut r),
                kl: median_iqr(&mut k),
            }
        })
        .collect()
}

fn write_outputs(result: &CompareResult) -> Result<()> {
    let dir = &result.out_dir;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "step",
        "reward_median",
        "reward_q1",
        "reward_q3",
        "kl_median",
        "kl_q1",
        "kl_q3",
    ])?;
    let mut reward_series = Vec::new();
    let mut kl_series = Vec::new();
    for v in &result.variants {
        let c = curves(v);
        for p in &c {
            w.write_record([
                v.label.clone(),
                p.step.to_string(),
                p.reward.0.to_string(),
                p.reward.1.to_string(),
                p.reward.2.to_string(),
                p.kl.0.to_string(),
                p.kl.1.to_string(),
                p.kl.2.to_string(),
            ])?;
        }
        reward_series.push(Series {
            label: v.label.clone(),
            points: c.iter().map(|p| (p.step as f64, p.reward.0)).collect(),
            band: c
                .iter()
                .map(|p| (p.step as f64, p.reward.1, p.reward.2))
                .collect(),
        });
        kl_series.push(Series {
            label: v.label.clone(),
            points: c.iter().map(|p| (p.step as f64, p.kl.0)).collect(),
            band: c.iter().map(|p| (p.step as f64, p.kl.1, p.kl.2)).collect(),
        });
    }
    write_atomic(
        &dir.join(CURVES_FILE),
        &w.into_inner().map_err(|e| e.into_error())?,
    )?;
    write_atomic(&dir.join(SUMMARY_FILE), &summary_csv(result)?)?;
    write_atomic(
        &dir.join("reward.svg"),
        line_chart(
            "mean reward (median, IQR)",
            "step",
            "mean_reward",
            &reward_series,
        )
        .as_bytes(),
    )?;
    write_atomic(
        &dir.join("kl.svg"),
        line_chart(
            "KL to reference (median, IQR)",
            "step",
            "kl_to_ref",
            &kl_series,
        )
        .as_bytes(),
    )?;
    Ok(())
}

pub fn summary_csv(result: &CompareResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "seeds",
        "threshold",
        "reached",
        "median_steps_to_threshold",
        "final_smoothed_reward_median",
        "max_kl_to_ref",
    ])?;
    for v in &result.variants {
        w.write_record([
            v.label.clone(),
            v.seeds.len().to_string(),
            result.threshold.to_string(),
            v.reached().to_string(),
            v.median_steps()
                .map_or_else(|| NOT_REACHED.to_string(), |m| m.to_string()),
            v.median_final().to_string(),
            v.max_kl().to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Human-readable summary table.
pub fn summary_table(result: &CompareResult) -> String {
    let mut out = format!(
        "{:<44} {:>6} {:>8} {:>14} {:>12} {:>10}\n",
        "variant", "seeds", "reached", "median steps", "final reward", "max KL"
    );
    for v in &result.variants {
        out.push_str(&format!(
            "{:<44} {:>6} {:>8} {:>14} {:>12.4} {:>10.4}\n",
            v.label,
            v.seeds.len(),
            v.reached(),
            v.median_steps()
                .map_or_else(|| NOT_REACHED.to_string(), |m| format!("{m}")),
            v.median_final(),
            v.max_kl()
        ));
    }
    out
}
