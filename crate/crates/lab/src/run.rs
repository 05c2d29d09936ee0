//! Run directories: metrics CSV, policy checkpoint and the persisted config.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grpo_lambda_core::policy::{ContextKey, PolicyParams};
use grpo_lambda_core::trainer::{self, Executor, MetricsRow, TrainOutcome};
use rayon::prelude::*;

use crate::config::ExperimentConfig;

/// Environment variable naming the output root.
pub const RUNS_ENV: &str = "GRPO_LAMBDA_RUNS";
pub const DEFAULT_RUNS_DIR: &str = "runs";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

const CHECKPOINT_MAGIC: &str = "grpo-lambda-checkpoint v1";

/// `$GRPO_LAMBDA_RUNS`, or `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

/// Executes jobs on the current rayon pool, preserving index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl Executor for Rayon {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Runs `f` on a dedicated pool with `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building thread pool")?;
    Ok(pool.install(f))
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let env = cfg.env_spec()?;
    let outcome = trainer::train(
        &env,
        &cfg.train_config()?,
        &cfg.trace_config()?,
        cfg.variant()?,
        &Rayon,
    )?;
    Ok(outcome)
}

/// Trains and writes `<root>/<run name>/`; returns the directory.
pub fn train_to_dir(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let outcome = train(cfg)?;
    let dir = root.join(cfg.run_name());
    write_run_dir(&dir, cfg, &outcome)?;
    Ok(dir)
}

/// Writes into a sibling temp directory and renames it into place, so a
/// run directory is either complete or absent.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let name = dir
        .file_name()
        .context("run directory has no name")?
        .to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(tmp.join(METRICS_FILE), metrics_csv(&outcome.metrics)?)?;
    fs::write(tmp.join(CHECKPOINT_FILE), checkpoint_text(&outcome.policy))?;
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
    }
    fs::rename(&tmp, dir).with_context(|| format!("moving run into {}", dir.display()))?;
    Ok(())
}

/// Renders metrics with a header row; floats use shortest round-trip form.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MetricsRow::COLUMNS)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.mean_reward.to_string(),
            r.kl_to_ref.to_string(),
            r.mean_completion_len.to_string(),
            r.policy_loss.to_string(),
            r.kl_loss.to_string(),
            r.clipped_fraction.to_string(),
            r.degenerate_group_fraction.to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Reads any CSV with a header into `(columns, rows)`.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let (header, rows) = read_table(path)?;
    if header != MetricsRow::COLUMNS {
        bail!("{} does not have the metrics header", path.display());
    }
    rows.iter()
        .map(|r| {
            let f = |i: usize| -> Result<f64> { Ok(r[i].parse::<f64>()?) };
            Ok(MetricsRow {
                step: r[0].parse()?,
                mean_reward: f(1)?,
                kl_to_ref: f(2)?,
                mean_completion_len: f(3)?,
                policy_loss: f(4)?,
                kl_loss: f(5)?,
                clipped_fraction: f(6)?,
                degenerate_group_fraction: f(7)?,
            })
        })
        .collect()
}

/// Text checkpoint: a magic line, the shape, then one `key logits...` line
/// per stored row in key order.
pub fn checkpoint_text(policy: &PolicyParams) -> String {
    let mut out = format!(
        "{CHECKPOINT_MAGIC}\nvocab_size {}\ncontext_order {}\nrows {}\n",
        policy.vocab_size(),
        policy.context_order(),
        policy.num_rows()
    );
    for (key, logits) in policy.rows() {
        out.push_str(&key.0.to_string());
        for z in logits {
            out.push(' ');
            out.push_str(&z.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<PolicyParams> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        bail!("not a version-1 checkpoint");
    }
    let mut field = |name: &str| -> Result<usize> {
        let line = lines.next().context("truncated checkpoint header")?;
        let value = line
            .strip_prefix(name)
            .and_then(|v| v.strip_prefix(' '))
            .with_context(|| format!("expected `{name}` in checkpoint header"))?;
        Ok(value.parse()?)
    };
    let vocab = field("vocab_size")?;
    let order = field("context_order")?;
    let rows = field("rows")?;
    let mut policy = PolicyParams::new(vocab, order)?;
    let mut seen = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let mut parts = line.split(' ');
        let key: u64 = parts.next().context("empty checkpoint row")?.parse()?;
        let logits = parts
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()?;
        policy.set_logits(ContextKey(key), logits)?;
        seen += 1;
    }
    if seen != rows {
        bail!("checkpoint declares {rows} rows but holds {seen}");
    }
    Ok(policy)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut p = PolicyParams::new(4, 2).unwrap();
        p.set_logits(p.context_key(&[1]), vec![0.1, -2.5, 1e-17, 3.0])
            .unwrap();
        p.set_logits(p.context_key(&[2, 3]), vec![1.0 / 3.0, 0.0, -0.0, 7.25])
            .unwrap();
        let text = checkpoint_text(&p);
        assert!(text.starts_with(CHECKPOINT_MAGIC));
        assert_eq!(parse_checkpoint(&text).unwrap(), p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = PolicyParams::new(3, 1).unwrap();
        let text = checkpoint_text(&p);
        assert!(parse_checkpoint(&text.replace("v1", "v9")).is_err());
        assert!(parse_checkpoint(&text.replace("rows 0", "rows 2")).is_err());
        assert!(parse_checkpoint(&format!("{text}5 1 2\n")).is_err());
    }

    #[test]
    fn metrics_header_is_exact() {
        let bytes = metrics_csv(&[]).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "step,mean_reward,kl_to_ref,mean_completion_len,policy_loss,kl_loss,clipped_fraction,degenerate_group_fraction\n"
        );
    }
}
