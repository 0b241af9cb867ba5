//! Command-line interface. The release path runs in f32; checkpoints and
//! datasets use the formats in `model` and `data`. Exit codes: 0 success,
//! 2 configuration/format problems, 1 everything else.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lipshift::attack::pgd_l2;
use lipshift::certify::{certify_batch, clean_accuracy, Verdict};
use lipshift::config::RunConfig;
use lipshift::data::Dataset;
use lipshift::error::{Error, Result};
use lipshift::model::ArchConfig;
use lipshift::train::{latest_checkpoint, train};
use lipshift::Model32;

#[derive(Parser)]
#[command(name = "lipshift", version, about = "Lipschitz-certified shift-transformer classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training/data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the certification/attack radius.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a CSV log.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for checkpoints and logs.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Certify the evaluation split and emit one verdict per sample.
    Certify {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Discount the certification constant by (1 - p_drop).
        #[arg(long)]
        paper_drop_scaling: bool,
    },
    /// Attack the evaluation split with multi-restart l2 PGD.
    Attack {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's architecture, parameters, and Lipschitz report.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per value of a hyperparameter; one subdirectory per run.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// One of: p_drop, lr, batch_size, stage_depths.
        #[arg(long)]
        param: String,
        /// Comma-separated values; stage_depths variants are separated by `;`
        /// (e.g. "1,1;2,2").
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run the variants concurrently (worker count capped by the
        /// LIPSHIFT_THREADS environment variable).
        #[arg(long)]
        parallel: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        cfg.attack.seed = seed;
    }
    if let Some(eps) = common.eps {
        cfg.train.eps = eps;
        cfg.attack.eps = eps;
        cfg.attack.step_size = 2.5 * eps / cfg.attack.steps.max(1) as f64;
    }
    Ok(cfg)
}

/// Writes CSV either to a file or stdout.
fn emit_csv(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, contents)?;
        }
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
        }
    }
    Ok(())
}

/// Loads the eval split that matches the checkpoint's architecture.
fn eval_split(cfg: &RunConfig, arch: &ArchConfig) -> Result<Dataset<f32>> {
    let (_, eval) = cfg.data.load::<f32>(arch)?;
    Ok(eval)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, epochs, resume } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (train_ds, eval_ds) = cfg.data.load::<f32>(&cfg.arch)?;
            let (mut model, start_epoch) = if resume {
                match latest_checkpoint(&out)? {
                    Some((n, path)) => (Model32::load_checkpoint(&path)?, n + 1),
                    None => (Model32::build(cfg.arch.clone(), cfg.train.seed)?, 0),
                }
            } else {
                (Model32::build(cfg.arch.clone(), cfg.train.seed)?, 0)
            };
            let stats = train(&mut model, &train_ds, &eval_ds, &cfg.train, Some(&out), start_epoch)?;
            if let Some(last) = stats.last() {
                println!(
                    "epoch {}: loss {:.4} clean_acc {:.4} vra {:.4} backbone_bound {:.4}",
                    last.epoch, last.loss, last.clean_acc, last.vra, last.backbone_bound
                );
            } else {
                println!("nothing to do: start epoch {} >= {} epochs", start_epoch, cfg.train.epochs);
            }
            Ok(())
        }
        Command::Certify { common, checkpoint, out, paper_drop_scaling } => {
            let cfg = load_config(&common)?;
            let model = Model32::load_checkpoint(&checkpoint)?;
            let eval = eval_split(&cfg, &model.cfg)?;
            let report = model.lipschitz_report(0)?;
            let certs =
                certify_batch(&model, &report, &eval.images, cfg.train.eps, paper_drop_scaling)?;
            let mut csv = String::from("sample_id,pred,verdict,slack,limiting_class\n");
            let mut certified = 0usize;
            let mut robust_correct = 0usize;
            for (c, &label) in certs.iter().zip(&eval.labels) {
                let verdict = match c.verdict {
                    Verdict::Certified => {
                        certified += 1;
                        if c.predicted == label {
                            robust_correct += 1;
                        }
                        "certified"
                    }
                    Verdict::Bottom => "bottom",
                };
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.sample,
                    c.predicted,
                    verdict,
                    c.slack,
                    c.limiting.map_or(String::new(), |l| l.to_string()),
                ));
            }
            emit_csv(out.as_deref(), &csv)?;
            let n = eval.len().max(1);
            eprintln!(
                "eps {:.6}: certified {}/{} ({:.4}), vra {:.4}, clean_acc {:.4}",
                cfg.train.eps,
                certified,
                eval.len(),
                certified as f64 / n as f64,
                robust_correct as f64 / n as f64,
                clean_accuracy(&model, &eval)?,
            );
            Ok(())
        }
        Command::Attack { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let model = Model32::load_checkpoint(&checkpoint)?;
            let eval = eval_split(&cfg, &model.cfg)?;
            let results = pgd_l2(&model, &eval.images, &eval.labels, &cfg.attack)?;
            let mut csv = String::from("sample_id,clean_correct,attack_success,final_margin\n");
            let mut robust = 0usize;
            for r in &results {
                if r.clean_correct && !r.success {
                    robust += 1;
                }
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.sample, r.clean_correct, r.success, r.final_margin
                ));
            }
            emit_csv(out.as_deref(), &csv)?;
            eprintln!(
                "eps {:.6}: empirical robust accuracy {:.4} ({} / {})",
                cfg.attack.eps,
                robust as f64 / eval.len().max(1) as f64,
                robust,
                eval.len()
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let model = Model32::load_checkpoint(&checkpoint)?;
            println!("architecture:");
            for line in model.cfg.to_text().lines() {
                println!("  {line}");
            }
            println!("parameters: {} tensors, {} scalars", model.params().len(), model.num_scalars());
            let report = model.lipschitz_report(0)?;
            println!("lipschitz bounds:");
            for l in &report.per_layer {
                println!(
                    "  {:<24} {:>10.6}{}",
                    l.name,
                    l.bound,
                    if l.converged { "" } else { "  (not converged; safety factor applied)" }
                );
            }
            println!("backbone_bound: {:.6}", report.backbone_bound);
            println!("scaled_bound:   {:.6}", report.scaled_bound);
            if !report.head_degenerate.is_empty() {
                println!("warning: unnormalized head rows: {:?}", report.head_degenerate);
            }
            Ok(())
        }
        Command::Sweep { common, param, values, out, epochs, parallel } => {
            let base = load_config(&common)?;
            let variants = sweep_variants(&base, &param, &values, epochs)?;
            std::fs::create_dir_all(&out)?;
            let workers = if parallel {
                std::env::var("LIPSHIFT_THREADS")
                    .ok()
                    .and_then(|v| v.parse::<usize>().ok())
                    .unwrap_or_else(|| variants.len().max(1))
                    .max(1)
            } else {
                1
            };
            let mut summary = String::from("param,value,final_loss,clean_acc,vra\n");
            let results = run_parallel(&out, &param, variants, workers)?;
            for (value, stats) in results {
                let last = stats.last();
                summary.push_str(&format!(
                    "{},{},{},{},{}\n",
                    param,
                    value,
                    last.map_or(f64::NAN, |s| s.loss),
                    last.map_or(f64::NAN, |s| s.clean_acc),
                    last.map_or(f64::NAN, |s| s.vra),
                ));
            }
            std::fs::write(out.join("summary.csv"), &summary)?;
            print!("{summary}");
            Ok(())
        }
    }
}

/// One (label, configured run) per sweep value.
fn sweep_variants(
    base: &RunConfig,
    param: &str,
    values: &str,
    epochs: Option<usize>,
) -> Result<Vec<(String, RunConfig)>> {
    let sep = if param == "stage_depths" { ';' } else { ',' };
    let mut out = Vec::new();
    for raw in values.split(sep) {
        let v = raw.trim();
        if v.is_empty() {
            continue;
        }
        let mut cfg = base.clone();
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        match param {
            "p_drop" => cfg.set("arch.p_drop", v)?,
            "lr" => cfg.set("train.lr", v)?,
            "batch_size" => cfg.set("train.batch_size", v)?,
            "stage_depths" => {
                cfg.set("arch.stage_depths", v)?;
                // keep the per-stage widths aligned with the new depth count
                if cfg.arch.embed_dims.len() != cfg.arch.stage_depths.len() {
                    let dim = *cfg.arch.embed_dims.last().unwrap_or(&16);
                    cfg.arch.embed_dims = vec![dim; cfg.arch.stage_depths.len()];
                }
            }
            other => {
                return Err(Error::config(
                    "param",
                    format!("`{other}` is not one of p_drop|lr|batch_size|stage_depths"),
                ))
            }
        }
        cfg.arch.validate()?;
        out.push((v.replace([',', ' '], "-"), cfg));
    }
    if out.is_empty() {
        return Err(Error::config("values", "no sweep values given"));
    }
    Ok(out)
}

type SweepRun = (String, Vec<lipshift::train::EpochStats>);

/// Runs sweep variants on up to `workers` threads, preserving input order.
fn run_parallel(
    out: &Path,
    param: &str,
    variants: Vec<(String, RunConfig)>,
    workers: usize,
) -> Result<Vec<SweepRun>> {
    let mut results: Vec<Option<Result<SweepRun>>> = Vec::new();
    results.resize_with(variants.len(), || None);
    let jobs: Vec<(usize, String, RunConfig)> = variants
        .into_iter()
        .enumerate()
        .map(|(i, (v, c))| (i, v, c))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (idx, value, cfg) = &jobs[i];
                let dir = out.join(format!("{param}_{value}"));
                let run = (|| -> Result<SweepRun> {
                    let (train_ds, eval_ds) = cfg.data.load::<f32>(&cfg.arch)?;
                    let mut model = Model32::build(cfg.arch.clone(), cfg.train.seed)?;
                    let stats = train(&mut model, &train_ds, &eval_ds, &cfg.train, Some(&dir), 0)?;
                    Ok((value.clone(), stats))
                })();
                slots.lock().unwrap()[*idx] = Some(run);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every sweep slot filled"))
        .collect()
}
