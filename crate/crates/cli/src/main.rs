//! Command-line driver: training, corruption-robustness evaluation,
//! attention ablations, step-trace export, and the reconstruction-target
//! frequency comparison.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use recon_attn::baseline::{train_baseline, BaselineCnn};
use recon_attn::config::{ModelConfig, ReconTargetMode};
use recon_attn::data::{load_mnist, load_mnist_c, CorruptionMap, Manifest, IDENTITY_NAME};
use recon_attn::eval::{
    checkpoint_id, evaluate, evaluate_baseline, export_trace, run_ablation,
    sweep_entropy_thresholds, CorruptionReport, EvalMeta,
};
use recon_attn::model::CapsuleModel;
use recon_attn::training::{eval_accuracy_single_step, train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "recon-attn",
    about = "Reconstruction-guided attention network: train, evaluate, ablate, trace",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Cap images per corruption (smoke runs).
    #[arg(long)]
    limit: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train capsule models on clean MNIST (one checkpoint per seed).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// First training seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds (overrides the config's `seeds`).
        #[arg(long)]
        seeds: Option<usize>,
        /// Hard epoch cap.
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
        /// Train on only the first N images (smoke runs).
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Train plain-CNN baselines with the same schedule.
    TrainBaseline {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Evaluate checkpoints over the corruption benchmark.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoints to evaluate (multi-seed runs aggregate mean and SD).
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Evaluate baseline-CNN checkpoints instead of capsule models.
        #[arg(long)]
        baseline: bool,
        /// Comma-separated entropy thresholds to sweep (capsule models).
        #[arg(long)]
        sweep_thresholds: Option<String>,
    },
    /// Evaluate the four attention-ablation arms of one checkpoint.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export per-step reconstructions, masks and routing matrices for one image.
    Trace {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corruption to draw the image from; omit for the clean test set.
        #[arg(long)]
        corruption: Option<String>,
        /// Image index within the chosen set.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train and evaluate one model per reconstruction-target band
    /// (full-spectrum, low, high) and compare.
    FreqEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
        #[arg(long)]
        train_limit: Option<usize>,
    },
}

fn load_config(common: &CommonArgs) -> Result<ModelConfig> {
    let mut cfg = match &common.config {
        Some(path) => ModelConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ModelConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn mnist_dir(cfg: &ModelConfig) -> PathBuf {
    Path::new(&cfg.effective_data_root()).join("mnist")
}

fn mnist_c_dir(cfg: &ModelConfig) -> PathBuf {
    Path::new(&cfg.effective_data_root()).join("mnist_c")
}

fn load_corruptions(cfg: &ModelConfig) -> Result<CorruptionMap> {
    let root = mnist_c_dir(cfg);
    let manifest = Manifest::load_or_default(&root);
    let (map, warnings) = load_mnist_c(&root, &manifest)
        .with_context(|| format!("loading corruption sets from {}", root.display()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if map.is_empty() {
        bail!(
            "no corruption sets found under {} (expected one directory per corruption \
             with test_images.npy / test_labels.npy)",
            root.display()
        );
    }
    Ok(map)
}

fn report_summary(label: &str, report: &CorruptionReport) {
    println!("== {label} ==");
    print!("{}", report.render_table());
    println!(
        "overall mean RT {:.3}  (fog RT {})",
        report.overall_mean_rt(),
        report
            .row("fog")
            .map_or("n/a".to_string(), |r| format!("{:.3}", r.mean_rt))
    );
    println!();
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(
    common: &CommonArgs,
    seed: u64,
    seeds: Option<usize>,
    max_epochs: usize,
    train_limit: Option<usize>,
    baseline: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let data = load_mnist(&mnist_dir(&cfg))
        .with_context(|| format!("loading IDX files from {}", mnist_dir(&cfg).display()))?;
    let (mut images, mut labels) = (data.train.images, data.train.labels);
    if let Some(limit) = train_limit {
        images = images.take_prefix(limit);
        labels.truncate(images.len());
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.save(&out_dir.join("config.used"))?;
    let n_seeds = seeds.unwrap_or(cfg.seeds);
    let opts = TrainOptions {
        max_epochs,
        verbose: !common.quiet,
    };
    for k in 0..n_seeds {
        let run_seed = seed + k as u64;
        let started = std::time::Instant::now();
        let (stem, log, clean_acc) = if baseline {
            let (model, log) = train_baseline(&images, &labels, &cfg, run_seed, &opts)?;
            let stem = format!("baseline_{}_seed{run_seed}", cfg.encoder_kind);
            model.save_checkpoint(&out_dir.join(format!("{stem}.ckpt")))?;
            let acc = {
                let test = &data.test;
                let preds: usize = {
                    let nchw = recon_attn::encoder::batch_to_nchw(&test.images);
                    model
                        .predict(&nchw)
                        .iter()
                        .zip(&test.labels)
                        .filter(|(p, &l)| **p == l as usize)
                        .count()
                };
                preds as f64 / test.labels.len() as f64
            };
            (stem, log, acc)
        } else {
            let (model, log) = train(&images, &labels, &cfg, run_seed, &opts)?;
            let stem = format!(
                "caps_{}_{}_seed{run_seed}",
                cfg.encoder_kind, cfg.recon_target_mode
            );
            model.save_checkpoint(&out_dir.join(format!("{stem}.ckpt")))?;
            let acc = eval_accuracy_single_step(&model, &data.test.images, &data.test.labels, &cfg);
            (stem, log, acc)
        };
        std::fs::write(out_dir.join(format!("{stem}.train_log.csv")), log.to_csv())?;
        println!(
            "seed {run_seed}: best val acc {:.4} (epoch {}), clean test acc {:.4}, \
             {} epochs in {:.1}s -> {}.ckpt",
            log.best_val_accuracy,
            log.best_epoch,
            clean_acc,
            log.rows.len(),
            started.elapsed().as_secs_f64(),
            stem
        );
    }
    Ok(())
}

fn cmd_eval(
    common: &CommonArgs,
    checkpoints: &[PathBuf],
    baseline: bool,
    sweep: Option<String>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let datasets = load_corruptions(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut means = Vec::new();
    let mut shape_means = Vec::new();
    for path in checkpoints {
        let meta = EvalMeta {
            seed: 0,
            config_hash: cfg.hash(),
            checkpoint_id: checkpoint_id(path),
        };
        let started = std::time::Instant::now();
        let report = if baseline {
            let mut model = BaselineCnn::new(&cfg, 0);
            model
                .load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?;
            evaluate_baseline(&model, &datasets, &cfg, meta, common.limit)?
        } else {
            let mut model = CapsuleModel::new(&cfg, 0);
            model
                .load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?;
            let report = evaluate(&model, &datasets, &cfg, meta, common.limit)?;
            if let Some(spec) = &sweep {
                let thresholds: Vec<f64> = spec
                    .split(',')
                    .map(|t| t.trim().parse::<f64>().context("parsing threshold"))
                    .collect::<Result<_>>()?;
                let swept =
                    sweep_entropy_thresholds(&model, &datasets, &cfg, EvalMeta::default(), &thresholds, common.limit)?;
                println!("entropy-threshold sweep:");
                for (eta, rep) in &swept {
                    println!(
                        "  eta {eta:.3}: mnist_c {:.4}  shape {:.4}  mean_rt {:.3}",
                        rep.mnist_c_mean,
                        rep.mnist_c_shape_mean,
                        rep.overall_mean_rt()
                    );
                }
            }
            report
        };
        let stem = format!("report_{}", report.meta.checkpoint_id.replace('@', "_"));
        report.write_files(&out_dir, &stem)?;
        println!(
            "evaluated {} in {:.1}s -> {}/{stem}.csv",
            path.display(),
            started.elapsed().as_secs_f64(),
            out_dir.display()
        );
        report_summary(&report.meta.checkpoint_id.clone(), &report);
        if let Some(row) = report.row(IDENTITY_NAME) {
            println!("identity (clean) accuracy: {:.4}", row.accuracy);
        }
        means.push(report.mnist_c_mean);
        shape_means.push(report.mnist_c_shape_mean);
    }
    if checkpoints.len() > 1 {
        let (m, sd) = mean_sd(&means);
        let (ms, sds) = mean_sd(&shape_means);
        println!(
            "across {} checkpoints: mnist_c {:.4} (SD {:.4}), shape {:.4} (SD {:.4})",
            checkpoints.len(),
            m,
            sd,
            ms,
            sds
        );
    }
    Ok(())
}

fn cmd_ablate(common: &CommonArgs, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let datasets = load_corruptions(&cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut model = CapsuleModel::new(&cfg, 0);
    model
        .load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let meta = EvalMeta {
        seed: 0,
        config_hash: cfg.hash(),
        checkpoint_id: checkpoint_id(checkpoint),
    };
    let arms = run_ablation(&model, &datasets, &cfg, meta, common.limit)?;
    for (arm, report) in &arms {
        report.write_files(&out_dir, &format!("ablation_{arm}"))?;
        report_summary(arm, report);
    }
    let full = &arms["full"];
    let no_mask = &arms["no_spatial_mask"];
    let no_bind = &arms["no_feature_binding"];
    println!(
        "spatial-mask removal: shape accuracy {:.4} -> {:.4} (delta {:+.4})",
        full.mnist_c_shape_mean,
        no_mask.mnist_c_shape_mean,
        no_mask.mnist_c_shape_mean - full.mnist_c_shape_mean
    );
    println!(
        "feature-binding removal: mean RT {:.3} -> {:.3}",
        full.overall_mean_rt(),
        no_bind.overall_mean_rt()
    );
    Ok(())
}

fn cmd_trace(
    common: &CommonArgs,
    checkpoint: &Path,
    corruption: Option<String>,
    index: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    let mut model = CapsuleModel::new(&cfg, 0);
    model
        .load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let (image, label, source) = match corruption {
        Some(name) => {
            let datasets = load_corruptions(&cfg)?;
            let ds = datasets
                .get(&name)
                .with_context(|| format!("corruption '{name}' not loaded"))?;
            if index >= ds.images.len() {
                bail!("index {index} out of range ({} images)", ds.images.len());
            }
            (ds.images.image(index), ds.labels[index], name)
        }
        None => {
            let data = load_mnist(&mnist_dir(&cfg))?;
            if index >= data.test.images.len() {
                bail!("index {index} out of range");
            }
            (
                data.test.images.image(index),
                data.test.labels[index],
                "clean".to_string(),
            )
        }
    };
    let out = PathBuf::from(&cfg.out_dir).join(format!("trace_{source}_{index}"));
    let rt = export_trace(&model, &image, &cfg, &out)?;
    println!(
        "trace for {source}[{index}] (label {label}): rt {rt}, written to {}",
        out.display()
    );
    Ok(())
}

fn cmd_freq_eval(
    common: &CommonArgs,
    seed: u64,
    max_epochs: usize,
    train_limit: Option<usize>,
) -> Result<()> {
    let base_cfg = load_config(common)?;
    let data = load_mnist(&mnist_dir(&base_cfg))?;
    let (mut images, mut labels) = (data.train.images, data.train.labels);
    if let Some(limit) = train_limit {
        images = images.take_prefix(limit);
        labels.truncate(images.len());
    }
    let datasets = load_corruptions(&base_cfg)?;
    let out_dir = PathBuf::from(&base_cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let opts = TrainOptions {
        max_epochs,
        verbose: !common.quiet,
    };
    let mut results = Vec::new();
    for mode in [
        ReconTargetMode::FullSpectrum,
        ReconTargetMode::LowFreq,
        ReconTargetMode::HighFreq,
    ] {
        let mut cfg = base_cfg.clone();
        cfg.recon_target_mode = mode;
        println!("training reconstruction-target mode {mode} ...");
        let (model, log) = train(&images, &labels, &cfg, seed, &opts)?;
        let stem = format!("caps_{}_{}_seed{seed}", cfg.encoder_kind, mode);
        let ckpt = out_dir.join(format!("{stem}.ckpt"));
        model.save_checkpoint(&ckpt)?;
        std::fs::write(out_dir.join(format!("{stem}.train_log.csv")), log.to_csv())?;
        let meta = EvalMeta {
            seed,
            config_hash: cfg.hash(),
            checkpoint_id: checkpoint_id(&ckpt),
        };
        let report = evaluate(&model, &datasets, &cfg, meta, common.limit)?;
        report.write_files(&out_dir, &format!("freq_{mode}"))?;
        report_summary(&format!("recon target {mode}"), &report);
        results.push((mode, report));
    }
    println!("{:<16} {:>10} {:>10}", "target band", "mnist_c", "shape");
    for (mode, report) in &results {
        println!(
            "{:<16} {:>9.2}% {:>9.2}%",
            mode.to_string(),
            report.mnist_c_mean * 100.0,
            report.mnist_c_shape_mean * 100.0
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            seed,
            seeds,
            max_epochs,
            train_limit,
        } => cmd_train(&common, seed, seeds, max_epochs, train_limit, false),
        Command::TrainBaseline {
            common,
            seed,
            seeds,
            max_epochs,
            train_limit,
        } => cmd_train(&common, seed, seeds, max_epochs, train_limit, true),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            sweep_thresholds,
        } => cmd_eval(&common, &checkpoint, baseline, sweep_thresholds),
        Command::Ablate { common, checkpoint } => cmd_ablate(&common, &checkpoint),
        Command::Trace {
            common,
            checkpoint,
            corruption,
            index,
        } => cmd_trace(&common, &checkpoint, corruption, index),
        Command::FreqEval {
            common,
            seed,
            max_epochs,
            train_limit,
        } => cmd_freq_eval(&common, seed, max_epochs, train_limit),
    }
}
