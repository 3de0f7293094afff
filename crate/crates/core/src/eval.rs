//! Corruption-robustness evaluation: per-corruption accuracy and reaction
//! time, aggregate means, ablation arms, and step-by-step trace export.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::baseline::BaselineCnn;
use crate::config::ModelConfig;
use crate::data::{CorruptionMap, IDENTITY_NAME};
use crate::error::{Error, Result};
use crate::global_loop::infer;
use crate::model::CapsuleModel;

#[derive(Debug, Clone, Default)]
pub struct EvalMeta {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone)]
pub struct CorruptionRow {
    pub name: String,
    pub accuracy: f64,
    pub mean_rt: f64,
    pub n: usize,
}

/// Per-corruption results plus the two aggregate means. The clean
/// `identity` row, when present, is excluded from both aggregates.
#[derive(Debug, Clone)]
pub struct CorruptionReport {
    pub rows: Vec<CorruptionRow>,
    pub mnist_c_mean: f64,
    pub mnist_c_shape_mean: f64,
    pub shape_members: Vec<String>,
    pub meta: EvalMeta,
}

fn unweighted_mean<'a>(names: impl Iterator<Item = &'a CorruptionRow>) -> f64 {
    let vals: Vec<f64> = names.map(|r| r.accuracy).collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

impl CorruptionReport {
    fn assemble(rows: Vec<CorruptionRow>, config: &ModelConfig, meta: EvalMeta) -> Self {
        let shape_members: Vec<String> = config
            .shape_subset
            .iter()
            .filter(|n| rows.iter().any(|r| &r.name == *n))
            .cloned()
            .collect();
        let mnist_c_mean = unweighted_mean(rows.iter().filter(|r| r.name != IDENTITY_NAME));
        let mnist_c_shape_mean =
            unweighted_mean(rows.iter().filter(|r| shape_members.contains(&r.name)));
        CorruptionReport {
            rows,
            mnist_c_mean,
            mnist_c_shape_mean,
            shape_members,
            meta,
        }
    }

    pub fn row(&self, name: &str) -> Option<&CorruptionRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Mean reaction time over all corruption rows (identity excluded).
    pub fn overall_mean_rt(&self) -> f64 {
        let rows: Vec<&CorruptionRow> = self
            .rows
            .iter()
            .filter(|r| r.name != IDENTITY_NAME)
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| r.mean_rt).sum::<f64>() / rows.len() as f64
    }

    /// Recomputes both aggregates from the rows and confirms they match.
    pub fn verify_aggregates(&self) -> Result<()> {
        let mean = unweighted_mean(self.rows.iter().filter(|r| r.name != IDENTITY_NAME));
        let shape =
            unweighted_mean(self.rows.iter().filter(|r| self.shape_members.contains(&r.name)));
        if (mean - self.mnist_c_mean).abs() > 1e-12 || (shape - self.mnist_c_shape_mean).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "report aggregates are inconsistent: stored ({}, {}), recomputed ({mean}, {shape})",
                self.mnist_c_mean, self.mnist_c_shape_mean
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "# seed={} config={} checkpoint={}\n",
            self.meta.seed, self.meta.config_hash, self.meta.checkpoint_id
        ));
        s.push_str("corruption,accuracy,mean_rt,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.4},{}\n", r.name, r.accuracy, r.mean_rt, r.n));
        }
        s.push_str(&format!("aggregate_mnist_c_mean,{:.6},,\n", self.mnist_c_mean));
        s.push_str(&format!(
            "aggregate_mnist_c_shape_mean,{:.6},,\n",
            self.mnist_c_shape_mean
        ));
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>9} {:>8} {:>7}\n",
            "corruption", "accuracy", "mean_rt", "n"
        ));
        s.push_str(&format!("{}\n", "-".repeat(43)));
        for r in &self.rows {
            let marker = if self.shape_members.contains(&r.name) {
                "*"
            } else {
                " "
            };
            s.push_str(&format!(
                "{:<15}{} {:>8.2}% {:>8.3} {:>7}\n",
                r.name,
                marker,
                r.accuracy * 100.0,
                r.mean_rt,
                r.n
            ));
        }
        s.push_str(&format!("{}\n", "-".repeat(43)));
        s.push_str(&format!(
            "{:<16} {:>8.2}%\n",
            "mnist_c_mean",
            self.mnist_c_mean * 100.0
        ));
        s.push_str(&format!(
            "{:<16} {:>8.2}%   (* = shape subset)\n",
            "shape_mean",
            self.mnist_c_shape_mean * 100.0
        ));
        s
    }

    /// Verifies aggregates, then writes `<stem>.csv` and `<stem>.txt`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        self.verify_aggregates()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.render_table())?;
        Ok(())
    }
}

/// Stable identifier for a checkpoint file: name plus a content hash prefix.
pub fn checkpoint_id(path: &Path) -> String {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    match std::fs::read(path) {
        Ok(bytes) => {
            let digest = Sha256::digest(&bytes);
            let hex: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
            format!("{name}@{hex}")
        }
        Err(_) => name,
    }
}

/// Runs iterative inference over every image of every corruption.
pub fn evaluate(
    model: &CapsuleModel,
    datasets: &CorruptionMap,
    config: &ModelConfig,
    meta: EvalMeta,
    limit: Option<usize>,
) -> Result<CorruptionReport> {
    if model.n_feature_caps() != config.n_feature_caps {
        return Err(Error::Config(format!(
            "checkpoint has {} feature capsules but the config expects {}",
            model.n_feature_caps(),
            config.n_feature_caps
        )));
    }
    let mut rows = Vec::new();
    for (name, ds) in datasets {
        let n = limit.map_or(ds.images.len(), |l| l.min(ds.images.len()));
        let results: Vec<(bool, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = ds.images.image(i);
                let (pred, trace) = infer(&img, model, config, false);
                (pred == ds.labels[i] as usize, trace.rt)
            })
            .collect();
        let correct = results.iter().filter(|(ok, _)| *ok).count();
        let rt_sum: usize = results.iter().map(|(_, rt)| rt).sum();
        rows.push(CorruptionRow {
            name: name.clone(),
            accuracy: correct as f64 / n.max(1) as f64,
            mean_rt: rt_sum as f64 / n.max(1) as f64,
            n,
        });
    }
    Ok(CorruptionReport::assemble(rows, config, meta))
}

/// Same report for a feed-forward baseline; reaction time is 1 by
/// construction.
pub fn evaluate_baseline(
    model: &BaselineCnn,
    datasets: &CorruptionMap,
    config: &ModelConfig,
    meta: EvalMeta,
    limit: Option<usize>,
) -> Result<CorruptionReport> {
    let mut rows = Vec::new();
    for (name, ds) in datasets {
        let n = limit.map_or(ds.images.len(), |l| l.min(ds.images.len()));
        let chunk = 256;
        let correct: usize = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                let mut nchw = ndarray::Array4::zeros((idxs.len(), 1, 28, 28));
                for (row, &i) in idxs.iter().enumerate() {
                    nchw.slice_mut(ndarray::s![row, 0, .., ..])
                        .assign(&ds.images.data().index_axis(ndarray::Axis(0), i));
                }
                let preds = model.predict(&nchw);
                preds
                    .iter()
                    .zip(idxs)
                    .filter(|(p, &i)| **p == ds.labels[i] as usize)
                    .count()
            })
            .sum();
        rows.push(CorruptionRow {
            name: name.clone(),
            accuracy: correct as f64 / n.max(1) as f64,
            mean_rt: 1.0,
            n,
        });
    }
    Ok(CorruptionReport::assemble(rows, config, meta))
}

pub const ABLATION_ARMS: [&str; 4] = ["full", "no_spatial_mask", "no_feature_binding", "neither"];

/// Evaluates the four attention-ablation arms by toggling the config flags
/// at inference time (no retraining).
pub fn run_ablation(
    model: &CapsuleModel,
    datasets: &CorruptionMap,
    config: &ModelConfig,
    meta: EvalMeta,
    limit: Option<usize>,
) -> Result<BTreeMap<String, CorruptionReport>> {
    let mut out = BTreeMap::new();
    for arm in ABLATION_ARMS {
        let mut cfg = config.clone();
        cfg.disable_spatial_mask = arm == "no_spatial_mask" || arm == "neither";
        cfg.disable_feature_binding = arm == "no_feature_binding" || arm == "neither";
        let report = evaluate(model, datasets, &cfg, meta.clone(), limit)?;
        out.insert(arm.to_string(), report);
    }
    Ok(out)
}

/// Re-evaluates under a sweep of entropy stopping thresholds.
pub fn sweep_entropy_thresholds(
    model: &CapsuleModel,
    datasets: &CorruptionMap,
    config: &ModelConfig,
    meta: EvalMeta,
    thresholds: &[f64],
    limit: Option<usize>,
) -> Result<Vec<(f64, CorruptionReport)>> {
    let mut out = Vec::new();
    for &eta in thresholds {
        let mut cfg = config.clone();
        cfg.entropy_threshold = eta;
        out.push((eta, evaluate(model, datasets, &cfg, meta.clone(), limit)?));
    }
    Ok(out)
}

/// Writes one image as a binary PGM (maxval 255).
pub fn write_pgm(path: &Path, image: &Array2<f32>) -> Result<()> {
    let (h, w) = image.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs one fully-captured inference and writes, per global step, the
/// reconstruction / mask / masked-input images plus per-iteration routing
/// matrices and score vectors. Enough to re-plot the attention process
/// offline.
pub fn export_trace(
    model: &CapsuleModel,
    image: &Array2<f32>,
    config: &ModelConfig,
    out_dir: &Path,
) -> Result<usize> {
    let (prediction, trace) = infer(image, model, config, true);
    std::fs::create_dir_all(out_dir)?;
    write_pgm(&out_dir.join("input.pgm"), image)?;
    for (t, step) in trace.steps.iter().enumerate() {
        let dir = out_dir.join(format!("step_{:02}", t + 1));
        std::fs::create_dir_all(&dir)?;
        write_pgm(&dir.join("reconstruction.pgm"), &step.reconstruction)?;
        let mask_img = step.mask.mapv(|m| if m { 1.0f32 } else { 0.0 });
        write_pgm(&dir.join("mask.pgm"), &mask_img)?;
        write_pgm(&dir.join("masked_input.pgm"), &step.masked_input)?;
        let mut class_rows = Array2::zeros((step.routing_snapshots.len(), 10));
        let mut recon_rows = Array2::zeros((step.routing_snapshots.len(), 10));
        for (k, snap) in step.routing_snapshots.iter().enumerate() {
            write_matrix_csv(&dir.join(format!("routing_iter_{k}.csv")), &snap.state.c)?;
            class_rows.row_mut(k).assign(&snap.class_scores);
            recon_rows.row_mut(k).assign(&snap.recon_scores);
        }
        write_matrix_csv(&dir.join("class_scores.csv"), &class_rows)?;
        write_matrix_csv(&dir.join("recon_scores.csv"), &recon_rows)?;
        std::fs::write(
            dir.join("entropy.txt"),
            format!("{}\n", step.entropy),
        )?;
    }
    std::fs::write(
        out_dir.join("summary.txt"),
        format!("prediction {prediction}\nrt {}\n", trace.rt),
    )?;
    Ok(trace.rt)
}
