//! Paired-variant experiments: train two configurations on the same
//! train split and compare metric means on a held-out split.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::metrics::{evaluate_pair, psnr, MetricReport};
use crate::network::load_checkpoint;
use crate::pipeline::config::{LossTerms, TrainConfig};
use crate::pipeline::dataset::{dataset_file_hash, Dataset, SamplePair};
use crate::pipeline::infer::fuse_images;
use crate::pipeline::train::train;
use crate::raster::Image;
use crate::{Error, Result};

pub const ABLATION_NAMES: [&str; 3] = ["static-vs-dynamic", "eq8-sign", "loss-terms"];

/// Held-out split size: a fifth of the dataset, clamped to [2, 32].
fn holdout_count(n: usize) -> usize {
    (n / 5).clamp(2, 32)
}

/// Metric means over the held-out split for one trained variant.
#[derive(Clone, Copy, Debug)]
pub struct VariantStats {
    pub report: MetricReport,
    /// Mean PSNR of restored outputs against the clean crops.
    pub restored_psnr: f64,
    /// Mean PSNR of the (pre-upsampled) degraded inputs, the baseline the
    /// restoration must beat.
    pub degraded_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub csv_path: PathBuf,
    pub variants: Vec<(String, VariantStats)>,
}

fn variant_configs(name: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let mk = |label: &str, cfg: TrainConfig| (label.to_string(), cfg);
    match name {
        "static-vs-dynamic" => Ok(vec![
            mk("static", TrainConfig {
                branch_kind: crate::network::BranchKind::Static,
                ..base.clone()
            }),
            mk("dynamic", TrainConfig {
                branch_kind: crate::network::BranchKind::Dynamic,
                ..base.clone()
            }),
        ]),
        "eq8-sign" => Ok(vec![
            mk("eq8-prose", TrainConfig { eq8_literal: false, ..base.clone() }),
            mk("eq8-literal", TrainConfig { eq8_literal: true, ..base.clone() }),
        ]),
        "loss-terms" => Ok(vec![
            mk("similarity-only", TrainConfig {
                loss_terms: LossTerms::SimilarityOnly,
                ..base.clone()
            }),
            mk("full", TrainConfig { loss_terms: LossTerms::Full, ..base.clone() }),
        ]),
        other => Err(Error::arg(format!(
            "unknown ablation {other:?}; valid names: {}",
            ABLATION_NAMES.join(", ")
        ))),
    }
}

fn upsampled(degraded: &Image, scale: u32) -> Image {
    if scale == 2 {
        degraded.upsample_x2()
    } else {
        degraded.clone()
    }
}

/// Fuses every held-out sample from its degraded inputs and averages the
/// metric report plus restored/degraded PSNR baselines.
pub fn evaluate_holdout(
    params: &crate::network::NetworkParams,
    meta: &crate::network::CheckpointMeta,
    samples: &[SamplePair],
    scale: u32,
) -> Result<VariantStats> {
    if samples.is_empty() {
        return Err(Error::arg("held-out split is empty".to_string()));
    }
    let mut sums = [0.0f64; 7];
    let mut restored_sum = 0.0;
    let mut degraded_sum = 0.0;
    let mut truncated = false;
    for s in samples {
        // fuse_images upsamples scale-2 inputs itself; these copies only
        // feed the degraded-input PSNR baseline.
        let input_v = upsampled(&s.degraded_v, scale);
        let input_i = upsampled(&s.degraded_i, scale);
        let out = fuse_images(params, meta, &s.degraded_v, &s.degraded_i, Some(&s.spec_v), Some(&s.spec_i))?;
        let report = evaluate_pair(&s.clean_v, &s.clean_i, &out.fused)?;
        sums[0] += report.en;
        sums[1] += report.ag;
        sums[2] += report.ssim;
        sums[3] += report.vif;
        sums[4] += report.psnr;
        sums[5] += report.mean;
        truncated |= report.vif_truncated;
        restored_sum += (psnr(&out.restored_v, &s.clean_v)? + psnr(&out.restored_i, &s.clean_i)?) / 2.0;
        degraded_sum += (psnr(&input_v, &s.clean_v)? + psnr(&input_i, &s.clean_i)?) / 2.0;
    }
    let n = samples.len() as f64;
    Ok(VariantStats {
        report: MetricReport {
            en: sums[0] / n,
            ag: sums[1] / n,
            ssim: sums[2] / n,
            vif: sums[3] / n,
            psnr: sums[4] / n,
            mean: sums[5] / n,
            vif_truncated: truncated,
        },
        restored_psnr: restored_sum / n,
        degraded_psnr: degraded_sum / n,
    })
}

/// Trains every variant of the named ablation on the leading split of the
/// dataset and writes a long-format comparison CSV.
pub fn run_ablation(
    name: &str,
    dataset: &Dataset,
    dataset_path: &Path,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationOutcome> {
    let variants = variant_configs(name, config)?;
    let n = dataset.samples.len();
    if n < 5 {
        return Err(Error::arg(format!(
            "ablation needs at least 5 samples for a train/holdout split, got {n}"
        )));
    }
    let holdout = holdout_count(n);
    let train_ds = Dataset {
        samples: dataset.samples[..n - holdout].to_vec(),
        ..dataset.clone()
    };
    let eval_samples = &dataset.samples[n - holdout..];
    let hash = dataset_file_hash(dataset_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut results = Vec::with_capacity(variants.len());
    for (label, cfg) in &variants {
        let run_dir = out_dir.join(format!("variant-{label}"));
        let summary = train(&train_ds, cfg, &run_dir)?;
        let (params, meta) = load_checkpoint(&summary.checkpoint_path)?;
        let stats = evaluate_holdout(&params, &meta, eval_samples, dataset.scale)?;
        results.push((label.clone(), stats));
    }

    let csv_path = out_dir.join(format!("ablation-{name}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&csv_path, e);
    writeln!(w, "# ablation = {name}").map_err(io)?;
    writeln!(w, "# dataset = {}", dataset_path.display()).map_err(io)?;
    for (label, _) in &results {
        writeln!(w, "# dataset-fnv1a64.{label} = {hash:016x}").map_err(io)?;
    }
    writeln!(w, "# seed = {}", config.seed).map_err(io)?;
    writeln!(w, "# train-samples = {}", n - holdout).map_err(io)?;
    writeln!(w, "# eval-samples = {holdout}").map_err(io)?;
    writeln!(w, "variant,metric,value").map_err(io)?;
    for (label, s) in &results {
        let rows = [
            ("en", s.report.en),
            ("ag", s.report.ag),
            ("ssim", s.report.ssim),
            ("vif", s.report.vif),
            ("psnr", s.report.psnr),
            ("mean", s.report.mean),
            ("restored-psnr", s.restored_psnr),
            ("degraded-psnr", s.degraded_psnr),
        ];
        for (metric, value) in rows {
            writeln!(w, "{label},{metric},{value}").map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(AblationOutcome {
        csv_path,
        variants: results,
    })
}
