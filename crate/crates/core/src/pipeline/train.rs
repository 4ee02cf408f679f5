//! Training: seeded shuffling, batch-mean gradients through the tape,
//! SGD with momentum, per-epoch loss rows, and periodic checkpoints.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DiffArray, Tape, Tensor};
use crate::hash::derive_seed;
use crate::kernels::{
    degrade, sample_dynamic_kernel, DegradationSpec, KernelBank, MAX_NOISE_SIGMA,
};
use crate::losses::{
    lift_image, loss_negative, loss_similarity, loss_total, LossReport, LossWeights,
};
use crate::network::{
    fuse_manual, save_checkpoint, CheckpointMeta, KernelProjector, NetworkParams,
    StagedNetwork,
};
use crate::pipeline::config::{LossTerms, TrainConfig};
use crate::pipeline::dataset::{Dataset, SamplePair};
use crate::raster::Image;
use crate::{Error, Result};

/// Kernel draws used to fit the PCA projector.
const PROJECTOR_SAMPLES: usize = 2000;
/// A checkpoint is written after every multiple of this many epochs.
pub const CHECKPOINT_EVERY: usize = 10;

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    /// Mean per-sample loss terms for each epoch, in order.
    pub epoch_reports: Vec<LossReport>,
}

/// Degraded inputs are pre-upsampled back to crop size at scale 2.
fn scaled_input(degraded: &Image, scale: u32) -> Image {
    if scale == 2 {
        degraded.upsample_x2()
    } else {
        degraded.clone()
    }
}

/// Draws the three per-step negatives: degraded clean sources and a
/// degraded, gradient-detached copy of the current fusion. Negatives stay
/// at scale 1 so they share the fused image's dimensions.
fn fresh_negatives(
    bank: &KernelBank,
    clean_v: &Image,
    clean_i: &Image,
    fused: &Image,
    rng: &mut ChaCha8Rng,
) -> Result<[Image; 3]> {
    let mut one = |image: &Image, model_index: u8| -> Result<Image> {
        let spec = DegradationSpec {
            kernel: sample_dynamic_kernel(bank, rng),
            scale: 1,
            noise_sigma: rng.random_range(0.0..=MAX_NOISE_SIGMA),
            model_index,
        };
        degrade(image, &spec, rng)
    };
    Ok([one(clean_v, 1)?, one(clean_i, 2)?, one(fused, 3)?])
}

/// Builds one sample's loss on the tape and reports its term values.
fn sample_objective(
    tape: &Tape,
    staged: &StagedNetwork,
    bank: &KernelBank,
    config: &TrainConfig,
    sample: &SamplePair,
    neg_rng: &mut ChaCha8Rng,
) -> Result<(DiffArray, LossReport)> {
    let input_v = scaled_input(&sample.degraded_v, config.scale);
    let input_i = scaled_input(&sample.degraded_i, config.scale);
    let out = staged.forward(
        tape,
        &input_v,
        &input_i,
        &sample.spec_v.kernel,
        &sample.spec_i.kernel,
    )?;
    let clean_v = lift_image(tape, &sample.clean_v);
    let clean_i = lift_image(tape, &sample.clean_i);
    let similarity = loss_similarity(
        tape,
        &[
            (out.restored_v.clone(), clean_v.clone()),
            (out.restored_i.clone(), clean_i.clone()),
            (out.fused.clone(), clean_v),
            (out.fused.clone(), clean_i),
        ],
    )?;
    if config.loss_terms == LossTerms::SimilarityOnly {
        let report = LossReport {
            similarity: similarity.item(),
            negative: 0.0,
            positive: 0.0,
            total: similarity.item(),
            weights: LossWeights::default(),
        };
        return Ok((similarity, report));
    }

    let fused_img = Image::new(
        sample.clean_v.h(),
        sample.clean_v.w(),
        out.fused.values().to_vec(),
    )?;
    let negatives =
        fresh_negatives(bank, &sample.clean_v, &sample.clean_i, &fused_img, neg_rng)?;
    let neg_terms: Vec<DiffArray> = negatives
        .iter()
        .map(|n| {
            let lifted = lift_image(tape, n);
            loss_negative(tape, &out.fused, std::slice::from_ref(&lifted), config.eq8_literal)
        })
        .collect::<Result<_>>()?;

    let reference = fuse_manual(&sample.clean_v, &sample.clean_i)?;
    let positive =
        crate::losses::loss_positive(tape, &out.fused, &lift_image(tape, &reference))?;
    let (total, report) =
        loss_total(tape, &neg_terms, &similarity, &positive, LossWeights::default());
    Ok((total, report))
}

/// Trains on every sample of `dataset`, writing `loss.csv`, periodic
/// `checkpoint-{epoch}.ckpt` files, and the final `checkpoint.ckpt` under
/// `out_dir`. Fully deterministic in `(dataset, config)`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset".to_string()));
    }
    if dataset.scale != config.scale {
        return Err(Error::arg(format!(
            "dataset was synthesized at scale {} but config requests scale {}",
            dataset.scale, config.scale
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let bank = KernelBank::build(dataset.bank_seed);
    let net_cfg = config.network_config();
    let projector = KernelProjector::fit(
        &bank,
        PROJECTOR_SAMPLES,
        net_cfg.pca_dims,
        derive_seed(config.seed, "projector", &[]),
    )?;
    let mut params =
        NetworkParams::init(net_cfg, projector, derive_seed(config.seed, "init", &[]))?;
    let meta = CheckpointMeta {
        seed: config.seed,
        bank_seed: dataset.bank_seed,
        scale: config.scale,
    };

    let loss_csv_path = out_dir.join("loss.csv");
    let csv_file =
        std::fs::File::create(&loss_csv_path).map_err(|e| Error::io(&loss_csv_path, e))?;
    let mut csv = BufWriter::new(csv_file);
    let csv_io = |e| Error::io(&loss_csv_path, e);
    writeln!(csv, "epoch,similarity,negative,positive,total").map_err(csv_io)?;

    let n = dataset.samples.len();
    let mut velocities: Option<Vec<Vec<f64>>> = None;
    let mut last_finite: Option<f64> = None;
    let mut epoch_reports = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "shuffle",
            &[epoch as u64],
        )));
        let mut sums = [0.0f64; 4];
        for (batch_idx, batch) in order.chunks(config.batchsize).enumerate() {
            let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                "negatives",
                &[epoch as u64, batch_idx as u64],
            ));
            let grad_tensors: Vec<Tensor> = {
                let tape = Tape::new();
                let staged = params.stage(&tape);
                let leaves = staged.leaves();
                let mut terms = Vec::with_capacity(batch.len());
                for &idx in batch {
                    let (term, report) = sample_objective(
                        &tape,
                        &staged,
                        &bank,
                        config,
                        &dataset.samples[idx],
                        &mut neg_rng,
                    )?;
                    if !report.total.is_finite() {
                        let last = last_finite
                            .map(|v| v.to_string())
                            .unwrap_or_else(|| "none".to_string());
                        return Err(Error::data(format!(
                            "loss became non-finite at epoch {epoch} batch {batch_idx}; \
                             last finite total was {last}"
                        )));
                    }
                    last_finite = Some(report.total);
                    sums[0] += report.similarity;
                    sums[1] += report.negative;
                    sums[2] += report.positive;
                    sums[3] += report.total;
                    terms.push(term);
                }
                let mut acc = terms[0].clone();
                for t in &terms[1..] {
                    acc = tape.add(&acc, t)?;
                }
                let batch_loss = tape.scalar_mul(&acc, 1.0 / terms.len() as f64);
                let grads = tape.backward(&batch_loss)?;
                leaves.iter().map(|l| grads.wrt(l)).collect()
            };

            let vels = velocities.get_or_insert_with(|| {
                grad_tensors.iter().map(|g| vec![0.0; g.data.len()]).collect()
            });
            let mut trainables = params.trainable_mut();
            debug_assert_eq!(trainables.len(), grad_tensors.len());
            for ((t, g), v) in trainables.iter_mut().zip(&grad_tensors).zip(vels.iter_mut()) {
                for ((p, &gi), vi) in t.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                    *vi = config.momentum * *vi + gi;
                    *p -= config.lr * *vi;
                }
            }
        }

        let report = LossReport {
            similarity: sums[0] / n as f64,
            negative: sums[1] / n as f64,
            positive: sums[2] / n as f64,
            total: sums[3] / n as f64,
            weights: LossWeights::default(),
        };
        writeln!(
            csv,
            "{epoch},{},{},{},{}",
            report.similarity, report.negative, report.positive, report.total
        )
        .map_err(csv_io)?;
        csv.flush().map_err(csv_io)?;
        epoch_reports.push(report);

        if epoch % CHECKPOINT_EVERY == 0 && epoch < config.epochs {
            let path = out_dir.join(format!("checkpoint-{epoch}.ckpt"));
            save_checkpoint(&path, &params, &meta)?;
        }
    }

    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&checkpoint_path, &params, &meta)?;
    Ok(TrainSummary {
        checkpoint_path,
        loss_csv_path,
        epoch_reports,
    })
}
