//! End-to-end pipeline behavior: dataset round trips, short training runs,
//! checkpoint artifacts, inference plumbing, and ablation wiring.

use std::fs;

use ddrf_core::network::load_checkpoint;
use ddrf_core::pipeline::{
    fuse_images, fuse_to_files, load_dataset, run_ablation, save_dataset, synth_dataset, train,
    TrainConfig, ABLATION_NAMES,
};
use ddrf_core::raster::{load_png, save_png};
use ddrf_core::synthetic::write_scene_dir;
use tempfile::tempdir;

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batchsize: 4,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Training artifacts
// ---------------------------------------------------------------------------

#[test]
fn short_training_run_writes_the_expected_artifacts() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 1).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 5).unwrap();
    let out = dir.path().join("run");
    let summary = train(&ds, &config, &out).unwrap();

    assert!(summary.checkpoint_path.exists());
    assert_eq!(summary.epoch_reports.len(), 2);
    let csv = fs::read_to_string(&summary.loss_csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,similarity,negative,positive,total"));
    assert_eq!(lines.count(), 2);
    for report in &summary.epoch_reports {
        assert!(report.total.is_finite());
        assert!(report.similarity > 0.0);
    }

    let (params, meta) = load_checkpoint(&summary.checkpoint_path).unwrap();
    assert_eq!(meta.seed, config.seed);
    assert_eq!(meta.bank_seed, ds.bank_seed);
    assert_eq!(meta.scale, 1);
    assert_eq!(params.config.candidates, config.candidates);
}

#[test]
fn training_is_deterministic_across_runs() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 2).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 6).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let sum_a = train(&ds, &config, &out_a).unwrap();
    let sum_b = train(&ds, &config, &out_b).unwrap();

    assert_eq!(
        fs::read(&sum_a.checkpoint_path).unwrap(),
        fs::read(&sum_b.checkpoint_path).unwrap()
    );
    assert_eq!(
        fs::read_to_string(&sum_a.loss_csv_path).unwrap(),
        fs::read_to_string(&sum_b.loss_csv_path).unwrap()
    );
}

#[test]
fn checkpoint_reload_then_resave_is_byte_identical() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 3).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 7).unwrap();
    let summary = train(&ds, &config, dir.path().join("run").as_path()).unwrap();

    let (params, meta) = load_checkpoint(&summary.checkpoint_path).unwrap();
    let resaved = dir.path().join("resaved.ckpt");
    ddrf_core::network::save_checkpoint(&resaved, &params, &meta).unwrap();
    assert_eq!(
        fs::read(&summary.checkpoint_path).unwrap(),
        fs::read(&resaved).unwrap()
    );
}

#[test]
fn intermediate_checkpoints_appear_every_tenth_epoch() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 4).unwrap();
    let config = TrainConfig {
        epochs: 11,
        batchsize: 8,
        ..TrainConfig::default()
    };
    let ds = synth_dataset(&scenes, 8, &config, 8).unwrap();
    let out = dir.path().join("run");
    train(&ds, &config, &out).unwrap();
    assert!(out.join("checkpoint-10.ckpt").exists());
    assert!(out.join("checkpoint.ckpt").exists());
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[test]
fn dataset_survives_a_save_load_cycle_and_trains_identically() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 5).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 9).unwrap();
    let path = dir.path().join("ds.bin");
    save_dataset(&path, &ds).unwrap();
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded, ds);

    let sum_a = train(&ds, &config, dir.path().join("a").as_path()).unwrap();
    let sum_b = train(&loaded, &config, dir.path().join("b").as_path()).unwrap();
    assert_eq!(
        fs::read(&sum_a.checkpoint_path).unwrap(),
        fs::read(&sum_b.checkpoint_path).unwrap()
    );
}

// ---------------------------------------------------------------------------
// Scale-2 path
// ---------------------------------------------------------------------------

#[test]
fn scale_two_datasets_train_and_fuse_at_the_right_sizes() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 6).unwrap();
    let config = TrainConfig {
        scale: 2,
        ..quick_config()
    };
    let ds = synth_dataset(&scenes, 8, &config, 10).unwrap();
    assert_eq!(ds.degraded_size(), 16);
    for s in &ds.samples {
        assert_eq!(s.degraded_v.h(), 16);
        assert_eq!(s.clean_v.h(), 32);
    }
    let summary = train(&ds, &config, dir.path().join("run").as_path()).unwrap();
    let (params, meta) = load_checkpoint(&summary.checkpoint_path).unwrap();
    assert_eq!(meta.scale, 2);
    let s = &ds.samples[0];
    let outs = fuse_images(
        &params,
        &meta,
        &s.degraded_v,
        &s.degraded_i,
        Some(&s.spec_v),
        Some(&s.spec_i),
    )
    .unwrap();
    assert_eq!((outs.fused.h(), outs.fused.w()), (32, 32));
    assert_eq!(outs.restored_v.h(), 32);
}

#[test]
fn scale_mismatch_between_dataset_and_config_is_rejected() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 7).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 11).unwrap();
    let bad = TrainConfig {
        scale: 2,
        ..quick_config()
    };
    let err = train(&ds, &bad, dir.path().join("run").as_path())
        .unwrap_err()
        .to_string();
    assert!(err.contains("scale"), "unexpected message: {err}");
}

// ---------------------------------------------------------------------------
// Inference plumbing
// ---------------------------------------------------------------------------

#[test]
fn fuse_to_files_writes_quantized_copies_of_the_in_memory_outputs() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 8).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 12).unwrap();
    let summary = train(&ds, &config, dir.path().join("run").as_path()).unwrap();

    let s = &ds.samples[0];
    let img_v = dir.path().join("v.png");
    let img_i = dir.path().join("i.png");
    save_png(&img_v, &s.degraded_v).unwrap();
    save_png(&img_i, &s.degraded_i).unwrap();

    let out = dir.path().join("fused");
    let paths = fuse_to_files(&summary.checkpoint_path, &img_v, &img_i, None, None, &out).unwrap();
    assert_eq!(paths[2].file_name().unwrap(), "fused.png");

    // PNG quantization bounds the error at half a bin plus rounding slack.
    let (params, meta) = load_checkpoint(&summary.checkpoint_path).unwrap();
    let quantized_v = load_png(&img_v).unwrap();
    let quantized_i = load_png(&img_i).unwrap();
    let outs = fuse_images(&params, &meta, &quantized_v, &quantized_i, None, None).unwrap();
    let fused_png = load_png(&paths[2]).unwrap();
    let max = outs
        .fused
        .data()
        .iter()
        .zip(fused_png.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max <= 0.5 / 255.0 + 1e-9, "png round trip max diff {max}");
}

#[test]
fn fuse_with_explicit_specs_differs_from_default_conditioning() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 9).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 13).unwrap();
    let summary = train(&ds, &config, dir.path().join("run").as_path()).unwrap();
    let (params, meta) = load_checkpoint(&summary.checkpoint_path).unwrap();
    let s = &ds.samples[0];
    let with_specs = fuse_images(
        &params,
        &meta,
        &s.degraded_v,
        &s.degraded_i,
        Some(&s.spec_v),
        Some(&s.spec_i),
    )
    .unwrap();
    let with_defaults =
        fuse_images(&params, &meta, &s.degraded_v, &s.degraded_i, None, None).unwrap();
    assert_ne!(with_specs.fused.data(), with_defaults.fused.data());
}

// ---------------------------------------------------------------------------
// Ablation wiring
// ---------------------------------------------------------------------------

#[test]
fn unknown_ablation_name_lists_the_valid_ones() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 10).unwrap();
    let config = quick_config();
    let ds = synth_dataset(&scenes, 8, &config, 14).unwrap();
    let path = dir.path().join("ds.bin");
    save_dataset(&path, &ds).unwrap();
    let err = run_ablation("nonsense", &ds, &path, &config, dir.path())
        .unwrap_err()
        .to_string();
    for name in ABLATION_NAMES {
        assert!(err.contains(name), "message {err:?} missing {name}");
    }
}

#[test]
fn tiny_ablation_produces_labeled_long_format_rows() {
    let dir = tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    write_scene_dir(&scenes, 3, 64, 11).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batchsize: 4,
        ..TrainConfig::default()
    };
    let ds = synth_dataset(&scenes, 10, &config, 15).unwrap();
    let path = dir.path().join("ds.bin");
    save_dataset(&path, &ds).unwrap();
    let outcome = run_ablation("eq8-sign", &ds, &path, &config, dir.path()).unwrap();
    assert!(outcome.csv_path.exists());
    let csv = fs::read_to_string(&outcome.csv_path).unwrap();
    assert!(csv.contains("# dataset-fnv1a64.eq8-prose = "));
    assert!(csv.contains("# dataset-fnv1a64.eq8-literal = "));
    assert!(csv.lines().any(|l| l == "variant,metric,value"));
    for variant in ["eq8-prose", "eq8-literal"] {
        assert!(
            csv.lines()
                .any(|l| l.starts_with(&format!("{variant},restored-psnr,"))),
            "missing restored-psnr row for {variant}"
        );
        let stats = &outcome
            .variants
            .iter()
            .find(|(label, _)| label == variant)
            .expect("variant present")
            .1;
        assert!(stats.report.mean.is_finite());
        assert!(stats.restored_psnr.is_finite());
    }
}
