//! Command-line driver: kernel export, dataset synthesis, training,
//! fusion, evaluation, and ablation experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddrf_core::kernels::{KernelBank, KernelFamily, FAMILY_VARIANTS, KERNEL_SIZE};
use ddrf_core::metrics::evaluate_pair;
use ddrf_core::pipeline::{
    fuse_to_files, load_dataset, run_ablation, save_dataset, synth_dataset, train,
    TrainConfig,
};
use ddrf_core::raster::{load_png, save_png, Image};
use ddrf_core::Result;

#[derive(Parser)]
#[command(name = "ddrf", version, about = "Dynamic-degradation restore-and-fuse pipeline")]
struct Cli {
    /// Base RNG seed; overrides any seed from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the degradation kernel bank.
    Kernels {
        #[command(subcommand)]
        command: KernelsCommand,
    },
    /// Synthesize a training dataset from registered image pairs.
    SynthDataset {
        /// Directory of co-registered `*_v.png` / `*_i.png` pairs.
        #[arg(long)]
        source: PathBuf,
        /// Number of samples to draw.
        #[arg(long)]
        count: usize,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, writing checkpoints and a loss CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for `checkpoint.ckpt` and `loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore and fuse one registered image pair.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_v: PathBuf,
        #[arg(long)]
        image_i: PathBuf,
        /// Degradation spec `a,b,c,jm,ji,ja,s,sigma,m` for the visible
        /// input; defaults to the bank mean kernel at scale 1, no noise.
        #[arg(long)]
        spec_v: Option<String>,
        /// Degradation spec for the infrared input.
        #[arg(long)]
        spec_i: Option<String>,
        /// Output directory for the three PNGs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fused image against its two sources.
    Eval {
        #[arg(long)]
        image_v: PathBuf,
        #[arg(long)]
        image_i: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        /// Metric CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train paired variants and compare them on a held-out split.
    Ablate {
        /// One of: static-vs-dynamic, eq8-sign, loss-terms.
        #[arg(long)]
        name: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for per-variant runs and the comparison CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KernelsCommand {
    /// Write the 12 basis kernels and the bank mean as PNGs plus a
    /// full-precision text manifest.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(seed: Option<u64>, config: &Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.seed, &cli.config)?;
    match cli.command {
        Command::Kernels { command: KernelsCommand::Export { out } } => export_kernels(&cfg, &out),
        Command::SynthDataset { source, count, out } => {
            let ds = synth_dataset(&source, count, &cfg, cfg.seed)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} samples ({}x{} crops, scale {}) to {}",
                ds.samples.len(),
                ds.crop_size,
                ds.crop_size,
                ds.scale,
                out.display()
            );
            Ok(())
        }
        Command::Train { dataset, out } => {
            let ds = load_dataset(&dataset)?;
            let summary = train(&ds, &cfg, &out)?;
            let last = summary.epoch_reports.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final mean loss {}; checkpoint at {}",
                summary.epoch_reports.len(),
                last.total,
                summary.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Fuse { checkpoint, image_v, image_i, spec_v, spec_i, out } => {
            let paths = fuse_to_files(
                &checkpoint,
                &image_v,
                &image_i,
                spec_v.as_deref(),
                spec_i.as_deref(),
                &out,
            )?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Eval { image_v, image_i, fused, out } => {
            let report = evaluate_pair(&load_png(&image_v)?, &load_png(&image_i)?, &load_png(&fused)?)?;
            let mut csv = String::from("metric,value\n");
            for (name, value) in [
                ("en", report.en),
                ("ag", report.ag),
                ("ssim", report.ssim),
                ("vif", report.vif),
                ("psnr", report.psnr),
            ] {
                csv.push_str(&format!("{name},{value}\n"));
            }
            csv.push_str(&format!("vif-truncated,{}\n", u8::from(report.vif_truncated)));
            csv.push_str(&format!("mean,{}\n", report.mean));
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .map_err(|e| ddrf_core::Error::Io { path: path.clone(), source: e })?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Ablate { name, dataset, out } => {
            let ds = load_dataset(&dataset)?;
            let outcome = run_ablation(&name, &ds, &dataset, &cfg, &out)?;
            for (label, stats) in &outcome.variants {
                println!(
                    "{label}: metric mean {:.4}, restored psnr {:.2} dB (degraded {:.2} dB)",
                    stats.report.mean, stats.restored_psnr, stats.degraded_psnr
                );
            }
            println!("wrote {}", outcome.csv_path.display());
            Ok(())
        }
    }
}

fn family_slug(family: KernelFamily) -> &'static str {
    match family {
        KernelFamily::Motion => "motion",
        KernelFamily::Isotropic => "isotropic",
        KernelFamily::Anisotropic => "anisotropic",
    }
}

/// PNGs are peak-normalized for visibility; exact values go to the
/// manifest.
fn export_kernels(cfg: &TrainConfig, out: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| ddrf_core::Error::Io { path: out.clone(), source: e })?;
    let bank = KernelBank::build(cfg.seed);
    let mut manifest = format!(
        "ddrf kernel bank: {} kernels of {}x{}, bank seed {}\n\n",
        12,
        KERNEL_SIZE,
        KERNEL_SIZE,
        bank.seed()
    );
    let mut write_kernel = |name: &str, kernel: &[f64]| -> Result<()> {
        let peak = kernel.iter().cloned().fold(f64::MIN, f64::max);
        let img = Image::new(
            KERNEL_SIZE,
            KERNEL_SIZE,
            kernel.iter().map(|&v| v / peak).collect(),
        )?;
        save_png(&out.join(format!("{name}.png")), &img)?;
        manifest.push_str(name);
        manifest.push('\n');
        for row in kernel.chunks(KERNEL_SIZE) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            manifest.push_str(&cells.join(","));
            manifest.push('\n');
        }
        manifest.push('\n');
        Ok(())
    };
    for family in [KernelFamily::Motion, KernelFamily::Isotropic, KernelFamily::Anisotropic] {
        for j in 1..=FAMILY_VARIANTS {
            let kernel = bank.basis(family, j)?;
            write_kernel(&format!("kernel-{}-{j}", family_slug(family)), kernel)?;
        }
    }
    let mean = bank.mean_kernel();
    write_kernel("kernel-mean", mean.kernel())?;
    let manifest_path = out.join("kernels.txt");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| ddrf_core::Error::Io { path: manifest_path.clone(), source: e })?;
    println!("wrote 13 kernel PNGs and kernels.txt to {}", out.display());
    Ok(())
}
