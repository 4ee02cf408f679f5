//! Training-sample synthesis and the on-disk dataset format.
//!
//! A dataset is self-contained: the header records every degradation spec
//! and noise seed, so each degraded crop can be regenerated bit-exactly
//! from its clean crop without the original source images.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::derive_seed;
use crate::kernels::{
    degrade, sample_dynamic_kernel, DegradationSpec, KernelBank, MAX_NOISE_SIGMA,
};
use crate::pipeline::config::TrainConfig;
use crate::raster::{load_png, Image};
use crate::{Error, Result};

const DATASET_MAGIC: &str = "ddrf-dataset v1";

/// One training sample: co-registered clean crops, their degraded
/// renditions, and everything needed to regenerate the degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub clean_v: Image,
    pub clean_i: Image,
    pub degraded_v: Image,
    pub degraded_i: Image,
    pub spec_v: DegradationSpec,
    pub spec_i: DegradationSpec,
    pub noise_seed_v: u64,
    pub noise_seed_i: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub bank_seed: u64,
    pub crop_size: usize,
    pub scale: u32,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    /// Degraded-crop dimensions implied by the crop size and scale.
    pub fn degraded_size(&self) -> usize {
        self.crop_size.div_ceil(self.scale as usize)
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Scans `dir` for `*_v.png` / `*_i.png` pairs, sorted by stem.
fn scan_pairs(dir: &Path) -> Result<Vec<(String, Image, Image)>> {
    let mut stems: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_v.png") {
            stems.entry(stem.to_string()).or_default().0 = true;
        } else if let Some(stem) = name.strip_suffix("_i.png") {
            stems.entry(stem.to_string()).or_default().1 = true;
        }
    }
    let unpaired: Vec<String> = stems
        .iter()
        .filter(|(_, &(v, i))| !(v && i))
        .map(|(stem, &(v, _))| {
            if v {
                format!("{stem}_v.png (no {stem}_i.png)")
            } else {
                format!("{stem}_i.png (no {stem}_v.png)")
            }
        })
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::data(format!(
            "unpaired source images: {}",
            unpaired.join(", ")
        )));
    }
    if stems.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 source pairs in {}, found {}",
            dir.display(),
            stems.len()
        )));
    }
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems.keys() {
        let v = load_png(&dir.join(format!("{stem}_v.png")))?;
        let i = load_png(&dir.join(format!("{stem}_i.png")))?;
        if v.h() != i.h() || v.w() != i.w() {
            return Err(Error::data(format!(
                "{stem}_v.png is {}x{} but {stem}_i.png is {}x{}",
                v.h(),
                v.w(),
                i.h(),
                i.w()
            )));
        }
        out.push((stem.clone(), v, i));
    }
    Ok(out)
}

/// Draws `count` random crops with fresh degradations from the source
/// pairs in `dir`. Fully determined by `(config, seed)` and the sources.
pub fn synth_dataset(
    dir: &Path,
    count: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::arg("dataset sample count must be >= 1".to_string()));
    }
    let pairs = scan_pairs(dir)?;
    let crop = config.crop_size;
    for (stem, v, _) in &pairs {
        if v.h() < crop || v.w() < crop {
            return Err(Error::data(format!(
                "{stem}_v.png is {}x{}, smaller than crop-size {crop}",
                v.h(),
                v.w()
            )));
        }
    }

    let bank = KernelBank::build(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset", &[count as u64]));
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let (_, src_v, src_i) = &pairs[rng.random_range(0..pairs.len())];
        let r0 = rng.random_range(0..=src_v.h() - crop);
        let c0 = rng.random_range(0..=src_v.w() - crop);
        let mut clean_v = src_v.crop(r0, c0, crop, crop)?;
        let clean_i = src_i.crop(r0, c0, crop, crop)?;
        if config.illum_aug {
            clean_v = clean_v.scaled(rng.random_range(0.25..=1.0));
        }
        let spec_v = DegradationSpec {
            kernel: sample_dynamic_kernel(&bank, &mut rng),
            scale: config.scale,
            noise_sigma: rng.random_range(0.0..=MAX_NOISE_SIGMA),
            model_index: 1,
        };
        let spec_i = DegradationSpec {
            kernel: sample_dynamic_kernel(&bank, &mut rng),
            scale: config.scale,
            noise_sigma: rng.random_range(0.0..=MAX_NOISE_SIGMA),
            model_index: 2,
        };
        let noise_seed_v: u64 = rng.random();
        let noise_seed_i: u64 = rng.random();
        let degraded_v =
            degrade(&clean_v, &spec_v, &mut ChaCha8Rng::seed_from_u64(noise_seed_v))?;
        let degraded_i =
            degrade(&clean_i, &spec_i, &mut ChaCha8Rng::seed_from_u64(noise_seed_i))?;
        samples.push(SamplePair {
            clean_v,
            clean_i,
            degraded_v,
            degraded_i,
            spec_v,
            spec_i,
            noise_seed_v,
            noise_seed_i,
        });
    }
    Ok(Dataset {
        seed,
        bank_seed: seed,
        crop_size: crop,
        scale: config.scale,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn write_block(w: &mut impl Write, data: &[f64], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn read_block(bytes: &[u8], pos: &mut usize, expected: usize, what: &str) -> Result<Vec<f64>> {
    let header: [u8; 8] = bytes
        .get(*pos..*pos + 8)
        .ok_or_else(|| Error::data(format!("dataset truncated before {what}")))?
        .try_into()
        .expect("slice length checked");
    *pos += 8;
    let len = u64::from_le_bytes(header) as usize;
    if len != expected {
        return Err(Error::data(format!(
            "{what} holds {len} values, expected {expected}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let chunk: [u8; 8] = bytes
            .get(*pos..*pos + 8)
            .ok_or_else(|| Error::data(format!("dataset truncated inside {what}")))?
            .try_into()
            .expect("slice length checked");
        *pos += 8;
        out.push(f64::from_le_bytes(chunk));
    }
    Ok(out)
}

/// Writes the manifest header and the clean/degraded crops as
/// length-prefixed little-endian blocks. Byte-identical for equal inputs.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = String::new();
    header.push_str(DATASET_MAGIC);
    header.push('\n');
    header.push_str(&format!("seed = {}\n", ds.seed));
    header.push_str(&format!("bank-seed = {}\n", ds.bank_seed));
    header.push_str(&format!("crop-size = {}\n", ds.crop_size));
    header.push_str(&format!("scale = {}\n", ds.scale));
    header.push_str(&format!("count = {}\n", ds.samples.len()));
    for (i, s) in ds.samples.iter().enumerate() {
        header.push_str(&format!("sample {i} spec-v = {}\n", s.spec_v.serialize()));
        header.push_str(&format!("sample {i} spec-i = {}\n", s.spec_i.serialize()));
        header.push_str(&format!("sample {i} noise-seed-v = {}\n", s.noise_seed_v));
        header.push_str(&format!("sample {i} noise-seed-i = {}\n", s.noise_seed_i));
    }
    header.push_str("end-header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for s in &ds.samples {
        write_block(&mut w, s.clean_v.data(), path)?;
        write_block(&mut w, s.clean_i.data(), path)?;
        write_block(&mut w, s.degraded_v.data(), path)?;
        write_block(&mut w, s.degraded_i.data(), path)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end-header\n")
        .ok_or_else(|| Error::data("dataset header terminator missing".to_string()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::data("dataset header is not UTF-8".to_string()))?;
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut lines = header.lines();
    if lines.next() != Some(DATASET_MAGIC) {
        return Err(Error::data(format!(
            "not a dataset file (missing `{DATASET_MAGIC}` magic)"
        )));
    }
    for line in lines {
        if line == "end-header" {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::data(format!("malformed dataset header line {line:?}")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::data(format!("dataset missing field {key:?}")))
    };
    let parse_u64 = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::data(format!("dataset field {key:?} is not an integer")))
    };
    let seed = parse_u64("seed")?;
    let bank_seed = parse_u64("bank-seed")?;
    let crop_size = parse_u64("crop-size")? as usize;
    let scale = parse_u64("scale")? as u32;
    let count = parse_u64("count")? as usize;
    let bank = KernelBank::build(bank_seed);

    let clean_len = crop_size * crop_size;
    let degraded_side = crop_size.div_ceil(scale as usize);
    let degraded_len = degraded_side * degraded_side;
    let mut pos = header_end;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let spec_v = DegradationSpec::parse(&get(&format!("sample {i} spec-v"))?, &bank)?;
        let spec_i = DegradationSpec::parse(&get(&format!("sample {i} spec-i"))?, &bank)?;
        let noise_seed_v = parse_u64(&format!("sample {i} noise-seed-v"))?;
        let noise_seed_i = parse_u64(&format!("sample {i} noise-seed-i"))?;
        let clean_v = Image::new(
            crop_size,
            crop_size,
            read_block(&bytes, &mut pos, clean_len, &format!("sample {i} clean-v"))?,
        )?;
        let clean_i = Image::new(
            crop_size,
            crop_size,
            read_block(&bytes, &mut pos, clean_len, &format!("sample {i} clean-i"))?,
        )?;
        let degraded_v = Image::new(
            degraded_side,
            degraded_side,
            read_block(&bytes, &mut pos, degraded_len, &format!("sample {i} degraded-v"))?,
        )?;
        let degraded_i = Image::new(
            degraded_side,
            degraded_side,
            read_block(&bytes, &mut pos, degraded_len, &format!("sample {i} degraded-i"))?,
        )?;
        samples.push(SamplePair {
            clean_v,
            clean_i,
            degraded_v,
            degraded_i,
            spec_v,
            spec_i,
            noise_seed_v,
            noise_seed_i,
        });
    }
    if pos != bytes.len() {
        return Err(Error::data(format!(
            "dataset has {} trailing bytes after the last sample",
            bytes.len() - pos
        )));
    }
    Ok(Dataset {
        seed,
        bank_seed,
        crop_size,
        scale,
        samples,
    })
}

/// FNV-1a64 over the dataset file bytes, for controlled-comparison
/// headers in ablation reports.
pub fn dataset_file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::hash::fnv1a64(&bytes))
}
