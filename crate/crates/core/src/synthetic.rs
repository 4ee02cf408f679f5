//! Procedural co-registered scene pairs.
//!
//! Each scene is a smooth background plus a handful of rectangles and
//! disks. The two renderings share geometry but differ in contrast
//! polarity and gain, standing in for a visible/infrared pair without any
//! external data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{save_png, Image};
use crate::Result;

struct Shape {
    kind: ShapeKind,
    r: f64,
    c: f64,
    extent_r: f64,
    extent_c: f64,
    tone_v: f64,
    tone_i: f64,
}

enum ShapeKind {
    Rect,
    Disk,
}

impl Shape {
    fn covers(&self, r: f64, c: f64) -> bool {
        match self.kind {
            ShapeKind::Rect => {
                (r - self.r).abs() <= self.extent_r && (c - self.c).abs() <= self.extent_c
            }
            ShapeKind::Disk => {
                let dr = (r - self.r) / self.extent_r;
                let dc = (c - self.c) / self.extent_c;
                dr * dr + dc * dc <= 1.0
            }
        }
    }
}

/// Renders one co-registered pair of `size` x `size` images.
///
/// Deterministic in `seed`; distinct seeds give distinct scenes.
pub fn scene_pair(size: usize, seed: u64) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    // Smooth background: a few low-frequency cosine gratings.
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.08..0.2),
            )
        })
        .collect();

    let n_shapes = rng.random_range(5..=8);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            kind: if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Disk
            },
            r: rng.random_range(0.1 * s..0.9 * s),
            c: rng.random_range(0.1 * s..0.9 * s),
            extent_r: rng.random_range(0.04 * s..0.18 * s),
            extent_c: rng.random_range(0.04 * s..0.18 * s),
            tone_v: rng.random_range(-0.35..0.35),
            tone_i: rng.random_range(-0.35..0.35),
        })
        .collect();

    let field = |r: usize, c: usize| -> f64 {
        gratings
            .iter()
            .map(|&(fr, fc, phase, amp)| {
                amp * (std::f64::consts::TAU * (fr * r as f64 + fc * c as f64) + phase).cos()
            })
            .sum()
    };

    let render = |visible: bool| {
        Image::from_fn(size, size, |r, c| {
            let mut v = if visible {
                0.5 + field(r, c)
            } else {
                0.45 - 0.6 * field(r, c)
            };
            for sh in &shapes {
                if sh.covers(r as f64, c as f64) {
                    v += if visible { sh.tone_v } else { sh.tone_i };
                }
            }
            // Keep headroom so degradation noise stays informative.
            v.clamp(0.05, 0.95)
        })
    };

    (render(true), render(false))
}

/// Writes `count` scene pairs into `dir` as `scene{i}_v.png` and
/// `scene{i}_i.png`, returning the scene base names.
pub fn write_scene_dir(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let (v, ir) = scene_pair(size, seed.wrapping_add(i as u64));
        let name = format!("scene{i}");
        save_png(&dir.join(format!("{name}_v.png")), &v)?;
        save_png(&dir.join(format!("{name}_i.png")), &ir)?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let (a_v, a_i) = scene_pair(48, 9);
        let (b_v, b_i) = scene_pair(48, 9);
        assert_eq!(a_v, b_v);
        assert_eq!(a_i, b_i);
        let (c_v, _) = scene_pair(48, 10);
        assert_ne!(a_v, c_v);
    }

    #[test]
    fn scenes_stay_in_range_and_have_structure() {
        for seed in 0..5 {
            let (v, i) = scene_pair(64, seed);
            for img in [&v, &i] {
                assert!(img.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
                let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
                let var = img
                    .data()
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<f64>()
                    / img.data().len() as f64;
                assert!(var > 1e-4, "scene {seed} is nearly constant (var {var})");
            }
        }
    }
}
