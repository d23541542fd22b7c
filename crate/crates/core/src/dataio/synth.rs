//! Seeded synthetic segmentation task: a class-0 background with one
//! rectangle or disc per foreground class, each class painted with its own
//! mean colour plus Gaussian noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_mask_pgm, write_raster, DataError, ManifestFile, Raster, SampleEntry};
use crate::metrics::{LabelMask, DEFAULT_IGNORE_LABEL};

pub const NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Mean colour per class, on a grid of RGB levels so that any two classes
/// differ by at least 0.4 in some channel.
pub fn class_colors(k: usize) -> Result<Vec<[f64; 3]>, DataError> {
    let levels: &[f64] = if k <= 8 { &[0.1, 0.9] } else { &[0.1, 0.5, 0.9] };
    let m = levels.len();
    if k > m * m * m {
        return Err(DataError::InvalidArgument(format!(
            "synthetic data supports at most {} classes, got {k}",
            m * m * m
        )));
    }
    Ok((0..k)
        .map(|i| [levels[i % m], levels[(i / m) % m], levels[i / (m * m)]])
        .collect())
}

enum Shape2 {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape2 {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let lo = (size / 5).max(2);
        let hi = (size / 2).max(lo + 1);
        if rng.random_bool(0.5) {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            Shape2::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        } else {
            let r = rng.random_range(lo as f64..=hi as f64) / 2.0;
            let cx = rng.random_range(r..=size as f64 - r);
            let cy = rng.random_range(r..=size as f64 - r);
            Shape2::Disc { cx, cy, r }
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape2::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Shape2::Disc { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Renders one image/mask pair; later classes paint over earlier ones.
fn render(rng: &mut ChaCha8Rng, size: usize, colors: &[[f64; 3]], noise: &Normal<f64>) -> (Raster, LabelMask) {
    let mut labels = vec![0u8; size * size];
    for class in 1..colors.len() {
        let shape = Shape2::random(rng, size);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x, y) {
                    labels[y * size + x] = class as u8;
                }
            }
        }
    }
    let mut bytes = Vec::with_capacity(3 * size * size);
    for &l in &labels {
        for &mean in &colors[l as usize] {
            let v = (mean + noise.sample(rng)).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    (
        Raster {
            width: size,
            height: size,
            channels: 3,
            bytes,
        },
        LabelMask::new(1, size, size, labels),
    )
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pgm` and `manifest.json` under
/// `out_dir` and returns the manifest path. Output is byte-identical for a
/// given configuration.
pub fn synthesize_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let out_dir = out_dir.as_ref();
    if cfg.n == 0 {
        return Err(DataError::InvalidArgument("sample count must be positive".into()));
    }
    if cfg.size == 0 || !cfg.size.is_multiple_of(32) {
        return Err(DataError::InvalidArgument(format!(
            "image size must be a positive multiple of 32, got {}",
            cfg.size
        )));
    }
    if cfg.classes < 2 {
        return Err(DataError::InvalidArgument(format!(
            "at least 2 classes are required, got {}",
            cfg.classes
        )));
    }
    let colors = class_colors(cfg.classes)?;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (image, mask) = render(&mut rng, cfg.size, &colors, &noise);
        let image_rel = PathBuf::from(format!("images/{i:04}.ppm"));
        let mask_rel = PathBuf::from(format!("masks/{i:04}.pgm"));
        write_raster(out_dir.join(&image_rel), &image)?;
        save_mask_pgm(out_dir.join(&mask_rel), &mask)?;
        samples.push(SampleEntry {
            image: image_rel,
            mask: mask_rel,
        });
    }
    let manifest = ManifestFile {
        classes: (0..cfg.classes)
            .map(|c| if c == 0 { "background".to_string() } else { format!("class{c}") })
            .collect(),
        ignore_label: DEFAULT_IGNORE_LABEL,
        samples,
        palette: None,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_separated() {
        for k in [2, 3, 8, 9, 27] {
            let c = class_colors(k).unwrap();
            for i in 0..k {
                for j in 0..i {
                    let sep = (0..3).map(|ch| (c[i][ch] - c[j][ch]).abs()).fold(0.0, f64::max);
                    assert!(sep >= 0.4 - 1e-12, "k={k} classes {i},{j}");
                }
            }
        }
        assert!(class_colors(28).is_err());
    }

    #[test]
    fn rejects_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n: 1,
            size: 30,
            classes: 3,
            seed: 0,
        };
        assert!(synthesize_dataset(&cfg, dir.path()).unwrap_err().is_validation());
    }
}
