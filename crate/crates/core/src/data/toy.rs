//! Procedural desk-scale corpus.
//!
//! Normal images are one or two soft-edged ellipses over a shaded background, overlaid
//! with pixel noise whose amplitude varies from image to image. The noise cannot be
//! reconstructed by a bottlenecked autoencoder, so raw reconstruction error is dominated by it.
//! Abnormal images are normal images carrying one low-frequency lesion, a square or a disk
//! whose intensity is shifted away from the surrounding tissue. Each abnormal image gets a
//! binary mask on disk.
//!
//! Pool assignment (deterministic in the image index): with `t = min(n_normal, n_abnormal) / 4`,
//! the first `t` images of each class form the test pool, the remaining abnormal images go to
//! the unlabeled pool (hidden label 1) together with an equal number of normal images (hidden
//! label 0, as many as are available), and every other normal image forms the normal pool.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::{save_gray8, ImageTensor};
use super::manifest::{Manifest, ManifestEntry, SplitKind};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionStyle {
    Square,
    Disk,
}

/// A rendered abnormal sample.
#[derive(Clone, Debug)]
pub struct ToyAnomaly {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub style: LesionStyle,
}

/// Upper bound of the per-image noise amplitude.
pub const NOISE_MAX: f32 = 0.3;

/// Range of the intensity shift inside a lesion.
pub const LESION_CONTRAST: (f32, f32) = (0.5, 0.6);

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn render_clean(side: usize, rng: &mut impl Rng) -> Vec<f32> {
    let d = side as f32;
    let base = rng.random_range(0.15..0.60f32);
    let gx = rng.random_range(-0.08..0.08f32);
    let gy = rng.random_range(-0.08..0.08f32);
    let mut img: Vec<f32> = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f32 / d - 0.5, (i / side) as f32 / d - 0.5);
            base + gx * x + gy * y
        })
        .collect();
    let blobs = rng.random_range(1..=2usize);
    for _ in 0..blobs {
        let cx = rng.random_range(0.15 * d..0.85 * d);
        let cy = rng.random_range(0.15 * d..0.85 * d);
        let a = rng.random_range(0.08 * d..0.22 * d);
        let b = rng.random_range(0.08 * d..0.22 * d);
        let theta = rng.random_range(0.0..PI);
        let amp = rng.random_range(-0.15..0.15f32);
        let (s, c) = theta.sin_cos();
        let edge = a.min(b) / 1.5;
        for (i, v) in img.iter_mut().enumerate() {
            let (px, py) = ((i % side) as f32 + 0.5 - cx, (i / side) as f32 + 0.5 - cy);
            let u = (c * px + s * py) / a;
            let w = (-s * px + c * py) / b;
            let r = (u * u + w * w).sqrt();
            *v += amp * sigmoid((1.0 - r) * edge);
        }
    }
    img
}

fn add_noise(img: &mut [f32], rng: &mut impl Rng) {
    let amp = rng.random_range(0.0..NOISE_MAX);
    for v in img.iter_mut() {
        *v = (*v + amp * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0);
    }
}

/// Render one normal image.
pub fn render_normal(side: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut img = render_clean(side, rng);
    add_noise(&mut img, rng);
    img
}

/// Render one abnormal image: a normal image with a lesion painted in before the noise. The
/// lesion shifts the underlying intensity by a fixed contrast, brightening dark regions and
/// darkening bright ones.
pub fn render_abnormal(side: usize, rng: &mut impl Rng) -> ToyAnomaly {
    let mut image = render_clean(side, rng);
    let d = side as f32;
    let size = rng.random_range(0.18 * d..0.30 * d).round().max(3.0);
    let cx = rng.random_range(0.25 * d..0.75 * d);
    let cy = rng.random_range(0.25 * d..0.75 * d);
    let style = if rng.random_bool(0.5) { LesionStyle::Square } else { LesionStyle::Disk };
    let contrast = rng.random_range(LESION_CONTRAST.0..LESION_CONTRAST.1);
    let mut mask = vec![0u8; side * side];
    for (i, m) in mask.iter_mut().enumerate() {
        let (px, py) = ((i % side) as f32 + 0.5 - cx, (i / side) as f32 + 0.5 - cy);
        *m = u8::from(match style {
            LesionStyle::Square => px.abs() <= size / 2.0 && py.abs() <= size / 2.0,
            LesionStyle::Disk => (px * px + py * py).sqrt() <= size / 2.0,
        });
    }
    let area = mask.iter().filter(|&&m| m == 1).count().max(1);
    let local = image.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(v, _)| *v).sum::<f32>() / area as f32;
    let shift = if local < 0.45 { contrast } else { -contrast };
    for (v, &m) in image.iter_mut().zip(&mask) {
        if m == 1 {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    add_noise(&mut image, rng);
    ToyAnomaly { image, mask, style }
}

fn image_rng(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(seed, seed::tags::TOY, (kind << 40) | index as u64))
}

/// Deterministically render normal image `index` of a corpus.
pub fn toy_normal(side: usize, seed: u64, index: usize) -> ImageTensor {
    ImageTensor::new(side, render_normal(side, &mut image_rng(seed, 0, index))).expect("in range")
}

/// Deterministically render abnormal image `index` of a corpus.
pub fn toy_abnormal(side: usize, seed: u64, index: usize) -> ToyAnomaly {
    render_abnormal(side, &mut image_rng(seed, 1, index))
}

fn to_u8(v: &[f32]) -> Vec<u8> {
    v.iter().map(|x| (x * 255.0).round() as u8).collect()
}

/// Write a toy corpus under `out_dir` (images, masks and `manifest.csv`) and return its
/// manifest.
pub fn generate_toy_corpus(
    out_dir: &Path,
    n_normal: usize,
    n_abnormal: usize,
    side: usize,
    seed: u64,
) -> Result<Manifest> {
    if side < 16 {
        return Err(Error::validation(format!("toy corpus side must be >= 16, got {side}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let s = side as u32;
    (0..n_normal).into_par_iter().try_for_each(|i| {
        let img = toy_normal(side, seed, i);
        save_gray8(&out_dir.join(normal_name(i)), s, s, to_u8(img.data()))
    })?;
    (0..n_abnormal).into_par_iter().try_for_each(|i| {
        let a = toy_abnormal(side, seed, i);
        save_gray8(&out_dir.join(abnormal_name(i)), s, s, to_u8(&a.image))?;
        let mask = a.mask.iter().map(|m| m * 255).collect();
        save_gray8(&out_dir.join(format!("masks/abnormal_{i:05}.png")), s, s, mask)
    })?;

    let n_test = n_normal.min(n_abnormal) / 4;
    let n_unl_abn = n_abnormal - n_test;
    let n_unl_norm = n_unl_abn.min(n_normal - n_test);
    let mut entries = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..n_normal {
        let split = if i < n_test {
            SplitKind::Test
        } else if i < n_test + n_unl_norm {
            SplitKind::Unlabeled
        } else {
            SplitKind::Normal
        };
        entries.push(ManifestEntry { path: normal_name(i), split, label: Some(0) });
    }
    for i in 0..n_abnormal {
        let split = if i < n_test { SplitKind::Test } else { SplitKind::Unlabeled };
        entries.push(ManifestEntry { path: abnormal_name(i), split, label: Some(1) });
    }
    let manifest = Manifest { entries, base_dir: out_dir.to_path_buf() };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn normal_name(i: usize) -> String {
    format!("images/normal_{i:05}.png")
}

fn abnormal_name(i: usize) -> String {
    format!("images/abnormal_{i:05}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_corpus(dir.path(), 0, 0, 64, 3).unwrap();
        assert!(m.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_toy_corpus(a.path(), 10, 5, 64, 7).unwrap();
        generate_toy_corpus(b.path(), 10, 5, 64, 7).unwrap();
        for name in ["images/normal_00003.png", "images/abnormal_00004.png", "masks/abnormal_00001.png", MANIFEST_FILE]
        {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn pool_assignment_matches_rule() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_corpus(dir.path(), 18, 8, 16, 1).unwrap();
        let count = |split, label| m.entries.iter().filter(|e| e.split == split && e.label == Some(label)).count();
        assert_eq!(count(SplitKind::Test, 0), 2);
        assert_eq!(count(SplitKind::Test, 1), 2);
        assert_eq!(count(SplitKind::Unlabeled, 1), 6);
        assert_eq!(count(SplitKind::Unlabeled, 0), 6);
        assert_eq!(count(SplitKind::Normal, 0), 10);
    }

    #[test]
    fn lesion_mask_has_expected_area() {
        for i in 0..20 {
            let a = toy_abnormal(64, 5, i);
            let area = a.mask.iter().filter(|m| **m == 1).count();
            assert!(area >= 90, "lesion too small: {area}");
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
            let clean = render_clean(64, &mut image_rng(5, 1, i));
            let shift: f32 =
                a.image.iter().zip(&clean).zip(&a.mask).filter(|(_, m)| **m == 1).map(|((x, c), _)| x - c).sum::<f32>()
                    / area as f32;
            assert!(shift.abs() > 0.25, "lesion shift {shift}");
        }
    }

    #[test]
    fn normal_images_stay_in_range() {
        for i in 0..20 {
            assert!(toy_normal(32, 9, i).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_tiny_side() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_toy_corpus(dir.path(), 1, 1, 8, 0).is_err());
    }
}
