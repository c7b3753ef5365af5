//! Foreign-patch interpolation: synthetic abnormal images with box masks for training the
//! refinement network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::seed;

/// A sampled patch. `box_` is the half-open pixel rectangle `[x0, x1) × [y0, y1)` after
/// clipping to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub center: (f64, f64),
    pub size: f64,
    pub realized_box: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

fn clip_interval(c: f64, size: f64, d: usize) -> (usize, usize) {
    let lo = (c - size / 2.0).round().clamp(0.0, d as f64 - 1.0) as usize;
    let hi = ((c + size / 2.0).round().clamp(0.0, d as f64) as usize).max(lo + 1);
    (lo, hi)
}

impl PatchSpec {
    /// Square patch of side `size` centered at `center`, clipped to a `d × d` image.
    pub fn new(d: usize, center: (f64, f64), size: f64) -> Self {
        let (x0, x1) = clip_interval(center.0, size, d);
        let (y0, y1) = clip_interval(center.1, size, d);
        PatchSpec { center, size, realized_box: PixelBox { x0, y0, x1, y1 } }
    }
}

/// Center uniform on `[0.1d, 0.9d]` per axis, size uniform on `[0.1d, 0.4d]`.
pub fn sample_patch(d: usize, rng: &mut impl Rng) -> PatchSpec {
    let df = d as f64;
    let cx = rng.random_range(0.1 * df..=0.9 * df);
    let cy = rng.random_range(0.1 * df..=0.9 * df);
    let size = rng.random_range(0.1 * df..=0.4 * df);
    PatchSpec::new(d, (cx, cy), size)
}

/// A synthetic image and its binary patch mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub x_s: ImageTensor,
    pub y_s: Vec<u8>,
    pub alpha: f32,
    pub patch: PatchSpec,
    /// Indices of `x` and `x_f` in the normal set, when drawn from a stream.
    pub sources: Option<(usize, usize)>,
}

/// `x_s = (1 - alpha) x + alpha x_f` inside the patch, `x` elsewhere.
pub fn fpi_blend(x: &ImageTensor, x_f: &ImageTensor, patch: &PatchSpec, alpha: f32) -> Result<SynthPair> {
    if x.side() != x_f.side() {
        return Err(Error::validation(format!("blend sides differ: {} vs {}", x.side(), x_f.side())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} outside [0, 1]")));
    }
    let d = x.side();
    let b = patch.realized_box;
    if b.x1 > d || b.y1 > d || b.area() == 0 {
        return Err(Error::validation("patch box lies outside the image"));
    }
    let a = f64::from(alpha);
    let mut data = x.data().to_vec();
    let mut mask = vec![0u8; d * d];
    for y in b.y0..b.y1 {
        for xx in b.x0..b.x1 {
            let i = y * d + xx;
            data[i] = ((1.0 - a) * f64::from(data[i]) + a * f64::from(x_f.data()[i])).clamp(0.0, 1.0) as f32;
            mask[i] = 1;
        }
    }
    Ok(SynthPair { x_s: ImageTensor::new(d, data)?, y_s: mask, alpha, patch: *patch, sources: None })
}

/// Pair `index` of the stream seeded by `stream_seed`: image `index mod n` blended with a
/// different image of the set. Each pair owns its own random stream.
pub fn synth_pair(normals: &[ImageTensor], stream_seed: u64, index: usize) -> Result<SynthPair> {
    let n = normals.len();
    if n < 2 {
        return Err(Error::validation(format!("synthesis needs at least 2 normal images, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(stream_seed, seed::tags::SYNTH, index as u64));
    let xi = index % n;
    let mut fi = rng.random_range(0..n - 1);
    if fi >= xi {
        fi += 1;
    }
    let patch = sample_patch(normals[xi].side(), &mut rng);
    let alpha = rng.random::<f32>();
    let mut pair = fpi_blend(&normals[xi], &normals[fi], &patch, alpha)?;
    pair.sources = Some((xi, fi));
    Ok(pair)
}

/// Lazily generated training pairs.
pub struct SynthStream<'a> {
    normals: &'a [ImageTensor],
    stream_seed: u64,
    next: usize,
    count: usize,
}

impl Iterator for SynthStream<'_> {
    type Item = SynthPair;

    fn next(&mut self) -> Option<SynthPair> {
        if self.next >= self.count {
            return None;
        }
        let pair = synth_pair(self.normals, self.stream_seed, self.next).expect("validated at construction");
        self.next += 1;
        Some(pair)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SynthStream<'_> {}

pub fn build_asr_training_stream(normals: &[ImageTensor], count: usize, stream_seed: u64) -> Result<SynthStream<'_>> {
    if normals.len() < 2 {
        return Err(Error::validation(format!("synthesis needs at least 2 normal images, got {}", normals.len())));
    }
    if let Some(bad) = normals.iter().find(|x| x.side() != normals[0].side()) {
        return Err(Error::validation(format!(
            "normal images differ in side ({} vs {})",
            bad.side(),
            normals[0].side()
        )));
    }
    Ok(SynthStream { normals, stream_seed, next: 0, count })
}

/// Write `pair_<i>.png` and `pair_<i>_mask.png` for inspection.
pub fn dump_pairs<'a>(pairs: impl IntoIterator<Item = &'a SynthPair>, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for (i, p) in pairs.into_iter().enumerate() {
        p.x_s.save_png(&dir.join(format!("pair_{i:05}.png")))?;
        let mask: Vec<f32> = p.y_s.iter().map(|v| f32::from(*v)).collect();
        ImageTensor::new(p.x_s.side(), mask)?.save_png(&dir.join(format!("pair_{i:05}_mask.png")))?;
        n += 1;
    }
    Ok(n)
}
