use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel square image with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    side: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(Error::validation("image side must be positive"));
        }
        if data.len() != side * side {
            return Err(Error::validation(format!("image data has {} values, expected {side}x{side}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { side, data })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        ImageTensor::new(side, vec![value; side * side]).expect("value in range")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Save as an 8-bit grayscale PNG (values rounded to the nearest level).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        save_gray8(path, self.side as u32, self.side as u32, bytes)
    }
}

pub(crate) fn save_gray8(path: &Path, w: u32, h: u32, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let img = image::GrayImage::from_raw(w, h, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    }
}

/// Load a PNG/JPEG, convert to luminance, scale to `[0, 1]` and resize bilinearly to
/// `side x side`.
pub fn load_image(path: &Path, side: usize) -> Result<ImageTensor> {
    if side == 0 {
        return Err(Error::validation("target side must be positive"));
    }
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation(format!("{} is a zero-sized image", path.display())));
    }
    let luma = img.to_luma32f();
    let src: Vec<f32> = luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(side, resize_bilinear(&src, w, h, side))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, side: usize) -> Vec<f32> {
    if w == side && h == side {
        return src.to_vec();
    }
    let sx = w as f32 / side as f32;
    let sy = h as f32 / side as f32;
    let coord = |o: usize, scale: f32, len: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, c - i0 as f32)
    };
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..side {
            let (x0, x1, fx) = coord(ox, sx, w);
            let (p00, p01) = (src[y0 * w + x0], src[y0 * w + x1]);
            let (p10, p11) = (src[y1 * w + x0], src[y1 * w + x1]);
            let top = p00 + (p01 - p00) * fx;
            let bottom = p10 + (p11 - p10) * fx;
            out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
        img.save(path).unwrap();
    }

    #[test]
    fn white_image_stays_white() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        write_gray(&p, 128, 128, |_, _| 255);
        let t = load_image(&p, 64).unwrap();
        assert_eq!(t.side(), 64);
        assert!(t.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn black_image_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        write_gray(&p, 64, 64, |_, _| 0);
        let t = load_image(&p, 64).unwrap();
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_resize_stays_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grad.png");
        write_gray(&p, 100, 80, |x, y| ((x * 2 + y) % 256) as u8);
        let t = load_image(&p, 64).unwrap();
        assert_eq!(t.data().len(), 64 * 64);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn color_is_converted_to_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let img = image::RgbImage::from_fn(16, 16, |_, _| image::Rgb([255, 0, 0]));
        img.save(&p).unwrap();
        let t = load_image(&p, 16).unwrap();
        let v = t.get(3, 3);
        assert!(v > 0.1 && v < 0.4, "red luminance {v}");
    }

    #[test]
    fn missing_and_garbage_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_image(&dir.path().join("nope.png"), 8).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(load_image(&junk, 8).is_err());
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(ImageTensor::new(2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(ImageTensor::new(2, vec![0.0; 3]).is_err());
    }
}
