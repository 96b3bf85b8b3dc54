//! Float RGB images in [0,1], interleaved row-major, plus PNG IO and the
//! box-filter resampling used for LR view generation.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major, length `width * height * 3`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                name: "image".into(),
                detail: format!("{}x{} vs {} floats", width, height, data.len()),
            });
        }
        Ok(Image { width, height, data })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// u + 0.5), clamped to the image border.
    pub fn bilinear(&self, fu: f64, fv: f64) -> [f64; 3] {
        let x = (fu - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fv - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bot = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }

    /// Exact area mean over `factor x factor` blocks. Dimensions must divide.
    pub fn downsample_box(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h);
        let inv = 1.0 / (factor * factor) as f64;
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0; 3];
                for dv in 0..factor {
                    for du in 0..factor {
                        let p = self.get(u * factor + du, v * factor + dv);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set(u, v, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let n = self.data.len() as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer size matches dims");
        buf.save(path).map_err(Error::from)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_data(w, h, data)
    }

    /// Quantize to 8 bits and back, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Image {
        let data = self.to_u8().iter().map(|&b| b as f64 / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }
}

/// Side-by-side horizontal strip of equally sized images.
pub fn hstack(images: &[&Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("hstack of nothing".into()));
    }
    let h = images[0].height;
    if images.iter().any(|i| i.height != h) {
        return Err(Error::InvalidArgument("hstack height mismatch".into()));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = Image::new(w, h);
    let mut off = 0;
    for img in images {
        for v in 0..h {
            for u in 0..img.width {
                out.set(off + u, v, img.get(u, v));
            }
        }
        off += img.width;
    }
    Ok(out)
}
