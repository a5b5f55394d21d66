//! Pixel container plus the deterministic bilinear resize the tiler is
//! built on. Values are f32 in [0, 1], row-major (y, x, channel), RGB only.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("zero-area image ({height}x{width})")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Input(format!(
                "pixel buffer length {} does not match {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageTensor::new(height, width, data)
    }

    /// Builds an image from a per-pixel function returning RGB in [0, 1].
    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageTensor::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes an 8-bit PNG or JPEG into [0, 1] floats.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path)
            .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        ImageTensor::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png encode: {e}"))))
    }

    /// PNG encoding as bytes (for atomic writes).
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        self.to_rgb8()
            .write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::Io(std::io::Error::other(format!("png encode: {e}"))))?;
        Ok(bytes)
    }

    /// Bilinear resample with half-pixel centers. Source coordinates and the
    /// four-tap blend are computed in f64, clamped at the borders.
    pub fn resize_bilinear(&self, out_height: usize, out_width: usize) -> ImageTensor {
        let mut data = vec![0.0f32; out_height * out_width * CHANNELS];
        let sy = self.height as f64 / out_height as f64;
        let sx = self.width as f64 / out_width as f64;
        for oy in 0..out_height {
            let src_y = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (src_y.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for ox in 0..out_width {
                let src_x = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (src_x.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                for c in 0..CHANNELS {
                    let p00 = self.data[(y0 * self.width + x0) * CHANNELS + c] as f64;
                    let p01 = self.data[(y0 * self.width + x1) * CHANNELS + c] as f64;
                    let p10 = self.data[(y1 * self.width + x0) * CHANNELS + c] as f64;
                    let p11 = self.data[(y1 * self.width + x1) * CHANNELS + c] as f64;
                    let top = p00 * (1.0 - fx) + p01 * fx;
                    let bottom = p10 * (1.0 - fx) + p11 * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    data[(oy * out_width + ox) * CHANNELS + c] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        ImageTensor {
            height: out_height,
            width: out_width,
            data,
        }
    }

    /// Copies a rectangle; the caller guarantees it lies inside the image.
    pub fn crop_rect(&self, x: usize, y: usize, w: usize, h: usize) -> ImageTensor {
        debug_assert!(x + w <= self.width && y + h <= self.height);
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        ImageTensor {
            height: h,
            width: w,
            data,
        }
    }
}
