//! In-memory image representation and PNG I/O.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major, channel-interleaved
//! (H x W x C). Grayscale images have `channels == 1`, color images 3.
//! PNG decode maps 8-bit samples as `v / 255` and 16-bit as `v / 65535`;
//! encode clamps to `[0, 1]` and rounds to the nearest representable sample.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved samples in `[0, 1]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Image {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Image {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Extract channel `c` as an H x W plane.
    pub fn channel_plane(&self, c: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.get(y, x, c));
            }
        }
        Tensor::new(vec![self.height, self.width], data)
    }

    /// Replace channel `c` from an H x W plane.
    pub fn set_channel_plane(&mut self, c: usize, plane: &Tensor) {
        assert_eq!(plane.shape, vec![self.height, self.width]);
        for y in 0..self.height {
            for x in 0..self.width {
                self.set(y, x, c, plane.data[y * self.width + x]);
            }
        }
    }

    /// Convert to a C x H x W tensor (planar layout used by conv layers).
    pub fn to_chw(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    data.push(self.get(y, x, c));
                }
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], data)
    }

    /// Build from a C x H x W tensor.
    pub fn from_chw(t: &Tensor) -> Image {
        assert_eq!(t.shape.len(), 3, "from_chw needs a 3-D tensor");
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut img = Image::zeros(h, w, c);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, ci, t.data[(ci * h + y) * w + x]);
                }
            }
        }
        img
    }

    /// Global mean over all samples.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean of channel `c`.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.height * self.width;
        if n == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                s += self.get(y, x, c);
            }
        }
        s / n as f64
    }

    /// Clamp every sample into `[0, 1]`, returning how many were outside.
    pub fn clip_count(&mut self) -> usize {
        let mut n = 0;
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
                n += 1;
            } else if *v > 1.0 {
                *v = 1.0;
                n += 1;
            }
        }
        n
    }

    /// Count samples outside `[0, 1]` without modifying the image.
    pub fn count_out_of_range(&self) -> usize {
        self.data
            .iter()
            .filter(|&&v| !(0.0..=1.0).contains(&v))
            .count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Decode a PNG file. 8-bit and 16-bit gray/RGB inputs are supported;
    /// alpha channels are rejected so every sample round-trips exactly.
    pub fn load_png(path: &Path) -> Result<Image> {
        let dyn_img = ::image::ImageReader::open(path)
            .map_err(Error::Io)?
            .decode()?;
        use ::image::DynamicImage as D;
        let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
        let img = match dyn_img {
            D::ImageLuma8(b) => {
                let data = b.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
                Image::new(h, w, 1, data)
            }
            D::ImageLuma16(b) => {
                let data = b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
                Image::new(h, w, 1, data)
            }
            D::ImageRgb8(b) => {
                let mut data = Vec::with_capacity(h * w * 3);
                for p in b.pixels() {
                    for k in 0..3 {
                        data.push(p.0[k] as f64 / 255.0);
                    }
                }
                Image::new(h, w, 3, data)
            }
            D::ImageRgb16(b) => {
                let mut data = Vec::with_capacity(h * w * 3);
                for p in b.pixels() {
                    for k in 0..3 {
                        data.push(p.0[k] as f64 / 65535.0);
                    }
                }
                Image::new(h, w, 3, data)
            }
            other => {
                return Err(Error::Format {
                    what: "png",
                    reason: format!("unsupported color type {:?}", other.color()),
                })
            }
        };
        Ok(img)
    }

    /// Encode as 16-bit PNG (grayscale or RGB by channel count).
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| -> u16 { (v.clamp(0.0, 1.0) * 65535.0).round() as u16 };
        match self.channels {
            1 => {
                let buf: Vec<u16> = self.data.iter().map(|&v| quant(v)).collect();
                let img = ::image::ImageBuffer::<::image::Luma<u16>, _>::from_raw(
                    self.width as u32,
                    self.height as u32,
                    buf,
                )
                .expect("buffer size matches dims");
                img.save(path)?;
            }
            3 => {
                let buf: Vec<u16> = self.data.iter().map(|&v| quant(v)).collect();
                let img = ::image::ImageBuffer::<::image::Rgb<u16>, _>::from_raw(
                    self.width as u32,
                    self.height as u32,
                    buf,
                )
                .expect("buffer size matches dims");
                img.save(path)?;
            }
            _ => unreachable!("channels validated at construction"),
        }
        Ok(())
    }

    /// Encode as 8-bit PNG.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                let img = ::image::ImageBuffer::<::image::Luma<u8>, _>::from_raw(
                    self.width as u32,
                    self.height as u32,
                    buf,
                )
                .expect("buffer size matches dims");
                img.save(path)?;
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                let img = ::image::ImageBuffer::<::image::Rgb<u8>, _>::from_raw(
                    self.width as u32,
                    self.height as u32,
                    buf,
                )
                .expect("buffer size matches dims");
                img.save(path)?;
            }
            _ => unreachable!("channels validated at construction"),
        }
        Ok(())
    }
}
