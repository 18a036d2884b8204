//! In-memory images and PNG I/O.

use std::path::Path;

use crate::{Error, Result};

/// Row-major `height x width x channels` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!("{height}x{width}x{channels} does not hold {} values", data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    data.push(f(r, c, k));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize, k: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + k]
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Zero padding of `pad` pixels on every side.
    pub fn padded(&self, pad: usize) -> Image {
        if pad == 0 {
            return self.clone();
        }
        let (h, w) = (self.height + 2 * pad, self.width + 2 * pad);
        Image::from_fn(h, w, self.channels, |r, c, k| {
            if r < pad || c < pad || r >= pad + self.height || c >= pad + self.width {
                0.0
            } else {
                self.get(r - pad, c - pad, k)
            }
        })
    }

    /// Removes `pad` pixels from every side.
    pub fn cropped(&self, pad: usize) -> Result<Image> {
        if 2 * pad >= self.height || 2 * pad >= self.width {
            return Err(Error::invalid("crop", format!("cannot remove {pad} px from {}x{}", self.height, self.width)));
        }
        Ok(self.crop(pad, pad, self.height - 2 * pad, self.width - 2 * pad))
    }

    /// Sub-window with its top-left corner at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, self.channels, |r, c, k| self.get(top + r, left + c, k))
    }

    /// Keeps channels `start..end`.
    pub fn select_channels(&self, start: usize, end: usize) -> Image {
        Image::from_fn(self.height, self.width, end - start, |r, c, k| self.get(r, c, start + k))
    }

    pub fn mean_color(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for px in self.data.chunks(self.channels) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = self.num_pixels() as f64;
        acc.iter().map(|a| a / n).collect()
    }

    /// 8-bit quantization used for PNG export.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::invalid("png", format!("expected 3 channels, got {}", self.channels)));
        }
        Ok(self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8()?;
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8).map_err(|e| {
            Error::Decode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }
        })
    }

    /// Decodes any PNG into RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub(crate) fn from_dynamic(img: &image::DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let img = Image::from_fn(5, 7, 3, |r, c, k| (r * 100 + c * 10 + k) as f64);
        let p = img.padded(2);
        assert_eq!((p.height(), p.width()), (9, 11));
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.cropped(2).unwrap(), img);
    }

    #[test]
    fn png_round_trip_of_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(4, 6, 3, |r, c, k| ((r * 6 + c) * 3 + k) as f64 / 255.0);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8().unwrap(), img.to_rgb8().unwrap());
    }
}
