//! Planar RGB images with values in `[0, 1]` and the geometric operations
//! shared by augmentation and the probes.

use crate::error::{Result, StellarError};

/// Channel-major (`C×H×W`) float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Axis-aligned crop rectangle in pixel coordinates (may be fractional).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn full(image: &Image) -> Self {
        Self {
            top: 0.0,
            left: 0.0,
            height: image.height as f64,
            width: image.width as f64,
        }
    }

    pub fn area(&self) -> f64 {
        self.height * self.width
    }
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(StellarError::shape(
                "image",
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Integer crop; errors when the window leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(StellarError::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Image {
            channels: self.channels,
            height,
            width,
            data,
        })
    }

    /// Bilinear resample of `window` onto an `out_h × out_w` grid using
    /// pixel-centre alignment. A full window at the same size is a copy.
    pub fn resample(&self, window: CropBox, out_h: usize, out_w: usize) -> Image {
        if window == CropBox::full(self) && out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = window.height / out_h as f64;
        let sx = window.width / out_w as f64;
        let mut out = Image::filled(self.channels, out_h, out_w, 0.0);
        let clamp = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64);
        for y in 0..out_h {
            let fy = clamp(window.top + (y as f64 + 0.5) * sy - 0.5, self.height);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..out_w {
                let fx = clamp(window.left + (x as f64 + 0.5) * sx - 0.5, self.width);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, y, x, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resample(CropBox::full(self), out_h, out_w)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Flattened `patch × patch` tiles in raster order, each laid out as
    /// `[c][py][px]`, giving `n × (C·patch²)` values.
    pub fn to_patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(StellarError::invalid(format!(
                "{}x{} image is not divisible into {patch}-pixel patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..self.channels {
                    for y in 0..patch {
                        let row = (c * self.height + py * patch + y) * self.width + px * patch;
                        out.extend_from_slice(&self.data[row..row + patch]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`to_patches`](Self::to_patches).
    pub fn from_patches(patches: &[f32], channels: usize, height: usize, width: usize, patch: usize) -> Result<Image> {
        if patch == 0 || height % patch != 0 || width % patch != 0 || patches.len() != channels * height * width {
            return Err(StellarError::invalid("patch layout does not match image size"));
        }
        let mut img = Image::filled(channels, height, width, 0.0);
        let gw = width / patch;
        let per = channels * patch * patch;
        for (i, chunk) in patches.chunks(per).enumerate() {
            let (py, px) = (i / gw, i % gw);
            for c in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        img.set(c, py * patch + y, px * patch + x, chunk[(c * patch + y) * patch + x]);
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
