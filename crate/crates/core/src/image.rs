//! `ImagePlane`: the raster type shared by every module.
//!
//! Values live in [-1, 1] and are stored HWC row-major. 8-bit PNG files map
//! through `v / 127.5 - 1`.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite pixel value {v}")));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImagePlane::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid dimensions")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImagePlane::new(height, width, channels, data).expect("valid dimensions")
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

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Pixel read with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImagePlane) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &ImagePlane, f: impl Fn(f64, f64) -> f64) -> Result<ImagePlane> {
        self.ensure_same_shape(other)?;
        Ok(ImagePlane {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    pub fn clamp_unit(&self) -> ImagePlane {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    /// Columns `[x0, x0 + w)`.
    pub fn crop_cols(&self, x0: usize, w: usize) -> Result<ImagePlane> {
        if w == 0 || x0 + w > self.width {
            return Err(Error::shape(format!(
                "column range {x0}..{} outside width {}",
                x0 + w,
                self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(self.height * w * c);
        for y in 0..self.height {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        ImagePlane::new(self.height, w, c, data)
    }

    /// Widens to `w` columns by repeating the last column.
    pub fn pad_right_replicate(&self, w: usize) -> ImagePlane {
        if w <= self.width {
            return self.clone();
        }
        ImagePlane::from_fn(self.height, w, self.channels, |y, x, c| {
            self.get(y, x.min(self.width - 1), c)
        })
    }

    /// Channel conversion: gray → RGB replicates, RGB → gray averages.
    pub fn to_channels(&self, c: usize) -> Result<ImagePlane> {
        match (self.channels, c) {
            (a, b) if a == b => Ok(self.clone()),
            (1, n) => Ok(ImagePlane::from_fn(self.height, self.width, n, |y, x, _| self.get(y, x, 0))),
            (n, 1) => Ok(ImagePlane::from_fn(self.height, self.width, 1, |y, x, _| {
                (0..n).map(|ch| self.get(y, x, ch)).sum::<f64>() / n as f64
            })),
            (a, b) => Err(Error::shape(format!("cannot convert {a} channels to {b}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &ImagePlane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// PSNR for the [-1, 1] value range (peak-to-peak 2).
    pub fn psnr(&self, other: &ImagePlane) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (4.0 / mse).log10()
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<ImagePlane> {
        ImagePlane::new(height, width, channels, bytes.iter().map(|&b| u8_to_unit(b)).collect())
    }

    /// Reads an 8-bit PNG; grayscale stays single channel, everything else becomes RGB.
    pub fn load_png(path: &Path) -> Result<ImagePlane> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: "png",
                msg: format!("{}: {other}", path.display()),
            },
        })?;
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let g = img.to_luma8();
            ImagePlane::from_u8(g.height() as usize, g.width() as usize, 1, g.as_raw())
        } else {
            let g = img.to_rgb8();
            ImagePlane::from_u8(g.height() as usize, g.width() as usize, 3, g.as_raw())
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: "png",
                msg: other.to_string(),
            },
        })
    }
}

pub fn u8_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn unit_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
