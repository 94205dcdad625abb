//! The raster type every attack and score operates on.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster;
use crate::scalar::Real;

/// H×W×C raster with values in `[0, 1]`, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("channels must be 1 or 3, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("image dimensions must be nonzero"));
        }
        if data.len() != width * height * channels {
            return Err(Error::param(format!(
                "buffer of {} values does not match {width}×{height}×{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::param(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub(crate) fn from_clamped(width: usize, height: usize, channels: usize, mut data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        data.iter_mut().for_each(|v| *v = v.unit_clamp());
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self::from_clamped(width, height, channels, vec![value; width * height * channels])
    }

    /// Replicates one plane into three identical channels.
    pub fn gray_to_rgb(width: usize, height: usize, plane: &[T]) -> Self {
        let data = plane.iter().flat_map(|&v| [v, v, v]).collect();
        Self::from_clamped(width, height, 3, data)
    }

    /// Interleaves separate channel planes.
    pub(crate) fn from_planes(width: usize, height: usize, planes: &[Vec<T>]) -> Self {
        let channels = planes.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for i in 0..width * height {
            for p in planes {
                data.push(p[i]);
            }
        }
        Self::from_clamped(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Extracts channel `c` as a plane.
    pub fn plane(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn planes(&self) -> Vec<Vec<T>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Channel mean per pixel.
    pub fn luminance(&self) -> Vec<T> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let n = T::from_count(self.channels);
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect()
    }

    /// Applies `f` to every value and clamps the result.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_clamped(self.width, self.height, self.channels, data)
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            self.clone()
        } else {
            Self::gray_to_rgb(self.width, self.height, &self.data)
        }
    }

    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let planes: Vec<Vec<T>> = self
            .planes()
            .iter()
            .map(|p| raster::resize_bilinear(p, self.width, self.height, width, height))
            .collect();
        Self::from_planes(width, height, &planes)
    }

    /// Square window of side `side` centred in the frame.
    pub fn center_crop(&self, side: usize) -> Self {
        let ox = (self.width - side) / 2;
        let oy = (self.height - side) / 2;
        let mut data = Vec::with_capacity(side * side * self.channels);
        for y in oy..oy + side {
            let start = (y * self.width + ox) * self.channels;
            data.extend_from_slice(&self.data[start..start + side * self.channels]);
        }
        Self::from_clamped(side, side, self.channels, data)
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Fraction of samples that differ between two same-shaped images.
    pub fn fraction_differing(&self, other: &Self) -> f64 {
        let n = self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count();
        n as f64 / self.data.len() as f64
    }

    /// Decodes an 8-bit PNG (or any format the `image` crate handles) to RGB, v/255.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let inv = T::one() / T::lit(255.0);
        let data = rgb.into_raw().into_iter().map(|b| T::from_count(b as usize) * inv).collect();
        Ok(Self::from_clamped(w as usize, h as usize, 3, data))
    }

    /// Writes an 8-bit PNG, rounding to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(|e| {
            Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }

    /// Lossless float raster used between pipeline stages: magic `PMF1`,
    /// width, height, channels as little-endian u32, then f64 samples.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 8);
        buf.extend_from_slice(RAW_MAGIC);
        for d in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let decode_err = |reason: &str| Error::Decode {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if buf.len() < 16 || &buf[..4] != RAW_MAGIC {
            return Err(decode_err("not a PMF1 raster"));
        }
        let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        if buf.len() != 16 + w * h * c * 8 {
            return Err(decode_err("truncated raster"));
        }
        let data = buf[16..]
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Self::new(w, h, c, data).map_err(|e| decode_err(&e.to_string()))
    }
}

const RAW_MAGIC: &[u8; 4] = b"PMF1";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(ImageBuffer::<f64>::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.01]).is_err());
        assert!(ImageBuffer::<f64>::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(ImageBuffer::<f64>::new(2, 1, 1, vec![0.0]).is_err());
        assert!(ImageBuffer::<f64>::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn luminance_is_channel_mean() {
        let img = ImageBuffer::<f64>::new(1, 1, 3, vec![0.0, 0.3, 0.9]).unwrap();
        assert!((img.luminance()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn center_crop_picks_middle() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let img = ImageBuffer::new(4, 4, 1, data).unwrap();
        let c = img.center_crop(2);
        assert_eq!(c.data(), &[5.0 / 16.0, 6.0 / 16.0, 9.0 / 16.0, 10.0 / 16.0]);
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pmf");
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.1234567).fract()).collect();
        let img = ImageBuffer::new(2, 2, 3, data).unwrap();
        img.write_raw(&path).unwrap();
        assert_eq!(ImageBuffer::<f64>::read_raw(&path).unwrap(), img);
    }
}
