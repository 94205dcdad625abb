//! Cover images: a seeded synthetic generator and a directory loader.
//!
//! Synthetic covers are a smooth two-colour gradient, two to four soft
//! blobs and a luminance texture band-limited by a difference of Gaussians
//! (σ = 6 and 20 pixels at 256²). The texture gives the spread-spectrum
//! payload something to hide in while keeping pixel-scale energy low.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;
use crate::seed;
use crate::spectrum::{fft2, Cx};

pub const DEFAULT_SIZE: usize = 256;

const TEXTURE_AMPLITUDE: f64 = 0.25;
const TEXTURE_SIGMA_FINE: f64 = 6.0;
const TEXTURE_SIGMA_COARSE: f64 = 20.0;
const BLOB_EDGE_SHARPNESS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub size: usize,
    pub master_seed: u64,
    pub source: CorpusSource,
}

impl CorpusSpec {
    pub fn synthetic(count: usize, size: usize, master_seed: u64) -> Self {
        Self {
            count,
            size,
            master_seed,
            source: CorpusSource::Synthetic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::param("corpus count must be at least 1"));
        }
        if self.size < 64 || !self.size.is_power_of_two() {
            return Err(Error::param(format!(
                "corpus size must be a power of two >= 64, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Deterministic synthetic cover number `index`.
pub fn gen_cover<T: Real>(spec: &CorpusSpec, index: usize) -> Result<ImageBuffer<T>> {
    spec.validate()?;
    if spec.source != CorpusSource::Synthetic {
        return Err(Error::param("gen_cover requires a synthetic corpus"));
    }
    if index >= spec.count {
        return Err(Error::Bounds {
            index,
            count: spec.count,
        });
    }
    let n = spec.size;
    let mut rng = seed::rng(seed::derive(spec.master_seed, &["cover", &index.to_string()]));

    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let centre = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let radius = rng.random_range(0.08..0.25);
            let colour = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
            (centre, radius, colour)
        })
        .collect();
    let texture = band_limited_texture::<T>(&mut rng, n);

    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(n * n * 3);
    for py in 0..n {
        let y = (py as f64 + 0.5) / n as f64;
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64;
            let t = cos_t * (x - 0.5) + sin_t * (y - 0.5) + 0.5;
            let mut rgb: [f64; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
            for (centre, radius, colour) in &blobs {
                let d = ((x - centre[0]).powi(2) + (y - centre[1]).powi(2)).sqrt() / radius;
                let w = 1.0 / (1.0 + ((d - 1.0) * BLOB_EDGE_SHARPNESS).exp());
                for c in 0..3 {
                    rgb[c] += colour[c] * w;
                }
            }
            let tex = texture[py * n + px];
            data.extend(rgb.iter().map(|&v| T::lit(v) + tex));
        }
    }
    Ok(ImageBuffer::from_clamped(n, n, 3, data))
}

/// White noise filtered by a difference-of-Gaussians transfer function and
/// scaled to a fixed standard deviation.
fn band_limited_texture<T: Real>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    let scale = n as f64 / DEFAULT_SIZE as f64;
    let (s1, s2) = (TEXTURE_SIGMA_FINE * scale, TEXTURE_SIGMA_COARSE * scale);
    let mut buf: Vec<Cx<T>> = (0..n * n)
        .map(|_| Cx::new(T::lit(rng.sample::<f64, _>(StandardNormal)), T::zero()))
        .collect();
    fft2(&mut buf, n, n, FftDirection::Forward);
    let freq = |k: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    let two_pi_sq = 2.0 * std::f64::consts::PI.powi(2);
    for ky in 0..n {
        for kx in 0..n {
            let f2 = freq(kx).powi(2) + freq(ky).powi(2);
            let h = (-two_pi_sq * s1 * s1 * f2).exp() - (-two_pi_sq * s2 * s2 * f2).exp();
            buf[ky * n + kx] = buf[ky * n + kx] * T::lit(h);
        }
    }
    fft2(&mut buf, n, n, FftDirection::Inverse);
    let tex: Vec<T> = buf.into_iter().map(|c| c.re).collect();
    let sd = crate::raster::variance(&tex).sqrt();
    let gain = T::lit(TEXTURE_AMPLITUDE) / sd;
    tex.into_iter().map(|v| v * gain).collect()
}

/// Loads every file in `dir` in lexicographic filename order, converted to
/// RGB and resampled to `size × size`.
pub fn load_images<T: Real>(dir: &Path, size: usize) -> Result<Vec<ImageBuffer<T>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    paths
        .iter()
        .map(|p| ImageBuffer::<T>::load_png(p).map(|img| img.to_rgb().resize(size, size)))
        .collect()
}
