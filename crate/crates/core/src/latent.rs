//! Fourier-ring latent watermark.
//!
//! A keyed set of concentric rings is written into the centred spectrum of
//! a seeded Gaussian latent before it is rendered to pixels. Detection
//! inverts the render (lossily, by block averaging), normalizes the field's
//! scale and measures the mean squared distance between the masked spectrum
//! and the key's ring values.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster;
use crate::scalar::Real;
use crate::score::ProvenanceScore;
use crate::seed;
use crate::spectrum::{centered_spectrum, inverse_centered, mirror_index, Cx};

pub const DEFAULT_SIDE: usize = 64;
pub const DEFAULT_R_MIN: usize = 4;
pub const DEFAULT_R_MAX: usize = 12;

/// Pixel value of a zero latent and the slope of the latent-to-pixel map.
const RENDER_MID: f64 = 0.5;
const RENDER_GAIN: f64 = 0.125;
/// Variance the inverted latent is rescaled to before comparison.
const REFERENCE_VARIANCE: f64 = 1.0;
/// Fraction of the mean unwatermarked distance used as σ².
pub const SIGMA_SQ_FRACTION: f64 = 0.9;

/// Square real field standing in for a generator's initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField<T> {
    side: usize,
    values: Vec<T>,
}

impl<T: Real> LatentField<T> {
    pub fn new(side: usize, values: Vec<T>) -> Result<Self> {
        if !side.is_power_of_two() || side < 2 {
            return Err(Error::param(format!("latent side {side} is not a power of two")));
        }
        if values.len() != side * side {
            return Err(Error::param("latent value count does not match side²"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("latent values must be finite"));
        }
        Ok(Self { side, values })
    }

    /// Independent standard-normal samples.
    pub fn gaussian(side: usize, noise_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(noise_seed);
        let values = (0..side * side)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(side, values)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn spectrum(&self) -> Vec<Cx<T>> {
        centered_spectrum(&self.values, self.side)
    }
}

/// Serialized form of a [`RingKey`]; ring values and mask are rebuilt from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingKeyFile {
    pub seed: u64,
    pub side: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub k_amp: f64,
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingKey<T> {
    params: RingKeyFile,
    /// Centred-spectrum indices carrying the signature (one half-plane).
    mask: Vec<usize>,
    /// Target value for each entry of `mask`.
    ring_values: Vec<Cx<T>>,
}

impl<T: Real> RingKey<T> {
    pub fn from_file(params: RingKeyFile) -> Result<Self> {
        let RingKeyFile {
            seed: key_seed,
            side,
            r_min,
            r_max,
            k_amp,
            sigma_sq,
        } = params;
        if !side.is_power_of_two() || side < 4 {
            return Err(Error::param(format!("key side {side} is not a power of two >= 4")));
        }
        if !(0 < r_min && r_min < r_max && r_max <= side / 2) {
            return Err(Error::param(format!(
                "ring radii need 0 < r_min < r_max <= side/2, got {r_min}, {r_max} for side {side}"
            )));
        }
        if !(k_amp > 0.0 && k_amp.is_finite()) {
            return Err(Error::param("k_amp must be positive"));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::param("sigma_sq must be positive"));
        }

        let mut rng = seed::rng(seed::derive(key_seed, &["ring-key"]));
        let rings: Vec<Cx<T>> = (r_min..r_max)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Cx::new(T::lit(re * k_amp), T::lit(im * k_amp))
            })
            .collect();

        let half = side as isize / 2;
        let mut mask = Vec::new();
        let mut ring_values = Vec::new();
        for row in 0..side {
            for col in 0..side {
                let (u, v) = (row as isize - half, col as isize - half);
                let in_half_plane = v > 0 || (v == 0 && u > 0);
                let radius = ((u * u + v * v) as f64).sqrt();
                if in_half_plane && radius >= r_min as f64 && radius < r_max as f64 {
                    mask.push(row * side + col);
                    ring_values.push(rings[radius.floor() as usize - r_min]);
                }
            }
        }
        Ok(Self {
            params,
            mask,
            ring_values,
        })
    }

    pub fn params(&self) -> RingKeyFile {
        self.params
    }

    pub fn side(&self) -> usize {
        self.params.side
    }

    pub fn sigma_sq(&self) -> f64 {
        self.params.sigma_sq
    }

    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn ring_values(&self) -> &[Cx<T>] {
        &self.ring_values
    }

    pub fn with_sigma_sq(&self, sigma_sq: f64) -> Result<Self> {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::param("sigma_sq must be positive"));
        }
        let mut key = self.clone();
        key.params.sigma_sq = sigma_sq;
        Ok(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.params).expect("key serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: RingKeyFile =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("latent key: {e}")))?;
        Self::from_file(params)
    }

    /// Mean squared masked-spectrum distance of an already normalized field.
    fn masked_distance(&self, field: &[T]) -> f64 {
        let spec = centered_spectrum(field, self.side());
        let total = self
            .mask
            .iter()
            .zip(&self.ring_values)
            .fold(0.0, |acc, (&i, &target)| acc + (spec[i] - target).norm_sqr().as_f64());
        total / self.mask.len() as f64
    }
}

/// Key with ring amplitude `k_amp = side` and an uncalibrated σ² equal to
/// 0.9× the expected distance of a unit white field,
/// `0.9 · (side² + 2·k_amp²)`. Run [`calibrate_sigma_sq`] before benchmarking.
pub fn make_ring_key<T: Real>(seed: u64, side: usize, r_min: usize, r_max: usize) -> Result<RingKey<T>> {
    let k_amp = side as f64;
    let sigma_sq = SIGMA_SQ_FRACTION * ((side * side) as f64 + 2.0 * k_amp * k_amp);
    RingKey::from_file(RingKeyFile {
        seed,
        side,
        r_min,
        r_max,
        k_amp,
        sigma_sq,
    })
}

/// Seeded Gaussian latent with the key's rings written into its spectrum.
pub fn embed<T: Real>(key: &RingKey<T>, noise_seed: u64) -> LatentField<T> {
    embed_with_residue(key, noise_seed).0
}

/// As [`embed`], also returning the largest imaginary residue of the
/// inverse transform.
pub fn embed_with_residue<T: Real>(key: &RingKey<T>, noise_seed: u64) -> (LatentField<T>, T) {
    let side = key.side();
    let base = LatentField::<T>::gaussian(side, noise_seed).expect("key side is a valid latent side");
    let mut spec = base.spectrum();
    for (&i, &target) in key.mask.iter().zip(&key.ring_values) {
        spec[i] = target;
        spec[mirror_index(i / side, i % side, side)] = target.conj();
    }
    let (values, residue) = inverse_centered(&spec, side);
    (LatentField { side, values }, residue)
}

/// Upsamples a latent to pixels with `z ↦ clamp(0.5 + 0.125 z)` on three
/// identical channels.
pub fn render<T: Real>(latent: &LatentField<T>, out_size: usize) -> Result<ImageBuffer<T>> {
    if !out_size.is_power_of_two() || out_size < latent.side {
        return Err(Error::param(format!(
            "render size {out_size} must be a power of two >= latent side {}",
            latent.side
        )));
    }
    let up = raster::resize_bilinear(&latent.values, latent.side, latent.side, out_size, out_size);
    let (mid, gain) = (T::lit(RENDER_MID), T::lit(RENDER_GAIN));
    let plane: Vec<T> = up.into_iter().map(|z| mid + gain * z).collect();
    Ok(ImageBuffer::gray_to_rgb(out_size, out_size, &plane))
}

/// Approximate inverse of [`render`]: luminance, block mean, affine unmap.
pub fn invert<T: Real>(image: &ImageBuffer<T>, latent_side: usize) -> Result<LatentField<T>> {
    if !image.is_square() {
        return Err(Error::param(format!(
            "inversion needs a square image, got {}×{}",
            image.width(),
            image.height()
        )));
    }
    let n = image.width();
    if latent_side == 0 || n % latent_side != 0 {
        return Err(Error::param(format!(
            "image side {n} is not divisible by latent side {latent_side}"
        )));
    }
    let lum = image.luminance();
    let down = raster::block_mean(&lum, n, n, n / latent_side);
    let (mid, gain) = (T::lit(RENDER_MID), T::lit(RENDER_GAIN));
    LatentField::new(latent_side, down.into_iter().map(|v| (v - mid) / gain).collect())
}

/// Masked spectral MSE between the inverted, scale-normalized image and the key.
pub fn masked_mse<T: Real>(image: &ImageBuffer<T>, key: &RingKey<T>) -> Result<f64> {
    let latent = invert(image, key.side())?;
    let mut field = latent.values;
    let m = raster::mean(&field);
    let var = raster::variance(&field);
    let gain = if var > T::zero() {
        (T::lit(REFERENCE_VARIANCE) / var).sqrt()
    } else {
        T::zero()
    };
    field.iter_mut().for_each(|v| *v = (*v - m) * gain);
    Ok(key.masked_distance(&field))
}

/// `max(0, 1 − MSE/σ²)`, clamped to at most 1.
pub fn detect<T: Real>(image: &ImageBuffer<T>, key: &RingKey<T>) -> Result<ProvenanceScore> {
    let mse = masked_mse(image, key)?;
    Ok(ProvenanceScore::clamped(1.0 - mse / key.sigma_sq()))
}

/// Sets σ² to 0.9× the mean masked distance over unwatermarked covers.
pub fn calibrate_sigma_sq<'a, T: Real + 'a>(
    key: &RingKey<T>,
    covers: impl IntoIterator<Item = &'a ImageBuffer<T>>,
) -> Result<RingKey<T>> {
    let mut total = 0.0;
    let mut n = 0usize;
    for cover in covers {
        total += masked_mse(cover, key)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Calibration("no covers for sigma_sq calibration".into()));
    }
    key.with_sigma_sq(SIGMA_SQ_FRACTION * total / n as f64)
}
