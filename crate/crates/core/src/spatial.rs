//! Block spread-spectrum payload watermark.
//!
//! Each `block × block` tile carries a keyed zero-mean ±1 carrier scaled by
//! `alpha` and signed by one payload bit; every bit owns the same number of
//! tiles. Extraction correlates the high-pass luminance residual with each
//! carrier and sums per bit.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster;
use crate::scalar::Real;
use crate::score::ProvenanceScore;
use crate::seed;

pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_PAYLOAD_LEN: usize = 32;
pub const DEFAULT_ALPHA: f64 = 0.02;
pub const MAX_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Payload {
    bits: Vec<u8>,
}

impl Payload {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.len() < 8 {
            return Err(Error::param(format!("payload needs at least 8 bits, got {}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::param("payload bits must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    pub fn random(seed: u64, len: usize) -> Result<Self> {
        let mut rng = seed::rng(seed);
        Self::new((0..len).map(|_| rng.random_range(0..=1u8)).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Fraction of positions where both payloads agree.
    pub fn bit_accuracy(&self, other: &Payload) -> f64 {
        let hits = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        hits as f64 / self.bits.len() as f64
    }

    /// Fraction of 8-bit groups that match exactly; a short tail counts as a group.
    pub fn byte_accuracy(&self, other: &Payload) -> f64 {
        let groups: Vec<bool> = self
            .bits
            .chunks(8)
            .zip(other.bits.chunks(8))
            .map(|(a, b)| a == b)
            .collect();
        groups.iter().filter(|&&ok| ok).count() as f64 / groups.len() as f64
    }

    /// MSB-first hex, zero-padding the last byte.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self
            .bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << (7 - i))))
            .collect();
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::param(format!("payload hex: {e}")))?;
        if bytes.len() * 8 < len {
            return Err(Error::param(format!("hex payload too short for {len} bits")));
        }
        let bits = (0..len).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
        Self::new(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadKeyFile {
    pub seed: u64,
    pub block: usize,
    pub payload_len: usize,
    pub alpha: f64,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadKey {
    params: SpreadKeyFile,
    /// `block²` entries per tile, each in {-1, 0, +1}, tiles in raster order.
    carriers: Vec<i8>,
    /// Payload bit owned by each tile.
    assignment: Vec<usize>,
}

pub fn make_spread_key(
    seed: u64,
    image_size: usize,
    block: usize,
    payload_len: usize,
    alpha: f64,
) -> Result<SpreadKey> {
    SpreadKey::from_file(SpreadKeyFile {
        seed,
        block,
        payload_len,
        alpha,
        image_size,
    })
}

impl SpreadKey {
    pub fn from_file(params: SpreadKeyFile) -> Result<Self> {
        let SpreadKeyFile {
            seed: key_seed,
            block,
            payload_len,
            alpha,
            image_size,
        } = params;
        if block == 0 || image_size == 0 || image_size % block != 0 {
            return Err(Error::param(format!(
                "block {block} does not divide image size {image_size}"
            )));
        }
        let tiles = (image_size / block).pow(2);
        if payload_len < 8 || tiles % payload_len != 0 {
            return Err(Error::param(format!(
                "payload length {payload_len} must be >= 8 and divide {tiles} blocks"
            )));
        }
        if !(alpha > 0.0 && alpha <= MAX_ALPHA) {
            return Err(Error::param(format!("alpha {alpha} outside (0, {MAX_ALPHA}]")));
        }

        let mut rng = seed::rng(seed::derive(key_seed, &["spread-key"]));
        let area = block * block;
        let mut template: Vec<i8> = (0..area).map(|i| if i < area / 2 { 1 } else { -1 }).collect();
        if area % 2 == 1 {
            template[area - 1] = 0;
        }
        let mut carriers = Vec::with_capacity(tiles * area);
        for _ in 0..tiles {
            let mut c = template.clone();
            c.shuffle(&mut rng);
            carriers.extend(c);
        }
        let mut order: Vec<usize> = (0..tiles).collect();
        order.shuffle(&mut rng);
        let mut assignment = vec![0; tiles];
        for (pos, &tile) in order.iter().enumerate() {
            assignment[tile] = pos % payload_len;
        }
        Ok(Self {
            params,
            carriers,
            assignment,
        })
    }

    pub fn params(&self) -> SpreadKeyFile {
        self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn payload_len(&self) -> usize {
        self.params.payload_len
    }

    pub fn tiles(&self) -> usize {
        self.assignment.len()
    }

    pub fn carrier(&self, tile: usize) -> &[i8] {
        let area = self.params.block * self.params.block;
        &self.carriers[tile * area..(tile + 1) * area]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= MAX_ALPHA) {
            return Err(Error::param(format!("alpha {alpha} outside (0, {MAX_ALPHA}]")));
        }
        let mut key = self.clone();
        key.params.alpha = alpha;
        Ok(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.params).expect("key serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: SpreadKeyFile =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("spatial key: {e}")))?;
        Self::from_file(params)
    }

    fn check_image<T: Real>(&self, image: &ImageBuffer<T>) -> Result<()> {
        let n = self.params.image_size;
        if image.width() != n || image.height() != n {
            return Err(Error::param(format!(
                "spatial key expects {n}×{n} images, got {}×{}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Signed ±1 carrier field for a payload, one value per pixel.
    fn pattern(&self, payload: &Payload) -> Vec<i8> {
        let n = self.params.image_size;
        let b = self.params.block;
        let per_row = n / b;
        let mut field = vec![0i8; n * n];
        for tile in 0..self.tiles() {
            let sign: i8 = if payload.bits[self.assignment[tile]] == 1 { 1 } else { -1 };
            let (ty, tx) = (tile / per_row, tile % per_row);
            for (k, &c) in self.carrier(tile).iter().enumerate() {
                field[(ty * b + k / b) * n + tx * b + k % b] = sign * c;
            }
        }
        field
    }
}

pub fn embed<T: Real>(image: &ImageBuffer<T>, key: &SpreadKey, payload: &Payload) -> Result<ImageBuffer<T>> {
    key.check_image(image)?;
    if payload.len() != key.payload_len() {
        return Err(Error::param(format!(
            "payload has {} bits, key expects {}",
            payload.len(),
            key.payload_len()
        )));
    }
    let pattern = key.pattern(payload);
    let alpha = T::lit(key.alpha());
    let ch = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match pattern[i / ch] {
            0 => v,
            s if s > 0 => v + alpha,
            _ => v - alpha,
        })
        .collect();
    Ok(ImageBuffer::from_clamped(image.width(), image.height(), ch, data))
}

/// Per-bit correlation statistics.
pub fn bit_statistics<T: Real>(image: &ImageBuffer<T>, key: &SpreadKey) -> Result<Vec<f64>> {
    key.check_image(image)?;
    let n = key.params.image_size;
    let b = key.params.block;
    let lum = image.luminance();
    let smooth = raster::box3(&lum, n, n);
    let per_row = n / b;
    let mut stats = vec![0.0; key.payload_len()];
    for tile in 0..key.tiles() {
        let (ty, tx) = (tile / per_row, tile % per_row);
        let mut corr = T::zero();
        for (k, &c) in key.carrier(tile).iter().enumerate() {
            if c == 0 {
                continue;
            }
            let i = (ty * b + k / b) * n + tx * b + k % b;
            let r = lum[i] - smooth[i];
            corr = if c > 0 { corr + r } else { corr - r };
        }
        stats[key.assignment[tile]] += corr.as_f64();
    }
    Ok(stats)
}

/// Decodes the payload; a zero statistic decodes to 0.
pub fn extract<T: Real>(image: &ImageBuffer<T>, key: &SpreadKey) -> Result<Payload> {
    let bits = bit_statistics(image, key)?
        .into_iter()
        .map(|s| u8::from(s > 0.0))
        .collect();
    Payload::new(bits)
}

/// Maps bit accuracy to a provenance score: chance (0.5) → 0, perfect → 1.
pub fn score_from_accuracy(acc: f64) -> ProvenanceScore {
    ProvenanceScore::clamped(2.0 * acc - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDetection {
    pub score: ProvenanceScore,
    pub bit_accuracy: f64,
    pub byte_accuracy: f64,
}

pub fn detect_detailed<T: Real>(
    image: &ImageBuffer<T>,
    key: &SpreadKey,
    expected: &Payload,
) -> Result<SpatialDetection> {
    if expected.len() != key.payload_len() {
        return Err(Error::param("expected payload length does not match key"));
    }
    let got = extract(image, key)?;
    let bit_accuracy = got.bit_accuracy(expected);
    Ok(SpatialDetection {
        score: score_from_accuracy(bit_accuracy),
        bit_accuracy,
        byte_accuracy: got.byte_accuracy(expected),
    })
}

pub fn detect<T: Real>(image: &ImageBuffer<T>, key: &SpreadKey, expected: &Payload) -> Result<ProvenanceScore> {
    detect_detailed(image, key, expected).map(|d| d.score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SpreadKey {
        make_spread_key(5, 256, 8, 32, DEFAULT_ALPHA).unwrap()
    }

    #[test]
    fn block_arithmetic() {
        let k = key();
        assert_eq!(k.tiles(), 1024);
        let mut owned = vec![0usize; 32];
        for &bit in k.assignment() {
            owned[bit] += 1;
        }
        assert!(owned.iter().all(|&c| c == 1024 / 32));
    }

    #[test]
    fn carriers_zero_mean_and_deterministic() {
        let k = key();
        for t in 0..k.tiles() {
            assert_eq!(k.carrier(t).iter().map(|&c| c as i32).sum::<i32>(), 0);
        }
        assert_eq!(k, key());
        assert_ne!(k.carrier(0), make_spread_key(6, 256, 8, 32, 0.02).unwrap().carrier(0));
        // odd tile area leaves one zero entry
        let odd = make_spread_key(1, 15, 3, 25, 0.02).unwrap();
        for t in 0..odd.tiles() {
            assert_eq!(odd.carrier(t).iter().filter(|&&c| c == 0).count(), 1);
            assert_eq!(odd.carrier(t).iter().map(|&c| c as i32).sum::<i32>(), 0);
        }
    }

    #[test]
    fn parameter_errors() {
        assert!(make_spread_key(1, 256, 8, 33, 0.02).is_err());
        assert!(make_spread_key(1, 256, 7, 32, 0.02).is_err());
        assert!(make_spread_key(1, 256, 8, 4, 0.02).is_err());
        assert!(make_spread_key(1, 256, 8, 32, 0.0).is_err());
        assert!(make_spread_key(1, 256, 8, 32, 0.11).is_err());
        assert!(make_spread_key(1, 256, 8, 32, 0.1).is_ok());
    }

    #[test]
    fn mid_gray_round_trip_and_bound() {
        let k = key();
        let p = Payload::random(3, 32).unwrap();
        let gray = ImageBuffer::<f64>::filled(256, 256, 3, 0.5);
        let marked = embed(&gray, &k, &p).unwrap();
        assert_eq!(extract(&marked, &k).unwrap(), p);
        assert_eq!(detect(&marked, &k, &p).unwrap().value(), 1.0);
        for (a, b) in gray.data().iter().zip(marked.data()) {
            assert!((a - b).abs() <= DEFAULT_ALPHA + 1e-9);
        }
    }

    #[test]
    fn blank_image_ties_to_zero() {
        let gray = ImageBuffer::<f64>::filled(256, 256, 3, 0.5);
        assert!(extract(&gray, &key()).unwrap().bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn score_mapping() {
        assert_eq!(score_from_accuracy(1.0).value(), 1.0);
        assert_eq!(score_from_accuracy(0.5).value(), 0.0);
        assert_eq!(score_from_accuracy(0.2).value(), 0.0);
        let s = score_from_accuracy(19.0 / 32.0).value();
        assert!((s - 0.1875).abs() < 1e-15);
        assert!(s < 0.20);
    }

    #[test]
    fn size_and_length_mismatch() {
        let small = ImageBuffer::<f64>::filled(128, 128, 3, 0.5);
        let p = Payload::random(1, 32).unwrap();
        assert!(embed(&small, &key(), &p).is_err());
        assert!(extract(&small, &key()).is_err());
        let short = Payload::random(1, 16).unwrap();
        let gray = ImageBuffer::<f64>::filled(256, 256, 3, 0.5);
        assert!(embed(&gray, &key(), &short).is_err());
    }

    #[test]
    fn hex_and_accuracies() {
        let p = Payload::new(vec![1, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(p.to_hex(), "a1ff");
        assert_eq!(Payload::from_hex("a1ff", 16).unwrap(), p);
        let mut flipped = p.bits().to_vec();
        flipped[15] ^= 1;
        let q = Payload::new(flipped).unwrap();
        assert_eq!(p.bit_accuracy(&q), 15.0 / 16.0);
        assert_eq!(p.byte_accuracy(&q), 0.5);
        assert!(Payload::new(vec![0; 7]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let k = key();
        assert_eq!(SpreadKey::from_json(&k.to_json()).unwrap(), k);
    }
}
