//! Attack simulation: scheduled single-vector attacks, each returning an
//! image of the input's size.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster;
use crate::scalar::Real;
use crate::score::Codec;
use crate::seed;

/// Number of equal intensity steps per attack family.
pub const INTERVALS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackKind {
    Control,
    Crop,
    Brightness,
    Inpaint,
    Regen,
    External,
}

impl AttackKind {
    /// The families a run can schedule, in report order.
    pub const SCHEDULED: [AttackKind; 5] = [
        AttackKind::Control,
        AttackKind::Crop,
        AttackKind::Brightness,
        AttackKind::Inpaint,
        AttackKind::Regen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Control => "control",
            AttackKind::Crop => "crop",
            AttackKind::Brightness => "brightness",
            AttackKind::Inpaint => "inpaint",
            AttackKind::Regen => "regen",
            AttackKind::External => "external",
        }
    }

    /// Maps labels used by external pipelines onto families; unknown labels
    /// become [`AttackKind::External`].
    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "control" | "none" => AttackKind::Control,
            "crop" | "cropping" => AttackKind::Crop,
            "brightness" => AttackKind::Brightness,
            "inpaint" | "inpainting" => AttackKind::Inpaint,
            "regen" | "img2img" => AttackKind::Regen,
            _ => AttackKind::External,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "control" => Ok(AttackKind::Control),
            "crop" => Ok(AttackKind::Crop),
            "brightness" => Ok(AttackKind::Brightness),
            "inpaint" => Ok(AttackKind::Inpaint),
            "regen" => Ok(AttackKind::Regen),
            "external" => Ok(AttackKind::External),
            other => Err(Error::param(format!("unknown attack kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScheduleRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::param(format!("schedule range needs lo < hi, got {lo}..{hi}")));
        }
        Ok(Self { lo, hi })
    }

    /// Linear step `interval` of [`INTERVALS`]; hits `lo` and `hi` exactly.
    pub fn at(&self, interval: usize) -> Result<f64> {
        check_interval(interval)?;
        let t = (interval - 1) as f64 / (INTERVALS - 1) as f64;
        Ok(self.lo * (1.0 - t) + self.hi * t)
    }
}

fn check_interval(interval: usize) -> Result<()> {
    if (1..=INTERVALS).contains(&interval) {
        Ok(())
    } else {
        Err(Error::param(format!("interval {interval} outside 1..={INTERVALS}")))
    }
}

/// Intensity table per family: crop area removed, brightness factor,
/// inpaint area ratio and regeneration strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub crop: ScheduleRange,
    pub brightness: ScheduleRange,
    pub inpaint: ScheduleRange,
    pub regen: ScheduleRange,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            crop: ScheduleRange { lo: 0.05, hi: 0.90 },
            brightness: ScheduleRange { lo: 1.0, hi: 3.0 },
            inpaint: ScheduleRange { lo: 0.05, hi: 0.60 },
            regen: ScheduleRange { lo: 0.01, hi: 0.95 },
        }
    }
}

impl Schedules {
    pub fn range(&self, kind: AttackKind) -> Option<ScheduleRange> {
        match kind {
            AttackKind::Crop => Some(self.crop),
            AttackKind::Brightness => Some(self.brightness),
            AttackKind::Inpaint => Some(self.inpaint),
            AttackKind::Regen => Some(self.regen),
            AttackKind::Control | AttackKind::External => None,
        }
    }

    pub fn schedule(&self, kind: AttackKind, interval: usize) -> Result<f64> {
        check_interval(interval)?;
        match kind {
            AttackKind::Control => Ok(0.0),
            AttackKind::External => Err(Error::param("external attacks have no schedule")),
            k => self.range(k).expect("scheduled kind").at(interval),
        }
    }
}

/// Intensity for `kind` at `interval` under the default table.
pub fn schedule(kind: AttackKind, interval: usize) -> Result<f64> {
    Schedules::default().schedule(kind, interval)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub interval: usize,
    pub param: f64,
    pub trial_seed: u64,
}

impl AttackSpec {
    pub fn scheduled(kind: AttackKind, interval: usize, trial_seed: u64, schedules: &Schedules) -> Result<Self> {
        Ok(Self {
            kind,
            interval,
            param: schedules.schedule(kind, interval)?,
            trial_seed,
        })
    }
}

/// Coefficients of the regeneration and inpainting proxies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    pub regen_blur_base: f64,
    pub regen_blur_slope: f64,
    pub regen_noise_base: f64,
    pub regen_noise_slope: f64,
    pub inpaint_global_strength: f64,
    pub inpaint_sweeps: usize,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            regen_blur_base: 1.0,
            regen_blur_slope: 7.0,
            regen_noise_base: 0.02,
            regen_noise_slope: 0.10,
            inpaint_global_strength: 0.25,
            inpaint_sweeps: 500,
        }
    }
}

impl AttackParams {
    pub fn regen_blur_radius(&self, strength: f64) -> f64 {
        self.regen_blur_base + self.regen_blur_slope * strength
    }

    pub fn regen_noise_sd(&self, strength: f64) -> f64 {
        self.regen_noise_base + self.regen_noise_slope * strength
    }
}

fn require_square<T: Real>(image: &ImageBuffer<T>) -> Result<usize> {
    if image.is_square() {
        Ok(image.width())
    } else {
        Err(Error::param("attacks expect square canonical images"))
    }
}

/// Side of the centred window kept after removing `area_removed` of the frame.
pub fn crop_kept_side(side: usize, area_removed: f64) -> usize {
    (side as f64 * (1.0 - area_removed).sqrt()).round() as usize
}

/// Centre crop followed by bilinear resampling back to the input size.
pub fn attack_crop<T: Real>(image: &ImageBuffer<T>, area_removed: f64) -> Result<ImageBuffer<T>> {
    if !(0.0..1.0).contains(&area_removed) {
        return Err(Error::param(format!("crop area {area_removed} outside [0, 1)")));
    }
    let n = require_square(image)?;
    if area_removed == 0.0 {
        return Ok(image.clone());
    }
    let kept = crop_kept_side(n, area_removed).max(1);
    Ok(image.center_crop(kept).resize(n, n))
}

pub fn attack_brightness<T: Real>(image: &ImageBuffer<T>, factor: f64) -> Result<ImageBuffer<T>> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::param(format!("brightness factor {factor} below 1.0")));
    }
    let f = T::lit(factor);
    Ok(image.map(|v| v * f))
}

/// `(1−s)·x + s·blur(x, r(s)) + noise(σ(s))`, per channel, clamped.
pub fn attack_regen<T: Real>(
    image: &ImageBuffer<T>,
    strength: f64,
    trial_seed: u64,
    params: &AttackParams,
) -> Result<ImageBuffer<T>> {
    if !(strength > 0.0 && strength < 1.0) {
        return Err(Error::param(format!("regeneration strength {strength} outside (0, 1)")));
    }
    let (w, h) = (image.width(), image.height());
    let radius = params.regen_blur_radius(strength);
    let kernel = raster::gaussian_kernel::<T>(radius);
    let blurred: Vec<Vec<T>> = image
        .planes()
        .iter()
        .map(|p| raster::convolve_separable(p, w, h, &kernel))
        .collect();
    let keep = T::lit(1.0 - strength);
    let mix = T::lit(strength);
    let sd = params.regen_noise_sd(strength);
    let mut rng = seed::rng(seed::derive(trial_seed, &["regen-noise"]));
    let ch = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let noise: f64 = rng.sample(StandardNormal);
            keep * v + mix * blurred[i % ch][i / ch] + T::lit(sd * noise)
        })
        .collect();
    Ok(ImageBuffer::from_clamped(w, h, ch, data))
}

/// Side of the centred inpainting box for `area_ratio` of the frame.
pub fn inpaint_box_side(side: usize, area_ratio: f64) -> usize {
    (side as f64 * area_ratio.sqrt()).round() as usize
}

/// Centred box replaced by a boundary-diffused fill plus texture noise
/// matched to the surrounding ring, then a whole-frame regeneration pass.
pub fn attack_inpaint<T: Real>(
    image: &ImageBuffer<T>,
    area_ratio: f64,
    trial_seed: u64,
    params: &AttackParams,
) -> Result<ImageBuffer<T>> {
    if !(area_ratio > 0.0 && area_ratio <= 0.60) {
        return Err(Error::param(format!("inpaint area ratio {area_ratio} outside (0, 0.6]")));
    }
    let n = require_square(image)?;
    let k = inpaint_box_side(n, area_ratio);
    if k == 0 {
        return attack_regen(image, params.inpaint_global_strength, trial_seed, params);
    }
    let o = (n - k) / 2;
    let lum = image.luminance();
    let ring = box_ring(o, k);
    let ring_lum: Vec<T> = ring.iter().map(|&(x, y)| lum[y * n + x]).collect();
    let texture_sd = raster::variance(&ring_lum).sqrt().as_f64();

    let mut planes = image.planes();
    for plane in planes.iter_mut() {
        let ring_vals: Vec<T> = ring.iter().map(|&(x, y)| plane[y * n + x]).collect();
        let fill = raster::mean(&ring_vals);
        for y in o..o + k {
            plane[y * n + o..y * n + o + k].iter_mut().for_each(|v| *v = fill);
        }
        diffuse(plane, n, o, k, params.inpaint_sweeps);
    }
    let mut rng = seed::rng(seed::derive(trial_seed, &["inpaint-texture"]));
    for y in o..o + k {
        for x in o..o + k {
            let noise = T::lit(texture_sd * rng.sample::<f64, _>(StandardNormal));
            for plane in planes.iter_mut() {
                plane[y * n + x] = plane[y * n + x] + noise;
            }
        }
    }
    let filled = ImageBuffer::from_planes(n, n, &planes);
    attack_regen(
        &filled,
        params.inpaint_global_strength,
        seed::derive(trial_seed, &["inpaint-global"]),
        params,
    )
}

/// Jacobi sweeps of 4-neighbour averaging over the box; pixels outside the
/// box stay fixed and act as the boundary condition.
fn diffuse<T: Real>(plane: &mut Vec<T>, n: usize, o: usize, k: usize, sweeps: usize) {
    let quarter = T::lit(0.25);
    let mut next = plane.clone();
    for _ in 0..sweeps {
        for y in o..o + k {
            let up = &plane[(y - 1) * n + o..(y - 1) * n + o + k];
            let down = &plane[(y + 1) * n + o..(y + 1) * n + o + k];
            let left = &plane[y * n + o - 1..y * n + o + k - 1];
            let right = &plane[y * n + o + 1..y * n + o + k + 1];
            let dst = &mut next[y * n + o..y * n + o + k];
            for ((((d, &u), &w), &l), &r) in dst.iter_mut().zip(up).zip(down).zip(left).zip(right) {
                *d = quarter * (u + w + l + r);
            }
        }
        std::mem::swap(plane, &mut next);
    }
}

/// Pixels of the one-pixel ring just outside the box at offset `o`, side `k`.
fn box_ring(o: usize, k: usize) -> Vec<(usize, usize)> {
    let (lo, hi) = (o - 1, o + k);
    let mut ring = Vec::with_capacity(4 * (k + 1));
    for x in lo..=hi {
        ring.push((x, lo));
        ring.push((x, hi));
    }
    for y in o..o + k {
        ring.push((lo, y));
        ring.push((hi, y));
    }
    ring
}

/// Runs one scheduled attack; control is the identity.
pub fn apply<T: Real>(image: &ImageBuffer<T>, spec: &AttackSpec, params: &AttackParams) -> Result<ImageBuffer<T>> {
    check_interval(spec.interval)?;
    require_square(image)?;
    let out = match spec.kind {
        AttackKind::Control => image.clone(),
        AttackKind::Crop => attack_crop(image, spec.param)?,
        AttackKind::Brightness => attack_brightness(image, spec.param)?,
        AttackKind::Inpaint => attack_inpaint(image, spec.param, spec.trial_seed, params)?,
        AttackKind::Regen => attack_regen(image, spec.param, spec.trial_seed, params)?,
        AttackKind::External => return Err(Error::param("external attacks are ingested, not applied")),
    };
    debug_assert_eq!((out.width(), out.height()), (image.width(), image.height()));
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct ManifestLine {
    original: PathBuf,
    attacked: PathBuf,
    codec: String,
    attack: String,
    interval: usize,
    #[serde(default)]
    fidelity_external: Option<f64>,
    #[serde(default)]
    payload: Option<String>,
}

/// One externally attacked image with its reference.
#[derive(Debug, Clone)]
pub struct ExternalEntry<T> {
    pub line: usize,
    pub original: ImageBuffer<T>,
    pub attacked: ImageBuffer<T>,
    pub codec: Codec,
    pub attack_label: String,
    pub spec: AttackSpec,
    pub fidelity_override: Option<f64>,
    pub payload_hex: Option<String>,
}

/// Reads a JSON-lines manifest of externally attacked images. Relative
/// paths resolve against the manifest's directory; both images are
/// resampled to `size × size` RGB.
pub fn ingest_external<T: Real>(manifest_path: &Path, size: usize) -> Result<Vec<ExternalEntry<T>>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, reason: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        let codec: Codec = rec.codec.parse().map_err(|e: Error| err(line, e.to_string()))?;
        check_interval(rec.interval).map_err(|e| err(line, e.to_string()))?;
        if let Some(f) = rec.fidelity_external {
            if !(0.0..=100.0).contains(&f) {
                return Err(err(line, format!("fidelity_external {f} outside [0, 100]")));
            }
        }
        let load = |p: &Path| {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if !full.is_file() {
                return Err(err(line, format!("missing file {}", full.display())));
            }
            ImageBuffer::<T>::load_png(&full)
                .map(|img| img.to_rgb().resize(size, size))
                .map_err(|e| err(line, e.to_string()))
        };
        let original = load(&rec.original)?;
        let attacked = load(&rec.attacked)?;
        let kind = AttackKind::from_label(&rec.attack);
        let param = match kind {
            AttackKind::External => 0.0,
            k => schedule(k, rec.interval).map_err(|e| err(line, e.to_string()))?,
        };
        out.push(ExternalEntry {
            line,
            original,
            attacked,
            codec,
            attack_label: rec.attack,
            spec: AttackSpec {
                kind,
                interval: rec.interval,
                param,
                trial_seed: 0,
            },
            fidelity_override: rec.fidelity_external,
            payload_hex: rec.payload,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> ImageBuffer<f64> {
        let data = (0..n * n * 3).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        ImageBuffer::new(n, n, 3, data).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_steps() {
        assert_eq!(schedule(AttackKind::Crop, 1).unwrap(), 0.05);
        assert_eq!(schedule(AttackKind::Crop, 30).unwrap(), 0.90);
        assert_eq!(schedule(AttackKind::Regen, 30).unwrap(), 0.95);
        assert_eq!(schedule(AttackKind::Regen, 1).unwrap(), 0.01);
        assert_eq!(schedule(AttackKind::Inpaint, 30).unwrap(), 0.60);
        assert_eq!(schedule(AttackKind::Brightness, 30).unwrap(), 3.0);
        let b2 = schedule(AttackKind::Brightness, 2).unwrap();
        assert!((b2 - (1.0 + 2.0 / 29.0)).abs() < 1e-12);
        assert!((b2 - 1.068966).abs() < 1e-6);
        assert_eq!(schedule(AttackKind::Control, 17).unwrap(), 0.0);
        assert!(schedule(AttackKind::Crop, 0).is_err());
        assert!(schedule(AttackKind::Crop, 31).is_err());
        assert!(schedule(AttackKind::External, 1).is_err());
    }

    #[test]
    fn crop_geometry() {
        assert_eq!(crop_kept_side(256, 0.75), 128);
        assert_eq!(crop_kept_side(256, 0.90), 81);
        let img = ramp(64);
        assert_eq!(attack_crop(&img, 0.0).unwrap(), img);
        let c = attack_crop(&img, 0.5).unwrap();
        assert_eq!((c.width(), c.height()), (64, 64));
        assert!(attack_crop(&img, 1.0).is_err());
        assert!(attack_crop(&img, -0.1).is_err());
    }

    #[test]
    fn brightness_arithmetic() {
        let img = ImageBuffer::<f64>::new(2, 1, 1, vec![0.4, 0.6]).unwrap();
        assert_eq!(attack_brightness(&img, 1.0).unwrap(), img);
        let b = attack_brightness(&img, 2.0).unwrap();
        assert_eq!(b.data(), &[0.8, 1.0]);
        assert!(attack_brightness(&img, 0.9).is_err());
    }

    #[test]
    fn regen_formula_limits() {
        let p = AttackParams::default();
        assert!((p.regen_blur_radius(0.95) - 7.65).abs() < 1e-12);
        assert!((p.regen_noise_sd(0.95) - 0.115).abs() < 1e-12);
        assert!((p.regen_noise_sd(0.0) - 0.02).abs() < 1e-15);

        let gray = ImageBuffer::<f64>::filled(64, 64, 3, 0.5);
        let out = attack_regen(&gray, 1e-9, 3, &p).unwrap();
        // a flat image is unchanged by the blur, so only noise remains
        let resid: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let sd = raster::variance(&resid).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "{sd}");
        assert_eq!(out, attack_regen(&gray, 1e-9, 3, &p).unwrap());
        assert_ne!(out, attack_regen(&gray, 1e-9, 4, &p).unwrap());
        assert!(attack_regen(&gray, 0.0, 3, &p).is_err());
        assert!(attack_regen(&gray, 1.0, 3, &p).is_err());
    }

    #[test]
    fn inpaint_box_and_determinism() {
        assert_eq!(inpaint_box_side(256, 0.25), 128);
        let p = AttackParams {
            inpaint_sweeps: 20,
            ..AttackParams::default()
        };
        let img = ramp(64);
        let a = attack_inpaint(&img, 0.25, 9, &p).unwrap();
        assert_eq!(a, attack_inpaint(&img, 0.25, 9, &p).unwrap());
        assert!(attack_inpaint(&img, 0.0, 9, &p).is_err());
        assert!(attack_inpaint(&img, 0.61, 9, &p).is_err());
    }

    #[test]
    fn ring_surrounds_box() {
        let ring = box_ring(2, 3);
        assert_eq!(ring.len(), 16);
        for &(x, y) in &ring {
            let inside = (2..5).contains(&x) && (2..5).contains(&y);
            assert!(!inside);
            assert!((1..=5).contains(&x) && (1..=5).contains(&y));
        }
    }

    #[test]
    fn apply_dispatch_and_shape() {
        let img = ramp(64);
        let params = AttackParams {
            inpaint_sweeps: 10,
            ..AttackParams::default()
        };
        let s = Schedules::default();
        for kind in AttackKind::SCHEDULED {
            for interval in [1, 15, 30] {
                let spec = AttackSpec::scheduled(kind, interval, 42, &s).unwrap();
                let out = apply(&img, &spec, &params).unwrap();
                assert_eq!((out.width(), out.height(), out.channels()), (64, 64, 3));
                if kind == AttackKind::Control {
                    assert_eq!(out, img);
                }
            }
        }
        let crop30 = AttackSpec::scheduled(AttackKind::Crop, 30, 0, &s).unwrap();
        assert_eq!(apply(&img, &crop30, &params).unwrap(), attack_crop(&img, 0.90).unwrap());
    }

    #[test]
    fn labels() {
        assert_eq!(AttackKind::from_label("Img2Img"), AttackKind::Regen);
        assert_eq!(AttackKind::from_label("inpainting"), AttackKind::Inpaint);
        assert_eq!(AttackKind::from_label("jpeg"), AttackKind::External);
        assert_eq!("crop".parse::<AttackKind>().unwrap(), AttackKind::Crop);
        assert!("jpeg".parse::<AttackKind>().is_err());
    }
}
