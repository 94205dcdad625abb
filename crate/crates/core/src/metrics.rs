//! Fidelity, evasion-region classification and report aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster;
use crate::scalar::Real;
use crate::score::{Codec, FidelityScore, FidelitySource, ProvenanceScore};

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity of the luminance planes over the region where
/// the 11×11 window fits, reported as `100·max(0, ssim)`.
pub fn fidelity<T: Real>(original: &ImageBuffer<T>, attacked: &ImageBuffer<T>) -> Result<FidelityScore> {
    let (w, h) = (original.width(), original.height());
    if (w, h) != (attacked.width(), attacked.height()) {
        return Err(Error::param(format!(
            "fidelity needs equal sizes, got {w}x{h} and {}x{}",
            attacked.width(),
            attacked.height()
        )));
    }
    let x = original.luminance();
    let y = attacked.luminance();
    let ssim = mean_ssim(&x, &y, w, h);
    FidelityScore::new(100.0 * ssim.max(0.0), FidelitySource::Builtin)
}

fn mean_ssim<T: Real>(x: &[T], y: &[T], w: usize, h: usize) -> f64 {
    let kernel = raster::gaussian_kernel_with_radius::<T>(SSIM_SIGMA, SSIM_RADIUS);
    let filt = |p: &[T]| raster::convolve_separable(p, w, h, &kernel);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let (mx, my) = (filt(x), filt(y));
    let (fxx, fyy, fxy) = (filt(&xx), filt(&yy), filt(&xy));
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);

    let margin = |n: usize| if n > 2 * SSIM_RADIUS { SSIM_RADIUS } else { 0 };
    let (mxr, myr) = (margin(w), margin(h));
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in myr..h - myr {
        for col in mxr..w - mxr {
            let i = row * w + col;
            let (ux, uy) = (mx[i], my[i]);
            let vx = fxx[i] - ux * ux;
            let vy = fyy[i] - uy * uy;
            let cov = fxy[i] - ux * uy;
            let num = (two * ux * uy + c1) * (two * cov + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            sum += (num / den).as_f64();
            count += 1;
        }
    }
    sum / count as f64
}

/// Thresholds and sampling constants of the evasion-region analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AerConfig {
    pub cet: f64,
    pub fidelity_min: f64,
    pub z: f64,
    pub sigma_est: f64,
    pub samples_per_interval: usize,
    pub intervals: usize,
}

impl Default for AerConfig {
    fn default() -> Self {
        Self {
            cet: 0.20,
            fidelity_min: 75.0,
            z: 1.96,
            sigma_est: 0.20,
            samples_per_interval: 100,
            intervals: 30,
        }
    }
}

/// Smallest per-interval sample count accepted for a run.
pub const MIN_SAMPLES: usize = 30;

impl AerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cet > 0.0 && self.cet < 1.0) {
            return Err(Error::Config(format!("aer.cet {} outside (0, 1)", self.cet)));
        }
        if !(self.fidelity_min > 0.0 && self.fidelity_min < 100.0) {
            return Err(Error::Config(format!("aer.fidelity_min {} outside (0, 100)", self.fidelity_min)));
        }
        if self.samples_per_interval < MIN_SAMPLES {
            return Err(Error::Config(format!(
                "aer.samples_per_interval {} below {MIN_SAMPLES}",
                self.samples_per_interval
            )));
        }
        if !(1..=crate::attack::INTERVALS).contains(&self.intervals) {
            return Err(Error::Config(format!(
                "aer.intervals {} outside 1..={}",
                self.intervals,
                crate::attack::INTERVALS
            )));
        }
        if !(self.z >= 0.0 && self.sigma_est >= 0.0) {
            return Err(Error::Config("aer.z and aer.sigma_est must be non-negative".into()));
        }
        Ok(())
    }
}

/// `provenance < cet` and `fidelity > fidelity_min`, both strict.
pub fn classify_aer(provenance: f64, fidelity: f64, cfg: &AerConfig) -> Result<bool> {
    if !(0.0..=1.0).contains(&provenance) {
        return Err(Error::param(format!("provenance {provenance} outside [0, 1]")));
    }
    if !(0.0..=100.0).contains(&fidelity) {
        return Err(Error::param(format!("fidelity {fidelity} outside [0, 100]")));
    }
    Ok(provenance < cfg.cet && fidelity > cfg.fidelity_min)
}

/// Half-width `z·σ/√n` of the per-interval confidence interval.
pub fn moe(cfg: &AerConfig) -> f64 {
    cfg.z * cfg.sigma_est / (cfg.samples_per_interval as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub codec: Codec,
    pub attack: String,
    pub interval: usize,
    pub sample: usize,
    pub provenance: ProvenanceScore,
    pub fidelity: FidelityScore,
    pub aer: bool,
    pub extras: BTreeMap<String, f64>,
}

/// Extras key holding raw payload bit accuracy.
pub const EXTRA_ACC_BITS: &str = "acc_bits";
/// Extras key holding per-byte payload accuracy.
pub const EXTRA_ACC_BYTES: &str = "acc_bytes";

impl TrialRecord {
    pub fn new(
        codec: Codec,
        attack: impl Into<String>,
        interval: usize,
        sample: usize,
        provenance: ProvenanceScore,
        fidelity: FidelityScore,
        cfg: &AerConfig,
    ) -> Result<Self> {
        let aer = classify_aer(provenance.value(), fidelity.value(), cfg)?;
        Ok(Self {
            codec,
            attack: attack.into(),
            interval,
            sample,
            provenance,
            fidelity,
            aer,
            extras: BTreeMap::new(),
        })
    }

    pub fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.extras.insert(key.to_string(), value);
        self
    }

    fn key(&self) -> (Codec, &str, usize, usize) {
        (self.codec, &self.attack, self.interval, self.sample)
    }
}

/// Sorts by (codec, attack, interval, sample), breaking ties on scores so the
/// order is total.
pub fn canonical_sort(trials: &mut [TrialRecord]) {
    trials.sort_by(|a, b| {
        a.key()
            .cmp(&b.key())
            .then(a.provenance.value().total_cmp(&b.provenance.value()))
            .then(a.fidelity.value().total_cmp(&b.fidelity.value()))
    });
}

fn select<'a>(trials: &'a [TrialRecord], codec: Codec, attack: &'a str) -> impl Iterator<Item = &'a TrialRecord> {
    trials.iter().filter(move |t| t.codec == codec && t.attack == attack)
}

/// Flagged fraction pooled over every interval and sample of the pair.
pub fn aer_rate(trials: &[TrialRecord], codec: Codec, attack: &str) -> Result<f64> {
    let (flagged, total) = select(trials, codec, attack).fold((0usize, 0usize), |(f, n), t| (f + t.aer as usize, n + 1));
    if total == 0 {
        return Err(Error::MissingData(format!("no trials for {codec}/{attack}")));
    }
    Ok(flagged as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub interval: usize,
    pub mean_provenance: f64,
    pub mean_fidelity: f64,
}

#[derive(Default)]
struct IntervalAcc {
    n: usize,
    flagged: usize,
    provenance: Vec<f64>,
    fidelity: Vec<f64>,
}

fn by_interval(trials: &[TrialRecord], codec: Codec, attack: &str) -> BTreeMap<usize, IntervalAcc> {
    let mut sorted: Vec<&TrialRecord> = select(trials, codec, attack).collect();
    sorted.sort_by(|a, b| a.key().cmp(&b.key()).then(a.provenance.value().total_cmp(&b.provenance.value())));
    let mut groups: BTreeMap<usize, IntervalAcc> = BTreeMap::new();
    for t in sorted {
        let g = groups.entry(t.interval).or_default();
        g.n += 1;
        g.flagged += t.aer as usize;
        g.provenance.push(t.provenance.value());
        g.fidelity.push(t.fidelity.value());
    }
    groups
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Per-interval means in interval order; unpopulated intervals are absent.
pub fn interval_curves(trials: &[TrialRecord], codec: Codec, attack: &str) -> Vec<CurvePoint> {
    by_interval(trials, codec, attack)
        .into_iter()
        .map(|(interval, g)| CurvePoint {
            interval,
            mean_provenance: mean(&g.provenance),
            mean_fidelity: mean(&g.fidelity),
        })
        .collect()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. A constant input
/// carries no trend and yields 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub codec: Codec,
    pub attack: String,
    pub flagged: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub codec: Codec,
    pub attack: String,
    pub points: Vec<CurvePoint>,
    /// Rank correlation of interval index against mean provenance.
    pub spearman: f64,
}

/// Per-interval breakdown of one (codec, attack) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRow {
    pub codec: Codec,
    pub attack: String,
    pub interval: usize,
    pub n: usize,
    pub aer_rate: f64,
    pub aer_sd: f64,
    pub provenance_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub rates: Vec<RateRow>,
    pub curves: Vec<CurveRow>,
    pub cells: Vec<CellRow>,
    pub moe: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
}

impl BenchmarkReport {
    /// Aggregates trials in any order. `expected_intervals` lists intervals
    /// each pair should cover; gaps become warnings.
    pub fn from_trials(mut trials: Vec<TrialRecord>, cfg: &AerConfig, expected_intervals: Option<usize>) -> Self {
        canonical_sort(&mut trials);
        let mut pairs: Vec<(Codec, String)> = trials.iter().map(|t| (t.codec, t.attack.clone())).collect();
        pairs.dedup();
        let mut rates = Vec::new();
        let mut curves = Vec::new();
        let mut cells = Vec::new();
        let mut warnings = Vec::new();
        for (codec, attack) in pairs {
            let groups = by_interval(&trials, codec, &attack);
            let (flagged, total) = groups.values().fold((0, 0), |(f, n), g| (f + g.flagged, n + g.n));
            rates.push(RateRow {
                codec,
                attack: attack.clone(),
                flagged,
                total,
                rate: flagged as f64 / total as f64,
            });
            if let Some(k) = expected_intervals {
                let missing: Vec<String> =
                    (1..=k).filter(|i| !groups.contains_key(i)).map(|i| i.to_string()).collect();
                if !missing.is_empty() {
                    warnings.push(format!("{codec}/{attack}: no trials at intervals {}", missing.join(",")));
                }
            }
            let mut points = Vec::with_capacity(groups.len());
            for (&interval, g) in &groups {
                points.push(CurvePoint {
                    interval,
                    mean_provenance: mean(&g.provenance),
                    mean_fidelity: mean(&g.fidelity),
                });
                let flags: Vec<f64> = (0..g.n).map(|i| if i < g.flagged { 1.0 } else { 0.0 }).collect();
                cells.push(CellRow {
                    codec,
                    attack: attack.clone(),
                    interval,
                    n: g.n,
                    aer_rate: g.flagged as f64 / g.n as f64,
                    aer_sd: sample_sd(&flags),
                    provenance_sd: sample_sd(&g.provenance),
                });
            }
            let xs: Vec<f64> = points.iter().map(|p| p.interval as f64).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.mean_provenance).collect();
            curves.push(CurveRow {
                codec,
                attack,
                spearman: spearman(&xs, &ys),
                points,
            });
        }
        Self {
            rates,
            curves,
            cells,
            moe: moe(cfg),
            warnings,
            trials,
        }
    }

    pub fn rate(&self, codec: Codec, attack: &str) -> Option<f64> {
        self.rates.iter().find(|r| r.codec == codec && r.attack == attack).map(|r| r.rate)
    }

    pub fn curve(&self, codec: Codec, attack: &str) -> Option<&CurveRow> {
        self.curves.iter().find(|r| r.codec == codec && r.attack == attack)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("writing csv", e)
}

pub const TRIALS_HEADER: &str = "codec,attack,interval,sample,provenance,fidelity,aer,acc_bits";

/// Rows in the order given; callers pass canonically sorted trials. The
/// `acc_bits` cell is empty for trials without a payload.
pub fn write_trials_csv(trials: &[TrialRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRIALS_HEADER}").map_err(io_err)?;
    for t in trials {
        let acc = t.extras.get(EXTRA_ACC_BITS).map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{}",
            t.codec,
            t.attack,
            t.interval,
            t.sample,
            t.provenance.value(),
            t.fidelity.value(),
            t.aer,
            acc
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn write_summary_csv(report: &BenchmarkReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "codec,attack,aer_rate_percent").map_err(io_err)?;
    for r in &report.rates {
        writeln!(out, "{},{},{:.2}", r.codec, r.attack, 100.0 * r.rate).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_curves_csv(report: &BenchmarkReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "codec,attack,interval,mean_provenance,mean_fidelity").map_err(io_err)?;
    for c in &report.curves {
        for p in &c.points {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                c.codec, c.attack, p.interval, p.mean_provenance, p.mean_fidelity
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn write_cells_csv(report: &BenchmarkReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "codec,attack,interval,n,aer_rate,aer_sd,provenance_sd").map_err(io_err)?;
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            c.codec, c.attack, c.interval, c.n, c.aer_rate, c.aer_sd, c.provenance_sd
        )
        .map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(codec: Codec, attack: &str, interval: usize, sample: usize, p: f64, f: f64) -> TrialRecord {
        TrialRecord::new(
            codec,
            attack,
            interval,
            sample,
            ProvenanceScore::new(p).unwrap(),
            FidelityScore::new(f, FidelitySource::Builtin).unwrap(),
            &AerConfig::default(),
        )
        .unwrap()
    }

    fn textured(n: usize, seed: u64) -> ImageBuffer<f64> {
        let spec = crate::corpus::CorpusSpec {
            count: 4,
            size: n,
            master_seed: seed,
            source: crate::corpus::CorpusSource::Synthetic,
        };
        crate::corpus::gen_cover(&spec, 0).unwrap()
    }

    #[test]
    fn fidelity_identity_and_inverse() {
        let x = textured(64, 1);
        assert_eq!(fidelity(&x, &x).unwrap().value(), 100.0);
        let inv = x.map(|v| 1.0 - v);
        let f = fidelity(&x, &inv).unwrap().value();
        assert!(f < 30.0, "{f}");
        let other = textured(64, 2);
        let a = fidelity(&x, &other).unwrap().value();
        let b = fidelity(&other, &x).unwrap().value();
        assert!((a - b).abs() < 1e-9);
        assert!(fidelity(&x, &textured(128, 1)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let x = textured(64, 3).center_crop(32);
        let y = textured(64, 4).center_crop(32);
        let (lx, ly) = (x.luminance(), y.luminance());
        let k: Vec<f64> = raster::gaussian_kernel_with_radius(SSIM_SIGMA, SSIM_RADIUS);
        let mut total = 0.0;
        let mut count = 0;
        for r in 5..27 {
            for c in 5..27 {
                let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in 0..11 {
                    for dc in 0..11 {
                        let wgt = k[dr] * k[dc];
                        let i = (r + dr - 5) * 32 + (c + dc - 5);
                        ux += wgt * lx[i];
                        uy += wgt * ly[i];
                        sxx += wgt * lx[i] * lx[i];
                        syy += wgt * ly[i] * ly[i];
                        sxy += wgt * lx[i] * ly[i];
                    }
                }
                let (vx, vy, cv) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
                total += (2.0 * ux * uy + SSIM_C1) * (2.0 * cv + SSIM_C2)
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        let expect = 100.0 * (total / count as f64).max(0.0);
        assert!((fidelity(&x, &y).unwrap().value() - expect).abs() < 1e-9);
    }

    #[test]
    fn aer_truth_table() {
        let cfg = AerConfig::default();
        assert!(classify_aer(0.19, 80.0, &cfg).unwrap());
        assert!(!classify_aer(0.20, 80.0, &cfg).unwrap());
        assert!(!classify_aer(0.19, 75.0, &cfg).unwrap());
        assert!(!classify_aer(0.5, 100.0, &cfg).unwrap());
        assert!(classify_aer(-0.1, 80.0, &cfg).is_err());
        assert!(classify_aer(0.1, 100.5, &cfg).is_err());
    }

    #[test]
    fn moe_values() {
        assert!((moe(&AerConfig::default()) - 0.0392).abs() < 1e-12);
        let cfg = AerConfig {
            samples_per_interval: 400,
            ..AerConfig::default()
        };
        assert!((moe(&cfg) - 0.0196).abs() < 1e-12);
        let cfg = AerConfig {
            sigma_est: 0.0,
            ..AerConfig::default()
        };
        assert_eq!(moe(&cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AerConfig::default().validate().is_ok());
        let bad = AerConfig {
            samples_per_interval: 29,
            ..AerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AerConfig {
            cet: 1.0,
            ..AerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rate_arithmetic() {
        let mut trials = Vec::new();
        for i in 0..3000 {
            let p = if i < 2024 { 0.1 } else { 0.9 };
            trials.push(trial(Codec::Spatial, "regen", i / 100 + 1, i % 100, p, 90.0));
        }
        let r = aer_rate(&trials, Codec::Spatial, "regen").unwrap();
        assert!((r - 0.674667).abs() < 1e-6);
        assert!(aer_rate(&trials, Codec::Latent, "regen").is_err());
        let report = BenchmarkReport::from_trials(trials, &AerConfig::default(), Some(30));
        let mut buf = Vec::new();
        write_summary_csv(&report, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "codec,attack,aer_rate_percent\nspatial,regen,67.47\n");
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn curves_and_csv() {
        let trials = vec![
            trial(Codec::Latent, "crop", 2, 0, 0.4, 50.0),
            trial(Codec::Latent, "crop", 1, 0, 0.9, 70.0),
            trial(Codec::Latent, "crop", 1, 1, 0.7, 90.0),
        ];
        let c = interval_curves(&trials, Codec::Latent, "crop");
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].interval, 1);
        assert!((c[0].mean_provenance - 0.8).abs() < 1e-12);
        assert_eq!(c[1].mean_fidelity, 50.0);
        let report = BenchmarkReport::from_trials(trials, &AerConfig::default(), Some(3));
        assert_eq!(report.warnings.len(), 1);
        let mut buf = Vec::new();
        write_trials_csv(&report.trials, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRIALS_HEADER);
        assert_eq!(lines[1], "latent,crop,1,0,0.900000,70.000000,false,");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[1.0, 3.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 4]), 0.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }
}
