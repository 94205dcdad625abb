//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! master_seed = 7
//! codecs = latent, spatial
//! [aer]
//! samples_per_interval = 100
//! schedule.crop.hi = 0.9
//! ```
//!
//! A `[section]` header prefixes the keys that follow it; keys may also be
//! written fully dotted. Unknown keys and malformed values are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackKind, AttackParams, ScheduleRange, Schedules};
use crate::corpus::{CorpusSource, CorpusSpec};
use crate::error::{Error, Result};
use crate::latent;
use crate::metrics::AerConfig;
use crate::score::Codec;
use crate::spatial;

/// Either a fixed value or one found by calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tuned {
    Auto,
    Fixed(f64),
}

impl Tuned {
    fn render(self) -> String {
        match self {
            Tuned::Auto => "auto".into(),
            Tuned::Fixed(v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentConfig {
    pub seed: u64,
    pub side: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub channels: usize,
    pub sigma_sq: Tuned,
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    pub seed: u64,
    pub block: usize,
    pub payload_len: usize,
    pub alpha: Tuned,
    pub key_file: Option<PathBuf>,
}

/// Search and acceptance settings for key calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub alpha_start: f64,
    pub alpha_step: f64,
    pub alpha_headroom: f64,
    pub max_fidelity_impact: f64,
    pub sigma_covers: usize,
    pub check_covers: usize,
    pub min_clean_latent: f64,
    pub max_unmarked_latent: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha_start: 1e-5,
            alpha_step: 1.05,
            alpha_headroom: 1.0,
            max_fidelity_impact: 2.0,
            sigma_covers: 200,
            check_covers: 100,
            min_clean_latent: 0.90,
            max_unmarked_latent: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub corpus: CorpusSpec,
    pub aer: AerConfig,
    pub codecs: Vec<Codec>,
    pub attacks: Vec<AttackKind>,
    pub latent: LatentConfig,
    pub spatial: SpatialConfig,
    pub schedules: Schedules,
    pub attack_params: AttackParams,
    pub calibration: CalibrationConfig,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub plots: bool,
}

/// Covers in the default synthetic pool.
pub const DEFAULT_CORPUS_COUNT: usize = 200;
pub const DEFAULT_MASTER_SEED: u64 = 20_240_601;

impl Default for RunConfig {
    fn default() -> Self {
        let master_seed = DEFAULT_MASTER_SEED;
        Self {
            master_seed,
            corpus: CorpusSpec::synthetic(DEFAULT_CORPUS_COUNT, crate::corpus::DEFAULT_SIZE, master_seed),
            aer: AerConfig::default(),
            codecs: Codec::ALL.to_vec(),
            attacks: AttackKind::SCHEDULED.to_vec(),
            latent: LatentConfig {
                seed: 1,
                side: latent::DEFAULT_SIDE,
                r_min: latent::DEFAULT_R_MIN,
                r_max: latent::DEFAULT_R_MAX,
                channels: 1,
                sigma_sq: Tuned::Auto,
                key_file: None,
            },
            spatial: SpatialConfig {
                seed: 2,
                block: spatial::DEFAULT_BLOCK,
                payload_len: spatial::DEFAULT_PAYLOAD_LEN,
                alpha: Tuned::Auto,
                key_file: None,
            },
            schedules: Schedules::default(),
            attack_params: AttackParams::default(),
            calibration: CalibrationConfig::default(),
            out_dir: PathBuf::from("provmark-out"),
            threads: None,
            plots: true,
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    if line == 0 {
        Error::Config(msg.to_string())
    } else {
        Error::Config(format!("line {line}: {msg}"))
    }
}

fn num<V: FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| bad(line, format!("{key}: cannot parse '{v}'")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn tuned(line: usize, key: &str, v: &str) -> Result<Tuned> {
    if v == "auto" {
        Ok(Tuned::Auto)
    } else {
        Ok(Tuned::Fixed(num(line, key, v)?))
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.latent.key_file, &mut cfg.spatial.key_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let CorpusSource::Directory(d) = &mut cfg.corpus.source {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut corpus_seed: Option<u64> = None;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| bad(line, "unterminated section header"))?
                    .trim();
                section = name.to_string();
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got '{content}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if key == "corpus.seed" {
                corpus_seed = Some(num(line, &key, v)?);
                continue;
            }
            cfg.set(line, &key, v)?;
        }
        cfg.corpus.master_seed = corpus_seed.unwrap_or(cfg.master_seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "master_seed" => self.master_seed = num(line, key, v)?,
            "out" | "output.dir" => self.out_dir = PathBuf::from(v),
            "threads" => self.threads = Some(num(line, key, v)?),
            "output.plots" => self.plots = boolean(line, key, v)?,
            "codecs" => {
                self.codecs = list(v).map(Codec::from_str).collect::<Result<_>>().map_err(|e| bad(line, e))?;
            }
            "attacks" => {
                self.attacks = list(v)
                    .map(|s| match AttackKind::from_str(s) {
                        Ok(AttackKind::External) => Err(Error::param("external attacks are not schedulable")),
                        other => other,
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| bad(line, e))?;
            }
            "corpus.count" => self.corpus.count = num(line, key, v)?,
            "corpus.size" => self.corpus.size = num(line, key, v)?,
            "corpus.source" => {
                self.corpus.source = if v == "synthetic" {
                    CorpusSource::Synthetic
                } else {
                    CorpusSource::Directory(PathBuf::from(v))
                }
            }
            "aer.cet" => self.aer.cet = num(line, key, v)?,
            "aer.fidelity_min" => self.aer.fidelity_min = num(line, key, v)?,
            "aer.z" => self.aer.z = num(line, key, v)?,
            "aer.sigma_est" => self.aer.sigma_est = num(line, key, v)?,
            "aer.samples_per_interval" => self.aer.samples_per_interval = num(line, key, v)?,
            "aer.intervals" => self.aer.intervals = num(line, key, v)?,
            "latent.seed" => self.latent.seed = num(line, key, v)?,
            "latent.side" => self.latent.side = num(line, key, v)?,
            "latent.r_min" => self.latent.r_min = num(line, key, v)?,
            "latent.r_max" => self.latent.r_max = num(line, key, v)?,
            "latent.channels" => self.latent.channels = num(line, key, v)?,
            "latent.sigma_sq" => self.latent.sigma_sq = tuned(line, key, v)?,
            "latent.key_file" => self.latent.key_file = opt_path(v),
            "spatial.seed" => self.spatial.seed = num(line, key, v)?,
            "spatial.block" => self.spatial.block = num(line, key, v)?,
            "spatial.payload_len" => self.spatial.payload_len = num(line, key, v)?,
            "spatial.alpha" => self.spatial.alpha = tuned(line, key, v)?,
            "spatial.key_file" => self.spatial.key_file = opt_path(v),
            "attack.regen_blur_base" => self.attack_params.regen_blur_base = num(line, key, v)?,
            "attack.regen_blur_slope" => self.attack_params.regen_blur_slope = num(line, key, v)?,
            "attack.regen_noise_base" => self.attack_params.regen_noise_base = num(line, key, v)?,
            "attack.regen_noise_slope" => self.attack_params.regen_noise_slope = num(line, key, v)?,
            "attack.inpaint_global_strength" => self.attack_params.inpaint_global_strength = num(line, key, v)?,
            "attack.inpaint_sweeps" => self.attack_params.inpaint_sweeps = num(line, key, v)?,
            "calibration.alpha_start" => self.calibration.alpha_start = num(line, key, v)?,
            "calibration.alpha_step" => self.calibration.alpha_step = num(line, key, v)?,
            "calibration.alpha_headroom" => self.calibration.alpha_headroom = num(line, key, v)?,
            "calibration.max_fidelity_impact" => self.calibration.max_fidelity_impact = num(line, key, v)?,
            "calibration.sigma_covers" => self.calibration.sigma_covers = num(line, key, v)?,
            "calibration.check_covers" => self.calibration.check_covers = num(line, key, v)?,
            "calibration.min_clean_latent" => self.calibration.min_clean_latent = num(line, key, v)?,
            "calibration.max_unmarked_latent" => self.calibration.max_unmarked_latent = num(line, key, v)?,
            _ => {
                if let Some(rest) = key.strip_prefix("schedule.") {
                    return self.set_schedule(line, key, rest, v);
                }
                return Err(bad(line, format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    fn set_schedule(&mut self, line: usize, key: &str, rest: &str, v: &str) -> Result<()> {
        let (kind, end) = rest.split_once('.').ok_or_else(|| bad(line, format!("unknown key '{key}'")))?;
        let range = match kind {
            "crop" => &mut self.schedules.crop,
            "brightness" => &mut self.schedules.brightness,
            "inpaint" => &mut self.schedules.inpaint,
            "regen" => &mut self.schedules.regen,
            _ => return Err(bad(line, format!("unknown key '{key}'"))),
        };
        match end {
            "lo" => range.lo = num(line, key, v)?,
            "hi" => range.hi = num(line, key, v)?,
            _ => return Err(bad(line, format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies command-line overrides; `seed` replaces the master seed and,
    /// with it, the corpus seed.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>, threads: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.master_seed = s;
            self.corpus.master_seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if threads.is_some() {
            self.threads = threads;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(cfg)?;
        self.aer.validate()?;
        if self.codecs.is_empty() {
            return Err(Error::Config("codecs must not be empty".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("attacks must not be empty".into()));
        }
        if self.latent.channels != 1 {
            return Err(Error::Config("latent.channels: only single-channel latents are supported".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for kind in [AttackKind::Crop, AttackKind::Brightness, AttackKind::Inpaint, AttackKind::Regen] {
            let r = self.schedules.range(kind).expect("scheduled");
            ScheduleRange::new(r.lo, r.hi).map_err(cfg)?;
        }
        let s = &self.schedules;
        let within = |r: ScheduleRange, lo: f64, hi: f64, lo_open: bool, hi_open: bool| {
            (if lo_open { r.lo > lo } else { r.lo >= lo }) && (if hi_open { r.hi < hi } else { r.hi <= hi })
        };
        if !within(s.crop, 0.0, 1.0, false, true)
            || !(s.brightness.lo >= 1.0)
            || !within(s.inpaint, 0.0, 0.60, true, false)
            || !within(s.regen, 0.0, 1.0, true, true)
        {
            return Err(Error::Config("schedule range outside the attack's domain".into()));
        }
        if let Tuned::Fixed(v) = self.latent.sigma_sq {
            if !(v > 0.0) {
                return Err(Error::Config("latent.sigma_sq must be positive".into()));
            }
        }
        if let Tuned::Fixed(v) = self.spatial.alpha {
            if !(v > 0.0 && v <= spatial::MAX_ALPHA) {
                return Err(Error::Config(format!("spatial.alpha outside (0, {}]", spatial::MAX_ALPHA)));
            }
        }
        let c = &self.calibration;
        if !(c.alpha_start > 0.0 && c.alpha_step > 1.0 && c.alpha_headroom >= 1.0) {
            return Err(Error::Config("calibration alpha search needs start > 0, step > 1, headroom >= 1".into()));
        }
        if c.sigma_covers == 0 || c.check_covers == 0 {
            return Err(Error::Config("calibration cover counts must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved settings as flat key/value pairs, in key order.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("master_seed", self.master_seed.to_string());
        put("codecs", self.codecs.iter().map(|c| c.name()).collect::<Vec<_>>().join(","));
        put("attacks", self.attacks.iter().map(|a| a.name()).collect::<Vec<_>>().join(","));
        put("corpus.count", self.corpus.count.to_string());
        put("corpus.size", self.corpus.size.to_string());
        put("corpus.seed", self.corpus.master_seed.to_string());
        put(
            "corpus.source",
            match &self.corpus.source {
                CorpusSource::Synthetic => "synthetic".into(),
                CorpusSource::Directory(d) => d.display().to_string(),
            },
        );
        put("aer.cet", self.aer.cet.to_string());
        put("aer.fidelity_min", self.aer.fidelity_min.to_string());
        put("aer.z", self.aer.z.to_string());
        put("aer.sigma_est", self.aer.sigma_est.to_string());
        put("aer.samples_per_interval", self.aer.samples_per_interval.to_string());
        put("aer.intervals", self.aer.intervals.to_string());
        put("latent.seed", self.latent.seed.to_string());
        put("latent.side", self.latent.side.to_string());
        put("latent.r_min", self.latent.r_min.to_string());
        put("latent.r_max", self.latent.r_max.to_string());
        put("latent.channels", self.latent.channels.to_string());
        put("latent.sigma_sq", self.latent.sigma_sq.render());
        put("spatial.seed", self.spatial.seed.to_string());
        put("spatial.block", self.spatial.block.to_string());
        put("spatial.payload_len", self.spatial.payload_len.to_string());
        put("spatial.alpha", self.spatial.alpha.render());
        for (name, r) in [
            ("crop", self.schedules.crop),
            ("brightness", self.schedules.brightness),
            ("inpaint", self.schedules.inpaint),
            ("regen", self.schedules.regen),
        ] {
            put(&format!("schedule.{name}.lo"), r.lo.to_string());
            put(&format!("schedule.{name}.hi"), r.hi.to_string());
        }
        let p = &self.attack_params;
        put("attack.regen_blur_base", p.regen_blur_base.to_string());
        put("attack.regen_blur_slope", p.regen_blur_slope.to_string());
        put("attack.regen_noise_base", p.regen_noise_base.to_string());
        put("attack.regen_noise_slope", p.regen_noise_slope.to_string());
        put("attack.inpaint_global_strength", p.inpaint_global_strength.to_string());
        put("attack.inpaint_sweeps", p.inpaint_sweeps.to_string());
        let c = &self.calibration;
        put("calibration.alpha_start", c.alpha_start.to_string());
        put("calibration.alpha_step", c.alpha_step.to_string());
        put("calibration.alpha_headroom", c.alpha_headroom.to_string());
        put("calibration.max_fidelity_impact", c.max_fidelity_impact.to_string());
        put("calibration.sigma_covers", c.sigma_covers.to_string());
        put("calibration.check_covers", c.check_covers.to_string());
        put("calibration.min_clean_latent", c.min_clean_latent.to_string());
        put("calibration.max_unmarked_latent", c.max_unmarked_latent.to_string());
        put("output.plots", self.plots.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_run() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.codecs.len() * c.attacks.len() * c.aer.intervals * c.aer.samples_per_interval, 30_000);
        assert_eq!(c.corpus.size, 256);
        assert_eq!(c.corpus.master_seed, c.master_seed);
    }

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = RunConfig::parse("[aer]\nsamples_per_interval = 40\n[schedule]\ncrop.hi = 0.8\n").unwrap();
        let b = RunConfig::parse("aer.samples_per_interval=40 # trailing\nschedule.crop.hi = 0.8").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aer.samples_per_interval, 40);
        assert_eq!(a.schedules.crop.hi, 0.8);
    }

    #[test]
    fn lists_and_tuned_values() {
        let c = RunConfig::parse("codecs = latent\nattacks = control, regen\nspatial.alpha = 0.05\nlatent.sigma_sq=auto").unwrap();
        assert_eq!(c.codecs, vec![Codec::Latent]);
        assert_eq!(c.attacks, vec![AttackKind::Control, AttackKind::Regen]);
        assert_eq!(c.spatial.alpha, Tuned::Fixed(0.05));
        assert_eq!(c.latent.sigma_sq, Tuned::Auto);
    }

    #[test]
    fn errors_are_config_errors() {
        for text in [
            "bogus = 1",
            "[aer]\nnope = 2",
            "aer.cet = abc",
            "codecs = ",
            "codecs = pixel",
            "attacks = external",
            "aer.samples_per_interval = 10",
            "latent.channels = 4",
            "schedule.crop.lo = 0.95",
            "schedule.warp.lo = 0.1",
            "no equals sign",
            "[aer",
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e:?}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn corpus_seed_follows_master_unless_set() {
        let c = RunConfig::parse("master_seed = 5").unwrap();
        assert_eq!(c.corpus.master_seed, 5);
        let c = RunConfig::parse("corpus.seed = 9\nmaster_seed = 5").unwrap();
        assert_eq!(c.corpus.master_seed, 9);
        let c = c.with_overrides(Some(11), None, Some(2)).unwrap();
        assert_eq!((c.master_seed, c.corpus.master_seed, c.threads), (11, 11, Some(2)));
    }

    #[test]
    fn echo_covers_every_parsed_key() {
        let echo = RunConfig::default().echo();
        let text: String = echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }
}
