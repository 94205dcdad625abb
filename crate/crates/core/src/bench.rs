//! Run orchestration: calibration, trial fan-out, staged subcommands and
//! report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{self, AttackKind, AttackSpec};
use crate::config::{RunConfig, Tuned};
use crate::corpus::{self, CorpusSource, CorpusSpec};
use crate::error::{Error, Result};
use crate::latent::{self, RingKey};
use crate::metrics::{self, BenchmarkReport, TrialRecord, EXTRA_ACC_BITS, EXTRA_ACC_BYTES};
use crate::score::{Codec, FidelityScore, FidelitySource};
use crate::seed;
use crate::spatial::{self, Payload, SpreadKey};
use crate::Image;

pub const TRIALS_CSV: &str = "trials.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const CELLS_CSV: &str = "cells.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CALIBRATION_JSON: &str = "calibration.json";
pub const LATENT_KEY_JSON: &str = "keys/latent_key.json";
pub const SPATIAL_KEY_JSON: &str = "keys/spatial_key.json";
pub const QUARANTINE_DIR: &str = "quarantine";
const STAGING_DIR: &str = ".staging";
const STAGES_DIR: &str = "stages";

/// Cover source for a run: synthetic covers are generated on demand.
pub struct Corpus {
    spec: CorpusSpec,
    loaded: Option<Vec<Image>>,
}

impl Corpus {
    pub fn open(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let loaded = match &spec.source {
            CorpusSource::Synthetic => None,
            CorpusSource::Directory(dir) => Some(corpus::load_images(dir, spec.size)?),
        };
        Ok(Self {
            spec: spec.clone(),
            loaded,
        })
    }

    pub fn len(&self) -> usize {
        self.loaded.as_ref().map_or(self.spec.count, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn cover(&self, index: usize) -> Result<Image> {
        match &self.loaded {
            None => corpus::gen_cover(&self.spec, index),
            Some(images) => images.get(index).cloned().ok_or(Error::Bounds {
                index,
                count: images.len(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keys {
    pub latent: RingKey<f64>,
    pub spatial: SpreadKey,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CalibrationReport {
    pub sigma_sq: f64,
    pub sigma_sq_source: String,
    pub alpha: f64,
    pub alpha_source: String,
    pub clean_latent_mean: Option<f64>,
    pub clean_latent_min: Option<f64>,
    pub unmarked_latent_mean: Option<f64>,
    pub unmarked_latent_max: Option<f64>,
    pub clean_spatial_min: Option<f64>,
    pub embed_fidelity_impact_mean: Option<f64>,
    pub embed_fidelity_impact_max: Option<f64>,
    pub failures: Vec<String>,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

fn read_key_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("key file {}: {e}", path.display())))
}

/// Payload carried by spatial cover `index`.
pub fn payload_for(master: u64, index: usize, len: usize) -> Result<Payload> {
    Payload::random(seed::derive(master, &["payload", &index.to_string()]), len)
}

/// Generator noise seed behind latent image `index`.
pub fn latent_noise_seed(master: u64, index: usize) -> u64 {
    seed::derive(master, &["latent-noise", &index.to_string()])
}

fn latent_image(key: &RingKey<f64>, noise_seed: u64, size: usize) -> Result<Image> {
    latent::render(&latent::embed(key, noise_seed), size)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn min(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Builds both keys, calibrating any `auto` constant, and measures the
/// calibration targets for the selected codecs. Target misses are listed in
/// `failures`; callers decide whether they are fatal.
pub fn calibrate_keys(cfg: &RunConfig, corpus: &Corpus) -> Result<(Keys, CalibrationReport)> {
    let workers = pool(cfg.threads)?;
    workers.install(|| calibrate_inner(cfg, corpus))
}

fn calibrate_inner(cfg: &RunConfig, corpus: &Corpus) -> Result<(Keys, CalibrationReport)> {
    let mut report = CalibrationReport::default();
    let uses = |c: Codec| cfg.codecs.contains(&c);
    let sigma_n = cfg.calibration.sigma_covers.min(corpus.len());

    let latent_key = if let Some(path) = &cfg.latent.key_file {
        report.sigma_sq_source = "key_file".into();
        RingKey::from_json(&read_key_file(path)?)?
    } else {
        let key = latent::make_ring_key::<f64>(cfg.latent.seed, cfg.latent.side, cfg.latent.r_min, cfg.latent.r_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        match cfg.latent.sigma_sq {
            Tuned::Fixed(v) => {
                report.sigma_sq_source = "fixed".into();
                key.with_sigma_sq(v)?
            }
            Tuned::Auto if uses(Codec::Latent) => {
                report.sigma_sq_source = "calibrated".into();
                let dists = (0..sigma_n)
                    .into_par_iter()
                    .map(|i| latent::masked_mse(&corpus.cover(i)?, &key))
                    .collect::<Result<Vec<f64>>>()?;
                key.with_sigma_sq(latent::SIGMA_SQ_FRACTION * mean(&dists))?
            }
            Tuned::Auto => {
                report.sigma_sq_source = "provisional".into();
                key
            }
        }
    };
    report.sigma_sq = latent_key.sigma_sq();

    let spatial_key = if let Some(path) = &cfg.spatial.key_file {
        report.alpha_source = "key_file".into();
        SpreadKey::from_json(&read_key_file(path)?)?
    } else {
        let make = |alpha: f64| {
            spatial::make_spread_key(
                cfg.spatial.seed,
                corpus.size(),
                cfg.spatial.block,
                cfg.spatial.payload_len,
                alpha,
            )
            .map_err(|e| Error::Config(e.to_string()))
        };
        match cfg.spatial.alpha {
            Tuned::Fixed(a) => {
                report.alpha_source = "fixed".into();
                make(a)?
            }
            Tuned::Auto if uses(Codec::Spatial) => {
                report.alpha_source = "calibrated".into();
                let base = make(spatial::DEFAULT_ALPHA)?;
                let alpha = search_alpha(cfg, corpus, &base)?;
                base.with_alpha(alpha)?
            }
            Tuned::Auto => {
                report.alpha_source = "default".into();
                make(spatial::DEFAULT_ALPHA)?
            }
        }
    };
    report.alpha = spatial_key.alpha();

    if uses(Codec::Latent) {
        let clean = (0..cfg.calibration.check_covers)
            .into_par_iter()
            .map(|i| {
                let noise = seed::derive(cfg.master_seed, &["calibration-noise", &i.to_string()]);
                Ok(latent::detect(&latent_image(&latent_key, noise, corpus.size())?, &latent_key)?.value())
            })
            .collect::<Result<Vec<f64>>>()?;
        let unmarked = (0..sigma_n)
            .into_par_iter()
            .map(|i| Ok(latent::detect(&corpus.cover(i)?, &latent_key)?.value()))
            .collect::<Result<Vec<f64>>>()?;
        let (cm, um) = (mean(&clean), mean(&unmarked));
        report.clean_latent_mean = Some(cm);
        report.clean_latent_min = Some(min(&clean));
        report.unmarked_latent_mean = Some(um);
        report.unmarked_latent_max = Some(max(&unmarked));
        if cm < cfg.calibration.min_clean_latent {
            report.failures.push(format!(
                "mean clean latent score {cm:.4} below {}",
                cfg.calibration.min_clean_latent
            ));
        }
        if um > cfg.calibration.max_unmarked_latent {
            report.failures.push(format!(
                "mean unwatermarked latent score {um:.4} above {}",
                cfg.calibration.max_unmarked_latent
            ));
        }
    }

    if uses(Codec::Spatial) {
        let rows = (0..corpus.len())
            .into_par_iter()
            .map(|i| {
                let cover = corpus.cover(i)?;
                let payload = payload_for(cfg.master_seed, i, spatial_key.payload_len())?;
                let marked = spatial::embed(&cover, &spatial_key, &payload)?;
                let acc = spatial::detect_detailed(&marked, &spatial_key, &payload)?.bit_accuracy;
                let impact = 100.0 - metrics::fidelity(&cover, &marked)?.value();
                Ok((spatial::score_from_accuracy(acc).value(), impact))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let impacts: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (smin, imean) = (min(&scores), mean(&impacts));
        report.clean_spatial_min = Some(smin);
        report.embed_fidelity_impact_mean = Some(imean);
        report.embed_fidelity_impact_max = Some(max(&impacts));
        if smin < 1.0 {
            report.failures.push(format!("clean spatial score {smin:.4} below 1.0"));
        }
        if imean > cfg.calibration.max_fidelity_impact {
            report.failures.push(format!(
                "mean embedding fidelity impact {imean:.3} above {}",
                cfg.calibration.max_fidelity_impact
            ));
        }
    }

    Ok((
        Keys {
            latent: latent_key,
            spatial: spatial_key,
        },
        report,
    ))
}

/// Smallest alpha on the geometric grid `start·step^k` that decodes every
/// pool cover without error, times the configured headroom.
fn search_alpha(cfg: &RunConfig, corpus: &Corpus, base: &SpreadKey) -> Result<f64> {
    let c = &cfg.calibration;
    let mut grid = Vec::new();
    let mut a = c.alpha_start;
    while a <= spatial::MAX_ALPHA {
        grid.push(a);
        a *= c.alpha_step;
    }
    if grid.is_empty() {
        return Err(Error::Calibration("alpha search grid is empty".into()));
    }
    let decodes = |cover: &Image, payload: &Payload, alpha: f64| -> Result<bool> {
        let key = base.with_alpha(alpha)?;
        let marked = spatial::embed(cover, &key, payload)?;
        Ok(spatial::extract(&marked, &key)? == *payload)
    };
    let needed = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let cover = corpus.cover(i)?;
            let payload = payload_for(cfg.master_seed, i, base.payload_len())?;
            if !decodes(&cover, &payload, grid[grid.len() - 1])? {
                return Ok(None);
            }
            let (mut lo, mut hi) = (0usize, grid.len() - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if decodes(&cover, &payload, grid[mid])? {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Ok(Some(hi))
        })
        .collect::<Result<Vec<Option<usize>>>>()?;
    let mut k = match needed.iter().copied().collect::<Option<Vec<usize>>>() {
        Some(v) => v.into_iter().max().unwrap_or(0),
        None => {
            return Err(Error::Calibration(format!(
                "some covers do not decode even at alpha {}",
                spatial::MAX_ALPHA
            )))
        }
    };
    // per-cover thresholds assume monotone decoding; confirm on the full pool
    loop {
        let alpha = grid[k];
        let all = (0..corpus.len())
            .into_par_iter()
            .map(|i| decodes(&corpus.cover(i)?, &payload_for(cfg.master_seed, i, base.payload_len())?, alpha))
            .collect::<Result<Vec<bool>>>()?;
        if all.iter().all(|&b| b) {
            break;
        }
        k += 1;
        if k == grid.len() {
            return Err(Error::Calibration("no grid alpha decodes every cover".into()));
        }
    }
    let alpha = grid[k] * c.alpha_headroom;
    if alpha > spatial::MAX_ALPHA {
        return Err(Error::Calibration(format!(
            "calibrated alpha {alpha} exceeds {}",
            spatial::MAX_ALPHA
        )));
    }
    Ok(alpha)
}

/// One (codec, attack, interval, sample) cell of the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrialId {
    pub codec: Codec,
    pub attack: AttackKind,
    pub interval: usize,
    pub sample: usize,
}

impl TrialId {
    /// Stable per-trial seed; independent of which other trials run.
    pub fn seed(&self, master: u64) -> u64 {
        seed::derive(
            master,
            &[
                self.codec.name(),
                self.attack.name(),
                &self.interval.to_string(),
                &self.sample.to_string(),
            ],
        )
    }

    /// Cover drawn for this trial, with replacement. The draw ignores the
    /// codec so both codecs see the same cover index in the same cell.
    pub fn cover_index(&self, master: u64, count: usize) -> usize {
        let h = seed::derive(
            master,
            &["draw", self.attack.name(), &self.interval.to_string(), &self.sample.to_string()],
        );
        (h % count as u64) as usize
    }

    fn stem(&self) -> String {
        format!("{}-{}-{:02}-{:04}", self.codec, self.attack, self.interval, self.sample)
    }
}

/// Every trial of the configured design in canonical order.
pub fn plan(cfg: &RunConfig) -> Vec<TrialId> {
    let codecs: BTreeSet<Codec> = cfg.codecs.iter().copied().collect();
    let mut attacks: Vec<AttackKind> = cfg.attacks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    attacks.sort_by_key(|a| a.name());
    let mut out = Vec::new();
    for &codec in &codecs {
        for &attack in &attacks {
            for interval in 1..=cfg.aer.intervals {
                for sample in 0..cfg.aer.samples_per_interval {
                    out.push(TrialId {
                        codec,
                        attack,
                        interval,
                        sample,
                    });
                }
            }
        }
    }
    out
}

/// Everything a trial needs besides its id. Watermarked spatial covers are
/// built once per cover index and shared across trials.
pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    keys: &'a Keys,
    spatial_marked: Vec<OnceLock<Image>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, corpus: &'a Corpus, keys: &'a Keys) -> Self {
        Self {
            cfg,
            corpus,
            keys,
            spatial_marked: (0..corpus.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn payload(&self, index: usize) -> Result<Payload> {
        payload_for(self.cfg.master_seed, index, self.keys.spatial.payload_len())
    }

    /// Watermarked pre-attack image for cover `index`.
    pub fn marked(&self, codec: Codec, index: usize) -> Result<Image> {
        match codec {
            Codec::Latent => latent_image(
                &self.keys.latent,
                latent_noise_seed(self.cfg.master_seed, index),
                self.corpus.size(),
            ),
            Codec::Spatial => {
                let slot = self.spatial_marked.get(index).ok_or(Error::Bounds {
                    index,
                    count: self.corpus.len(),
                })?;
                if let Some(img) = slot.get() {
                    return Ok(img.clone());
                }
                let img = spatial::embed(&self.corpus.cover(index)?, &self.keys.spatial, &self.payload(index)?)?;
                Ok(slot.get_or_init(|| img).clone())
            }
        }
    }

    pub fn attacked(&self, id: &TrialId, marked: &Image) -> Result<Image> {
        let spec = AttackSpec::scheduled(id.attack, id.interval, id.seed(self.cfg.master_seed), &self.cfg.schedules)?;
        attack::apply(marked, &spec, &self.cfg.attack_params)
    }

    pub fn score(&self, id: &TrialId, cover_index: usize, marked: &Image, attacked: &Image) -> Result<TrialRecord> {
        let fidelity = metrics::fidelity(marked, attacked)?;
        score_record(
            self.keys,
            id.codec,
            id.attack.name(),
            id.interval,
            id.sample,
            attacked,
            Some(&self.payload(cover_index)?),
            fidelity,
            &self.cfg.aer,
        )
    }

    pub fn run_trial(&self, id: &TrialId) -> Result<TrialRecord> {
        let index = id.cover_index(self.cfg.master_seed, self.corpus.len());
        let marked = self.marked(id.codec, index)?;
        let attacked = self.attacked(id, &marked)?;
        self.score(id, index, &marked, &attacked)
    }
}

#[allow(clippy::too_many_arguments)]
fn score_record(
    keys: &Keys,
    codec: Codec,
    attack: &str,
    interval: usize,
    sample: usize,
    attacked: &Image,
    payload: Option<&Payload>,
    fidelity: FidelityScore,
    aer: &metrics::AerConfig,
) -> Result<TrialRecord> {
    match codec {
        Codec::Latent => {
            let p = latent::detect(attacked, &keys.latent)?;
            TrialRecord::new(codec, attack, interval, sample, p, fidelity, aer)
        }
        Codec::Spatial => {
            let payload = payload.ok_or_else(|| Error::MissingData("spatial trial without expected payload".into()))?;
            let d = spatial::detect_detailed(attacked, &keys.spatial, payload)?;
            Ok(TrialRecord::new(codec, attack, interval, sample, d.score, fidelity, aer)?
                .with_extra(EXTRA_ACC_BITS, d.bit_accuracy)
                .with_extra(EXTRA_ACC_BYTES, d.byte_accuracy))
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes into `<out>/.staging` and moves the results into `<out>` on
/// success. On failure the staging tree becomes `<out>/quarantine` next to
/// an `error.txt`.
fn publish<T>(out: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let staging = out.join(STAGING_DIR);
    let _ = fs::remove_dir_all(&staging);
    fs::create_dir_all(&staging).map_err(|e| Error::io(staging.display().to_string(), e))?;
    match body(&staging) {
        Ok(v) => {
            move_tree(&staging, out)?;
            let _ = fs::remove_dir_all(&staging);
            Ok(v)
        }
        Err(e) => {
            let q = out.join(QUARANTINE_DIR);
            let _ = fs::remove_dir_all(&q);
            if fs::rename(&staging, &q).is_ok() {
                let _ = fs::write(q.join("error.txt"), format!("{e}\n"));
            }
            Err(e)
        }
    }
}

fn move_tree(from: &Path, to: &Path) -> Result<()> {
    let entries = fs::read_dir(from).map_err(|e| Error::io(from.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(from.display().to_string(), e))?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            fs::create_dir_all(&dst).map_err(|e| Error::io(dst.display().to_string(), e))?;
            move_tree(&src, &dst)?;
        } else {
            fs::rename(&src, &dst).map_err(|e| Error::io(dst.display().to_string(), e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    source: FidelitySource,
    config: BTreeMap<String, String>,
    calibration: &'a CalibrationReport,
    keys: KeyEcho,
    seeds: BTreeMap<&'static str, u64>,
    corpus_images: usize,
    sampling: &'static str,
    geometry: &'static str,
    trial_count: usize,
    trials_per_pair: BTreeMap<String, usize>,
    moe: f64,
    spearman: BTreeMap<String, f64>,
    warnings: &'a [String],
    timings_ms: BTreeMap<&'static str, u128>,
}

#[derive(Debug, Serialize)]
struct KeyEcho {
    latent: latent::RingKeyFile,
    spatial: spatial::SpreadKeyFile,
}

const SAMPLING_NOTE: &str = "cover index = hash(master_seed, draw, attack, interval, sample) mod corpus size; \
     drawn with replacement; shared by both codecs";
const GEOMETRY_NOTE: &str = "attacked images are resampled back to the canonical size before detection";

struct Timings(BTreeMap<&'static str, u128>, Instant);

impl Timings {
    fn new() -> Self {
        Self(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, stage: &'static str) {
        self.0.insert(stage, self.1.elapsed().as_millis());
        self.1 = Instant::now();
    }
}

/// Writes the report CSVs, optional plots and the manifest into `dir`.
fn emit_report(
    dir: &Path,
    cfg: &RunConfig,
    report: &BenchmarkReport,
    calibration: &CalibrationReport,
    keys: &Keys,
    corpus_images: usize,
    source: FidelitySource,
    timings: BTreeMap<&'static str, u128>,
) -> Result<()> {
    write(
        &dir.join(TRIALS_CSV),
        csv_bytes(|b| metrics::write_trials_csv(&report.trials, b))?,
    )?;
    write(&dir.join(SUMMARY_CSV), csv_bytes(|b| metrics::write_summary_csv(report, b))?)?;
    write(&dir.join(CURVES_CSV), csv_bytes(|b| metrics::write_curves_csv(report, b))?)?;
    write(&dir.join(CELLS_CSV), csv_bytes(|b| metrics::write_cells_csv(report, b))?)?;
    if cfg.plots {
        let attacks: BTreeSet<&str> = report.curves.iter().map(|c| c.attack.as_str()).collect();
        for a in attacks {
            write(&dir.join("plots").join(format!("{a}.svg")), curves_svg(report, a, cfg.aer.cet))?;
        }
    }
    let mut trials_per_pair = BTreeMap::new();
    for r in &report.rates {
        trials_per_pair.insert(format!("{}/{}", r.codec, r.attack), r.total);
    }
    let spearman = report
        .curves
        .iter()
        .map(|c| (format!("{}/{}", c.codec, c.attack), c.spearman))
        .collect();
    let manifest = Manifest {
        tool: "provmark",
        version: env!("CARGO_PKG_VERSION"),
        source,
        config: cfg.echo(),
        calibration,
        keys: KeyEcho {
            latent: keys.latent.params(),
            spatial: keys.spatial.params(),
        },
        seeds: BTreeMap::from([
            ("master", cfg.master_seed),
            ("corpus", cfg.corpus.master_seed),
            ("latent_key", keys.latent.params().seed),
            ("spatial_key", keys.spatial.params().seed),
        ]),
        corpus_images,
        sampling: SAMPLING_NOTE,
        geometry: GEOMETRY_NOTE,
        trial_count: report.trials.len(),
        trials_per_pair,
        moe: report.moe,
        spearman,
        warnings: &report.warnings,
        timings_ms: timings,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_JSON), json + "\n")
}

fn write_keys(dir: &Path, keys: &Keys) -> Result<()> {
    write(&dir.join(LATENT_KEY_JSON), keys.latent.to_json() + "\n")?;
    write(&dir.join(SPATIAL_KEY_JSON), keys.spatial.to_json() + "\n")
}

fn calibration_gate(cfg: &RunConfig, cal: &CalibrationReport) -> Result<()> {
    let tuned = matches!(cfg.latent.sigma_sq, Tuned::Auto) && cfg.latent.key_file.is_none()
        || matches!(cfg.spatial.alpha, Tuned::Auto) && cfg.spatial.key_file.is_none();
    if tuned && !cal.failures.is_empty() {
        return Err(Error::Calibration(cal.failures.join("; ")));
    }
    Ok(())
}

/// Runs every trial of the design and writes the report files.
pub fn run(cfg: &RunConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    publish(&out, |stage| {
        let mut t = Timings::new();
        let corpus = Corpus::open(&cfg.corpus).map_err(|e| e.in_stage("corpus"))?;
        let (keys, cal) = calibrate_keys(cfg, &corpus).map_err(|e| e.in_stage("calibrate"))?;
        write(&stage.join(CALIBRATION_JSON), serde_json::to_string_pretty(&cal).expect("serializes") + "\n")?;
        write_keys(stage, &keys)?;
        calibration_gate(cfg, &cal).map_err(|e| e.in_stage("calibrate"))?;
        t.lap("calibrate");

        let pipeline = Pipeline::new(cfg, &corpus, &keys);
        let ids = plan(cfg);
        let trials = pool(cfg.threads)?
            .install(|| ids.par_iter().map(|id| pipeline.run_trial(id)).collect::<Result<Vec<_>>>())
            .map_err(|e| e.in_stage("trials"))?;
        t.lap("trials");

        let report = BenchmarkReport::from_trials(trials, &cfg.aer, Some(cfg.aer.intervals));
        t.lap("aggregate");
        emit_report(stage, cfg, &report, &cal, &keys, corpus.len(), FidelitySource::Builtin, t.0)
            .map_err(|e| e.in_stage("report"))?;
        Ok(report)
    })
}

/// Calibrates keys and writes them with a calibration report. Target misses
/// are a calibration error after the files are written.
pub fn calibrate(cfg: &RunConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let corpus = Corpus::open(&cfg.corpus)?;
    let (keys, cal) = calibrate_keys(cfg, &corpus)?;
    write_keys(&cfg.out_dir, &keys)?;
    write(
        &cfg.out_dir.join(CALIBRATION_JSON),
        serde_json::to_string_pretty(&cal).expect("serializes") + "\n",
    )?;
    if !cal.failures.is_empty() {
        return Err(Error::Calibration(cal.failures.join("; ")));
    }
    Ok(cal)
}

fn stage_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(STAGES_DIR).join(name)
}

fn load_stage_keys(cfg: &RunConfig) -> Result<Keys> {
    let read = |rel: &str| {
        let p = cfg.out_dir.join(rel);
        fs::read_to_string(&p).map_err(|_| Error::MissingData(format!("{} (run gen first)", p.display())))
    };
    Ok(Keys {
        latent: RingKey::from_json(&read(LATENT_KEY_JSON)?)?,
        spatial: SpreadKey::from_json(&read(SPATIAL_KEY_JSON)?)?,
    })
}

fn load_stage_calibration(cfg: &RunConfig) -> Result<CalibrationReport> {
    let p = cfg.out_dir.join(STAGES_DIR).join(CALIBRATION_JSON);
    let text = fs::read_to_string(&p).map_err(|_| Error::MissingData(format!("{} (run gen first)", p.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::MissingData(format!("{}: {e}", p.display())))?;
    let f = |k: &str| v.get(k).and_then(serde_json::Value::as_f64);
    let s = |k: &str| v.get(k).and_then(|x| x.as_str()).unwrap_or_default().to_string();
    Ok(CalibrationReport {
        sigma_sq: f("sigma_sq").unwrap_or_default(),
        sigma_sq_source: s("sigma_sq_source"),
        alpha: f("alpha").unwrap_or_default(),
        alpha_source: s("alpha_source"),
        clean_latent_mean: f("clean_latent_mean"),
        clean_latent_min: f("clean_latent_min"),
        unmarked_latent_mean: f("unmarked_latent_mean"),
        unmarked_latent_max: f("unmarked_latent_max"),
        clean_spatial_min: f("clean_spatial_min"),
        embed_fidelity_impact_mean: f("embed_fidelity_impact_mean"),
        embed_fidelity_impact_max: f("embed_fidelity_impact_max"),
        failures: v
            .get("failures")
            .and_then(|x| x.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
            .unwrap_or_default(),
    })
}

fn used_covers(cfg: &RunConfig, count: usize) -> BTreeSet<(Codec, usize)> {
    plan(cfg)
        .iter()
        .map(|id| (id.codec, id.cover_index(cfg.master_seed, count)))
        .collect()
}

fn covers_len(cfg: &RunConfig) -> Result<usize> {
    let p = stage_dir(cfg, "covers").join("count");
    let text = fs::read_to_string(&p).map_err(|_| Error::MissingData(format!("{} (run gen first)", p.display())))?;
    text.trim()
        .parse()
        .map_err(|_| Error::MissingData(format!("{}: bad cover count", p.display())))
}

fn raw_name(codec: Codec, index: usize) -> String {
    format!("{codec}-{index:05}.pmf")
}

/// Stage 1: calibrates keys and writes the covers the design draws.
pub fn stage_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let corpus = Corpus::open(&cfg.corpus)?;
    let (keys, cal) = calibrate_keys(cfg, &corpus)?;
    calibration_gate(cfg, &cal)?;
    write_keys(&cfg.out_dir, &keys)?;
    write(
        &cfg.out_dir.join(STAGES_DIR).join(CALIBRATION_JSON),
        serde_json::to_string_pretty(&cal).expect("serializes") + "\n",
    )?;
    let dir = stage_dir(cfg, "covers");
    write(&dir.join("count"), format!("{}\n", corpus.len()))?;
    let used = used_covers(cfg, corpus.len());
    let wanted: BTreeSet<usize> = used.iter().filter(|(c, _)| *c == Codec::Spatial).map(|(_, i)| *i).collect();
    pool(cfg.threads)?.install(|| {
        wanted
            .par_iter()
            .map(|&i| corpus.cover(i)?.write_raw(&dir.join(format!("cover-{i:05}.pmf"))))
            .collect::<Result<()>>()
    })
}

/// Stage 2: watermarks every cover the design draws.
pub fn stage_embed(cfg: &RunConfig) -> Result<()> {
    let keys = load_stage_keys(cfg)?;
    let count = covers_len(cfg)?;
    let covers = stage_dir(cfg, "covers");
    let dir = stage_dir(cfg, "marked");
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let size = cfg.corpus.size;
    let used: Vec<(Codec, usize)> = used_covers(cfg, count).into_iter().collect();
    pool(cfg.threads)?.install(|| {
        used.par_iter()
            .map(|&(codec, i)| {
                let marked = match codec {
                    Codec::Latent => latent_image(&keys.latent, latent_noise_seed(cfg.master_seed, i), size)?,
                    Codec::Spatial => {
                        let cover = Image::read_raw(&covers.join(format!("cover-{i:05}.pmf")))?;
                        let payload = payload_for(cfg.master_seed, i, keys.spatial.payload_len())?;
                        spatial::embed(&cover, &keys.spatial, &payload)?
                    }
                };
                marked.write_raw(&dir.join(raw_name(codec, i)))
            })
            .collect::<Result<()>>()
    })
}

/// Stage 3: applies every scheduled attack.
pub fn stage_attack(cfg: &RunConfig) -> Result<()> {
    let count = covers_len(cfg)?;
    let marked_dir = stage_dir(cfg, "marked");
    let dir = stage_dir(cfg, "attacked");
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let ids = plan(cfg);
    pool(cfg.threads)?.install(|| {
        ids.par_iter()
            .map(|id| {
                let i = id.cover_index(cfg.master_seed, count);
                let marked = Image::read_raw(&marked_dir.join(raw_name(id.codec, i)))?;
                let spec = AttackSpec::scheduled(id.attack, id.interval, id.seed(cfg.master_seed), &cfg.schedules)?;
                attack::apply(&marked, &spec, &cfg.attack_params)?.write_raw(&dir.join(format!("{}.pmf", id.stem())))
            })
            .collect::<Result<()>>()
    })
}

const TRIALS_JSONL: &str = "trials.jsonl";

/// Stage 4: scores every attacked image into a lossless trial list.
pub fn stage_score(cfg: &RunConfig) -> Result<()> {
    let keys = load_stage_keys(cfg)?;
    let count = covers_len(cfg)?;
    let (marked_dir, attacked_dir) = (stage_dir(cfg, "marked"), stage_dir(cfg, "attacked"));
    let ids = plan(cfg);
    let trials = pool(cfg.threads)?.install(|| {
        ids.par_iter()
            .map(|id| {
                let i = id.cover_index(cfg.master_seed, count);
                let marked = Image::read_raw(&marked_dir.join(raw_name(id.codec, i)))?;
                let attacked = Image::read_raw(&attacked_dir.join(format!("{}.pmf", id.stem())))?;
                let fidelity = metrics::fidelity(&marked, &attacked)?;
                let payload = payload_for(cfg.master_seed, i, keys.spatial.payload_len())?;
                score_record(
                    &keys,
                    id.codec,
                    id.attack.name(),
                    id.interval,
                    id.sample,
                    &attacked,
                    Some(&payload),
                    fidelity,
                    &cfg.aer,
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut lines = String::new();
    for t in &trials {
        lines.push_str(&serde_json::to_string(t).expect("trial serializes"));
        lines.push('\n');
    }
    write(&cfg.out_dir.join(STAGES_DIR).join(TRIALS_JSONL), lines)
}

/// Stage 5: aggregates the scored trials into the report files.
pub fn stage_report(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let keys = load_stage_keys(cfg)?;
    let cal = load_stage_calibration(cfg)?;
    let count = covers_len(cfg)?;
    let p = cfg.out_dir.join(STAGES_DIR).join(TRIALS_JSONL);
    let text = fs::read_to_string(&p).map_err(|_| Error::MissingData(format!("{} (run score first)", p.display())))?;
    let trials = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<TrialRecord>(l).map_err(|e| Error::Manifest {
                path: p.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = BenchmarkReport::from_trials(trials, &cfg.aer, Some(cfg.aer.intervals));
    publish(&cfg.out_dir, |stage| {
        emit_report(stage, cfg, &report, &cal, &keys, count, FidelitySource::Builtin, BTreeMap::new())
    })?;
    Ok(report)
}

/// Scores externally attacked images listed in a JSON-lines manifest using
/// the key files named in the configuration.
pub fn score_external(manifest: &Path, cfg: &RunConfig) -> Result<BenchmarkReport> {
    let load_key = |p: &Option<PathBuf>, what: &str| -> Result<String> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{what}.key_file is required for external scoring")))?;
        read_key_file(p)
    };
    let entries = attack::ingest_external::<f64>(manifest, cfg.corpus.size)?;
    let mut latent_key = None;
    let mut spatial_key = None;
    for codec in entries.iter().map(|e| e.codec).collect::<BTreeSet<_>>() {
        match codec {
            Codec::Latent => latent_key = Some(RingKey::<f64>::from_json(&load_key(&cfg.latent.key_file, "latent")?)?),
            Codec::Spatial => spatial_key = Some(SpreadKey::from_json(&load_key(&cfg.spatial.key_file, "spatial")?)?),
        }
    }
    let keys = Keys {
        latent: match latent_key {
            Some(k) => k,
            None => latent::make_ring_key(cfg.latent.seed, cfg.latent.side, cfg.latent.r_min, cfg.latent.r_max)?,
        },
        spatial: match spatial_key {
            Some(k) => k,
            None => spatial::make_spread_key(
                cfg.spatial.seed,
                cfg.corpus.size,
                cfg.spatial.block,
                cfg.spatial.payload_len,
                spatial::DEFAULT_ALPHA,
            )?,
        },
    };
    let mut t = Timings::new();
    let trials = pool(cfg.threads)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let fidelity = match e.fidelity_override {
                    Some(v) => FidelityScore::new(v, FidelitySource::External)?,
                    None => metrics::fidelity(&e.original, &e.attacked)?,
                };
                let expected = match (e.codec, &e.payload_hex) {
                    (Codec::Spatial, Some(hex)) => Some(Payload::from_hex(hex, keys.spatial.payload_len())?),
                    (Codec::Spatial, None) => Some(spatial::extract(&e.original, &keys.spatial)?),
                    (Codec::Latent, _) => None,
                };
                score_record(
                    &keys,
                    e.codec,
                    &e.attack_label,
                    e.spec.interval,
                    e.line,
                    &e.attacked,
                    expected.as_ref(),
                    fidelity,
                    &cfg.aer,
                )
                .map_err(|err| Error::Manifest {
                    path: manifest.to_path_buf(),
                    line: e.line,
                    reason: err.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    t.lap("score");
    let report = BenchmarkReport::from_trials(trials, &cfg.aer, None);
    let cal = CalibrationReport {
        sigma_sq: keys.latent.sigma_sq(),
        sigma_sq_source: "key_file".into(),
        alpha: keys.spatial.alpha(),
        alpha_source: "key_file".into(),
        ..CalibrationReport::default()
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    publish(&cfg.out_dir, |stage| {
        emit_report(stage, cfg, &report, &cal, &keys, entries.len(), FidelitySource::External, t.0)
    })?;
    Ok(report)
}

/// Mean-provenance curves of every codec for one attack as an SVG line plot.
pub fn curves_svg(report: &BenchmarkReport, attack: &str, cet: f64) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let xmax = attack::INTERVALS as f64;
    let sx = |i: f64| PAD + (i - 1.0) / (xmax - 1.0) * (W - 2.0 * PAD);
    let sy = |p: f64| H - PAD - p * (H - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{attack}: mean provenance by interval</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for tick in [0.0, 0.2, 0.5, 1.0] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{tick:.1}</text>\n",
            PAD - 6.0,
            sy(tick) + 4.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"grey\" stroke-dasharray=\"4 4\"/>\n",
        sy(cet),
        W - PAD,
        sy(cet)
    ));
    let colours = ["#1f77b4", "#d62728"];
    for (n, curve) in report.curves.iter().filter(|c| c.attack == attack).enumerate() {
        let colour = colours[n % colours.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.interval as f64), sy(p.mean_provenance)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{colour}\">{}</text>\n",
            pts.join(" "),
            W - PAD - 60.0,
            PAD + 16.0 * (n as f64 + 1.0),
            curve.codec
        ));
    }
    s.push_str("</svg>\n");
    s
}
