use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use provmark::corpus::{gen_cover, CorpusSpec};
use provmark::Image;

const TINY: &str = "\
master_seed = 3
attacks = control, crop, regen, inpaint
corpus.count = 12
corpus.size = 64
aer.samples_per_interval = 30
aer.intervals = 2
latent.side = 16
latent.r_min = 2
latent.r_max = 6
calibration.sigma_covers = 12
calibration.check_covers = 20
attack.inpaint_sweeps = 40
";

fn provmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_provmark")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn staged_chain_equals_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    let cfg = cfg.to_str().unwrap();
    let one = dir.path().join("one");
    let staged = dir.path().join("staged");
    ok(&provmark(&["run", "--config", cfg, "--out", one.to_str().unwrap()]));
    for stage in ["gen", "embed", "attack", "score", "report"] {
        ok(&provmark(&[stage, "--config", cfg, "--out", staged.to_str().unwrap()]));
    }
    for f in ["trials.csv", "summary.csv", "curves.csv", "cells.csv"] {
        assert_eq!(read(one.join(f)), read(staged.join(f)), "{f}");
    }
    let trials = String::from_utf8(read(one.join("trials.csv"))).unwrap();
    assert_eq!(trials.lines().count(), 1 + 2 * 4 * 2 * 30);
    assert!(one.join("manifest.json").exists());
    assert!(one.join("plots").join("crop.svg").exists());
    assert!(one.join("keys").join("spatial_key.json").exists());
    assert!(!one.join(".staging").exists());
}

#[test]
fn control_only_run_never_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "codecs = latent\nattacks = control\n");
    let out = dir.path().join("o");
    ok(&provmark(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let text = String::from_utf8(read(out.join("trials.csv"))).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.split(',').nth(6) == Some("false")));
    let summary = String::from_utf8(read(out.join("summary.csv"))).unwrap();
    assert_eq!(summary, "codec,attack,aer_rate_percent\nlatent,control,0.00\n");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "frobnicate = 1\n").unwrap();
    let out = provmark(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let strict = write_config(dir.path(), "strict.cfg", "calibration.min_clean_latent = 0.99999\n");
    let o = dir.path().join("cal");
    let out = provmark(&["run", "--config", strict.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(o.join("quarantine").join("calibration.json").exists());
    assert!(o.join("quarantine").join("error.txt").exists());
    assert!(!o.join("trials.csv").exists());

    let out = provmark(&["score-external", "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = provmark(&["embed", "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

fn save(dir: &Path, name: &str, img: &Image) -> String {
    img.save_png(&dir.join(name)).unwrap();
    name.to_string()
}

#[test]
fn external_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    let cfg = write_config(dir.path(), "cal.cfg", "corpus.size = 256\nlatent.side = 64\nlatent.r_min = 4\nlatent.r_max = 12\n");
    ok(&provmark(&["calibrate", "--config", cfg.to_str().unwrap(), "--out", keys.to_str().unwrap()]));

    let spec = CorpusSpec::synthetic(10, 256, 99);
    let mut lines = Vec::new();
    for i in 0..10 {
        let img: Image = gen_cover(&spec, i).unwrap();
        let name = save(dir.path(), &format!("c{i}.png"), &img);
        let (codec, extra) = if i % 2 == 0 {
            ("spatial", String::new())
        } else {
            ("latent", ",\"fidelity_external\":90".to_string())
        };
        lines.push(format!(
            "{{\"original\":\"{name}\",\"attacked\":\"{name}\",\"codec\":\"{codec}\",\"attack\":\"img2img\",\"interval\":{}{extra}}}",
            i + 1
        ));
    }
    let manifest = dir.path().join("m.jsonl");
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();

    let ext_cfg = write_config(
        dir.path(),
        "ext.cfg",
        &format!(
            "corpus.size = 256\nlatent.key_file = {}\nspatial.key_file = {}\n",
            keys.join("keys/latent_key.json").display(),
            keys.join("keys/spatial_key.json").display()
        ),
    );
    let out_dir = dir.path().join("ext");
    ok(&provmark(&[
        "score-external",
        "--config",
        ext_cfg.to_str().unwrap(),
        "--external-manifest",
        manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let text = String::from_utf8(read(out_dir.join("trials.csv"))).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        match r[0] {
            // identical attacked and original decode to the same payload
            "spatial" => assert_eq!(r[4], "1.000000"),
            // unwatermarked image with external fidelity 90 sits in the region
            _ => {
                assert_eq!(r[5], "90.000000");
                assert!(r[4].parse::<f64>().unwrap() < 0.2);
                assert_eq!(r[6], "true");
            }
        }
    }
    let manifest_json = String::from_utf8(read(out_dir.join("manifest.json"))).unwrap();
    assert!(manifest_json.contains("\"source\": \"external\""));

    let missing = write_config(dir.path(), "nokeys.cfg", "corpus.size = 256\n");
    let out = provmark(&[
        "score-external",
        "--config",
        missing.to_str().unwrap(),
        "--external-manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&manifest, "{broken\n").unwrap();
    let out = provmark(&[
        "score-external",
        "--config",
        ext_cfg.to_str().unwrap(),
        "--external-manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
