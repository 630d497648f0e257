use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdtsde::io::read_field;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdtsde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, out_dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "task = shape_to_mask\nout_dir = {}\nT = 200\nn_pairs = 3\nimage_size = 12\ntrain_steps = 30\nsampler_steps = 5\nseed = 7\n{extra}",
        out_dir.display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.cfg", &out, "schedule_variant = dynamic\n");
    run_ok(&["dataset", "--config", s(&cfg)]);
    run_ok(&["train", "--config", s(&cfg)]);
    run_ok(&["sample", "--config", s(&cfg), "--dump-every", "2"]);
    run_ok(&["evaluate", "--config", s(&cfg)]);
    for f in [
        "dataset/manifest.csv",
        "dataset/pair_0002_mask.cdt",
        "model.cdp",
        "loss.csv",
        "mixfield.cdt",
        "samples/pair_0000_gen.cdt",
        "previews/pair_0000_gen_c0.pgm",
        "trajectories",
        "metrics.csv",
        "train.resolved.cfg",
        "evaluate.resolved.cfg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().last().unwrap().starts_with("aggregate"));
    assert!(metrics.lines().next().unwrap().contains("dice"));
}

#[test]
fn evaluate_identical_sets_gives_unit_ssim() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.cfg", &out, "");
    run_ok(&["dataset", "--config", s(&cfg)]);
    let gen = tmp.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    for i in 0..3 {
        fs::copy(
            out.join(format!("dataset/pair_{i:04}_tgt.cdt")),
            gen.join(format!("pair_{i:04}_gen.cdt")),
        )
        .unwrap();
    }
    run_ok(&["evaluate", "--config", s(&cfg), "--generated", s(&gen)]);
    let mut reader = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let col = reader.headers().unwrap().iter().position(|h| h == "ssim").unwrap();
    for rec in reader.records() {
        let v: f64 = rec.unwrap()[col].parse().unwrap();
        assert_eq!(v, 1.0);
    }
}

#[test]
fn linear_and_dynamic_samples_differ_within_range() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let dynamic = write_config(tmp.path(), "dyn.cfg", &out, "schedule_variant = dynamic\n");
    let linear = write_config(tmp.path(), "lin.cfg", &out, "schedule_variant = linear\n");
    run_ok(&["dataset", "--config", s(&dynamic)]);
    run_ok(&["train", "--config", s(&dynamic)]);
    let mut outputs = Vec::new();
    for cfg in [&linear, &dynamic] {
        run_ok(&["sample", "--config", s(cfg)]);
        outputs.push(read_field(&out.join("samples/pair_0000_gen.cdt")).unwrap());
    }
    assert_ne!(outputs[0], outputs[1]);
    for o in &outputs {
        assert!(o.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn same_config_gives_identical_csvs() {
    let tmp = TempDir::new().unwrap();
    let mut csvs = Vec::new();
    for run_name in ["a", "b"] {
        let out = tmp.path().join(run_name);
        let cfg = write_config(tmp.path(), &format!("{run_name}.cfg"), &out, "");
        run_ok(&["dataset", "--config", s(&cfg)]);
        run_ok(&["train", "--config", s(&cfg)]);
        run_ok(&["sample", "--config", s(&cfg)]);
        run_ok(&["evaluate", "--config", s(&cfg)]);
        csvs.push(
            ["dataset/manifest.csv", "loss.csv", "metrics.csv"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let code = |args: &[&str]| run(args).status.code().unwrap();

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "task = shape_to_mask\nout_dir = x\ncolour = red\n").unwrap();
    assert_eq!(code(&["dataset", "--config", s(&bad)]), 2);
    assert_eq!(code(&["dataset", "--config", s(&tmp.path().join("absent.cfg"))]), 2);

    let cfg = write_config(tmp.path(), "run.cfg", &out, "");
    assert_eq!(code(&["train", "--config", s(&cfg)]), 3);

    run_ok(&["dataset", "--config", s(&cfg)]);
    fs::write(out.join("dataset/pair_0001_src.cdt"), b"CDT9garbage").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg)]), 4);
}

#[test]
fn energy_reports_both_instances() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.cfg", &out, "");
    run_ok(&["energy", "--config", s(&cfg)]);
    let mut reader = csv::Reader::from_path(out.join("energy.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(&rows[0][0], "heterogeneous");
    let gap: f64 = rows[0][3].parse().unwrap();
    assert!(gap > 0.0);
    assert!(out.join("energy_homogeneous_pixelwise.cdt").exists());
}
