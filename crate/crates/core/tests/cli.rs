use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use itmn::dataset::DatasetIndex;
use itmn::hdrio::{self, LdrImage, PnmDepth};
use itmn::nn::{build_generator, WidthMultiplier};

fn itmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itmn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hdr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn model(dir: &Path) -> PathBuf {
    let path = dir.join("g.itmn");
    build_generator::<f32>(WidthMultiplier::DESK, 5).unwrap().save_params(&path).unwrap();
    path
}

fn ldr_file(dir: &Path, name: &str, w: usize, h: usize) -> PathBuf {
    let img = LdrImage::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
    let path = dir.join(name);
    hdrio::save_pnm(&img, PnmDepth::Eight, &path).unwrap();
    path
}

#[test]
fn synth_three_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = itmn(&["synth", p(&fixtures()), p(&out), "--peak-nits", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("synthesized 3 pairs"));
    let index = DatasetIndex::load(&out).unwrap();
    assert_eq!(index.len(), 3);
    assert!(index.records.iter().all(|r| r.peak_nits == 1000.0 && r.width == 128));
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("peak_nits = 1e3\n"));
}

#[test]
fn synth_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = itmn(&["synth", p(&empty), p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no decodable HDR images"));
    let missing = itmn(&["synth", p(&dir.path().join("nope")), p(&dir.path().join("out"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_dry_run_echoes_defaults() {
    let desk = itmn(&["train", "--dry-run"]);
    assert_eq!(desk.status.code(), Some(0));
    let text = stdout(&desk);
    for line in ["lambda = 1e4", "alpha = 1e5", "lr0 = 1e-4", "batch_size = 4", "iterations = 2000", "width = 1/4"] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
    let paper = stdout(&itmn(&["train", "--dry-run", "--preset", "paper"]));
    for line in ["batch_size = 6", "iterations = 80000", "width = 1/1", "patch_size = 512"] {
        assert!(paper.lines().any(|l| l == line), "missing {line:?}");
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# sweep base\nlambda = 100\nalpha = 0 # no gradients\nmode = no_dmse\n").unwrap();
    let o = itmn(&["train", "--dry-run", "--config", p(&cfg), "--lambda", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lambda = 5\n") && text.contains("alpha = 0\n") && text.contains("mode = no_dmse\n"));

    fs::write(&cfg, "lamda = 100\n").unwrap();
    let bad = itmn(&["train", "--dry-run", "--config", p(&cfg)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("unknown config key \"lamda\""));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(itmn(&["train", "--batch-size", "many"]).status.code(), Some(1));
    assert_eq!(itmn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(itmn(&["train", "--dry-run", "--patch-size", "40"]).status.code(), Some(1));
    assert_eq!(itmn(&["train"]).status.code(), Some(1));
    assert_eq!(itmn(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_defaults() {
    let train = stdout(&itmn(&["train", "--help"]));
    for flag in [
        "--mode", "--lambda", "--alpha", "--batch-size", "--iterations", "--lr0", "--lr-decay-factor",
        "--lr-decay-every", "--seed", "--checkpoint-every", "--patch-size", "--width", "--preset",
    ] {
        let lines: Vec<&str> = train.lines().collect();
        let i = lines
            .iter()
            .position(|l| l.trim_start().starts_with(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{flag} missing from help"));
        assert!(lines[i + 1].contains("[default:"), "{flag} lacks a default in\n{train}");
    }
    assert!(train.contains("[default: 1e4]") && train.contains("[default: 1e5]") && train.contains("[default: 1e-4]"));
    let synth = stdout(&itmn(&["synth", "--help"]));
    assert!(synth.contains("[default: 1000]") && synth.contains("[default: 0.18]"));
    let eval = stdout(&itmn(&["eval", "--help"]));
    assert!(eval.contains("[default: -2,-1,0,1,2]") && eval.contains("[default: 2.2]"));
    let gc = stdout(&itmn(&["gradcheck", "--help"]));
    assert!(gc.contains("[default: 1,2,3,4,5]") && gc.contains("[default: 0.00001]"));
}

#[test]
fn infer_shapes_padding_and_rgbe() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(dir.path());
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    let square = ldr_file(&inputs, "square.ppm", 64, 64);
    let odd = ldr_file(dir.path(), "odd.ppm", 65, 65);
    let out = dir.path().join("out");

    let o = itmn(&["infer", "--model", p(&g), p(&inputs), "--out", p(&out), "--rgbe", "--peak-nits", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pfm = hdrio::read_image(&out.join("square.pfm")).unwrap();
    assert_eq!((pfm.width, pfm.height), (64, 64));
    let rgbe = hdrio::read_image(&out.join("rgbe/square.hdr")).unwrap();
    for (a, b) in pfm.pixels.chunks(3).zip(rgbe.pixels.chunks(3)) {
        let max = a.iter().fold(0.0f32, |m, &v| m.max(v)) as f64 * 1000.0;
        for c in 0..3 {
            assert!((0.0..=1000.0).contains(&b[c]));
            assert!((a[c] as f64 * 1000.0 - b[c] as f64).abs() <= max / 256.0 + 1e-3);
        }
    }

    let o = itmn(&["infer", "--model", p(&g), p(&odd), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("divisible by 32"), "{}", stderr(&o));

    let o = itmn(&["infer", "--model", p(&g), p(&odd), p(&square), "--out", p(&out), "--pad", "reflect"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let padded = hdrio::read_image(&out.join("odd.pfm")).unwrap();
    assert_eq!((padded.width, padded.height), (65, 65));
}

#[test]
fn infer_reports_per_file_failures() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(dir.path());
    let good = ldr_file(dir.path(), "good.ppm", 32, 32);
    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"P6\n2 2\n255\n").unwrap();
    let out = dir.path().join("out");
    let o = itmn(&["infer", "--model", p(&g), p(&bad), p(&good), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.join("good.pfm").exists());
    assert!(stdout(&o).contains("1 of 2 images"));
}

#[test]
fn eval_self_hits_caps_and_needs_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    let o = itmn(&["eval", p(&fixtures()), p(&fixtures()), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["id", "mpsnr_db", "ssim", "log_psnr_db"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!((&r[1], &r[2], &r[3]), ("99.0", "1.0", "99.0"));
    }
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(itmn(&["eval", p(&empty), p(&fixtures())]).status.code(), Some(1));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = itmn(&["gradcheck", "--only", "sigmoid,leaky_relu"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("passed"));
    let broken = itmn(&["gradcheck", "--only", "sigmoid", "--inject-fault", "sigmoid"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stdout(&broken).contains("FAIL"));
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = itmn(&["synth", p(&fixtures()), p(&data), "--size", "32"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    data
}

#[test]
fn sweep_writes_one_log_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("run");
    let o = itmn(&[
        "train", "--data", p(&data), "--out", p(&out), "--iterations", "2", "--batch-size", "1",
        "--patch-size", "32", "--width", "1/16", "--sweep", "alpha=1e3,1e5,1e7", "lambda=1e2,1e4,1e6",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut cells: Vec<String> = fs::read_dir(out.join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    cells.sort();
    assert_eq!(
        cells,
        [
            "alpha=1e3_lambda=1e4",
            "alpha=1e5_lambda=100",
            "alpha=1e5_lambda=1e4",
            "alpha=1e5_lambda=1e6",
            "alpha=1e7_lambda=1e4",
        ]
    );
    for c in &cells {
        let cell = out.join("sweep").join(c);
        assert_eq!(itmn::train::read_log(&cell.join("train_log.jsonl")).unwrap().len(), 2);
        let echo = fs::read_to_string(cell.join("config.echo")).unwrap();
        let (a, l) = c.split_once('_').unwrap();
        assert!(echo.contains(&format!("{} = {}\n", "alpha", &a[6..])));
        assert!(echo.contains(&format!("{} = {}\n", "lambda", &l[7..])));
    }
}

#[test]
fn numerical_blowup_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let o = itmn(&[
        "train", "--data", p(&data), "--out", p(&dir.path().join("run")), "--iterations", "50", "--batch-size",
        "1", "--patch-size", "32", "--width", "1/16", "--lr0", "1e30",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}
