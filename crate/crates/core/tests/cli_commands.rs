use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tubelet_core::dataio::{read_container, render_diverging};
use tubelet_core::objectives::{render_mse, MetricsReport, REPORT_COLUMNS};

const TINY: &str = r#"{"data": {"H": 20, "W": 20, "n_samples": 6, "clouds": 8},
  "model": {"variant": "smts-vivit", "d_e": 16, "depth": 1, "heads": 2, "ff_dim": 32},
  "train": {"epochs": 4, "batch_size": 2, "val_every": 2}}"#;

fn tubelet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubelet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tubelet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let cfg = self.path("tiny.json");
        let mut args = vec!["gen-data", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn gen_data_defaults_overrides_and_digest() {
    let f = Fixture::new();
    let a = f.path("a.rstk");
    let summary = ok(&["gen-data", "--out", s(&a)]);
    assert!(summary.contains("samples 20 train 16 val 4 clouds 20"), "{summary}");
    let data = read_container(&a).unwrap();
    assert_eq!((data.len(), data.train().len(), data.samples[0].height()), (20, 16, 60));

    let b = f.path("b.rstk");
    let summary = ok(&["gen-data", "--out", s(&b), "--clouds", "30"]);
    assert!(summary.contains("clouds 30"), "{summary}");

    let c = f.path("c.rstk");
    ok(&["gen-data", "--out", s(&c)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let digest = |text: &str| text.split("digest ").nth(1).unwrap().split(' ').next().unwrap().to_string();
    assert_eq!(digest(&summary).len(), 64);
}

#[test]
fn identity_eval_reports_perfect_scores() {
    let f = Fixture::new();
    let data = f.data("d.rstk", &[]);
    let out = f.path("eval");
    let table = ok(&["eval", "--identity", "--data", s(&data), "--out", s(&out), "--split", "all"]);
    let report = MetricsReport::from_json(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let m = report.rows[0].metrics;
    assert_eq!((m.mse, m.ssim, m.psnr), (0.0, 1.0, 100.0));
    assert!(table.contains(&render_mse(m.mse)));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), REPORT_COLUMNS.len());
}

#[test]
fn trained_eval_renders_published_units() {
    let f = Fixture::new();
    let data = f.data("d.rstk", &[]);
    let run = f.path("run");
    let cfg = f.path("tiny.json");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--epochs", "2"]);
    let out = f.path("eval");
    let ckpt = run.join("checkpoint.tblt");
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
    let report = MetricsReport::from_json(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.variant, "SMTS-ViViT");
    assert!(row.metrics.mse > 0.0);
    assert!(table.contains(&format!("{:.3}", row.metrics.mse * 1e3)), "{table}");
    assert!(table.contains(&format!("{:.3}", row.metrics.sam * 10.0)), "{table}");
}

fn read_png(path: &Path) -> (usize, usize, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width as usize, info.height as usize, buf)
}

#[test]
fn reconstruct_writes_four_rows_per_date() {
    let f = Fixture::new();
    let data = f.data("d.rstk", &[]);
    let out = f.path("png");
    ok(&["reconstruct", "--identity", "--data", s(&data), "--sample", "1", "--out", s(&out)]);
    let count = std::fs::read_dir(&out).unwrap().count();
    assert_eq!(count, 24);

    let sample = &read_container(&data).unwrap().samples[1];
    let white = render_diverging(&tubelet_core::Tensor::zeros(vec![1, 1]), 1.0).unwrap();
    for t in 0..6 {
        let (w, h, input) = read_png(&out.join(format!("sample001_t{t}_input.png")));
        assert_eq!((w, h), (20, 20));
        for px in 0..w * h {
            if sample.mask.data()[t * w * h + px] == 1.0 {
                assert_eq!(&input[3 * px..3 * px + 3], [0, 0, 0]);
            }
        }
        let (_, _, error) = read_png(&out.join(format!("sample001_t{t}_error.png")));
        assert!(error.chunks(3).all(|p| p == white.as_slice()));
    }
}

#[test]
fn train_smoke_and_sar_mismatch() {
    let f = Fixture::new();
    let data = f.data("d.rstk", &[]);
    let cfg = f.path("tiny.json");
    let run = f.path("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--epochs", "2"]);
    assert!(stdout.contains("epoch 2/2"));
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite()));

    let msi_only = f.data("msi.rstk", &["--no-sar"]);
    let out = tubelet(&["train", "--config", s(&cfg), "--data", s(&msi_only), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    assert!(stderr.contains("SAR"), "{stderr}");
    ok(&["train", "--config", s(&cfg), "--data", s(&msi_only), "--out", s(&run), "--variant", "mts-vivit", "--epochs", "1"]);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.data("d.rstk", &[]);
    let cfg = f.path("tiny.json");
    let (full, split) = (f.path("full"), f.path("split"));
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--stop-after", "1"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--stop-after", "2",
        "--resume", s(&split.join("checkpoint.tblt"))]);
    assert_eq!(std::fs::read_to_string(split.join("loss_log.csv")).unwrap().lines().count(), 4);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split),
        "--resume", s(&split.join("checkpoint.tblt"))]);
    for file in ["loss_log.csv", "checkpoint.tblt"] {
        assert_eq!(std::fs::read(full.join(file)).unwrap(), std::fs::read(split.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = Fixture::new();
    let bad_cfg = f.path("bad.json");
    std::fs::write(&bad_cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = f.path("x.rstk");
    assert_eq!(tubelet(&["gen-data", "--config", s(&bad_cfg), "--out", s(&out)]).status.code(), Some(2));

    let data = f.data("d.rstk", &[]);
    let mut bytes = std::fs::read(&data).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&data, bytes).unwrap();
    let res = tubelet(&["eval", "--identity", "--data", s(&data), "--out", s(&f.path("e"))]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("checksum"));
    assert!(!tubelet(&["train", "--data", "/nonexistent/file.rstk"]).status.success());
}
