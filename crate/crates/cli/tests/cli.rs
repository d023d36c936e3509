use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tbn_core::flow::RigidPose;
use tbn_core::io::{load_model, read_loss_log, save_model};
use tbn_core::net::Arch;
use tbn_core::recon::IoUReport;
use tbn_core::TbnModel32;
use tbn_service::pngio::{decode_png, encode_png};

const SMALL: &str = r#"{
  "dataset": {"n_scenes": 6, "n_views": 4, "sampling": {"kind": "ring", "step": 90.0}, "image_size": 24, "side": 6, "n_test": 2},
  "arch": {"image_size": 24, "side": 6, "channels": 4, "base": 8},
  "train": {"batch_size": 2, "max_steps": 3}
}"#;

fn tbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbn")).args(args).output().unwrap()
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
        std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.json")
    }

    /// Fresh small checkpoint saved without training.
    fn model(&self) -> PathBuf {
        let p = self.path("fresh.vbm");
        let arch = Arch { image_size: 24, side: 6, channels: 4, base: 8 };
        save_model(&p, &TbnModel32::new(arch, 1).unwrap()).unwrap();
        p
    }

    fn photo(&self) -> PathBuf {
        let p = self.path("photo.png");
        let im = tbn_core::ImagePlane32::from_fn(24, 24, 3, |c, y, x| ((c * 5 + y + 2 * x) % 16) as f32 / 15.0);
        std::fs::write(&p, encode_png(&im).unwrap()).unwrap();
        p
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = tbn(&["fly"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(tbn(&[]).status.code(), Some(2));
}

#[test]
fn bad_inputs_exit_with_two() {
    let f = Fixture::new();
    let missing = tbn(&["gen-data", "--config", s(&f.path("nope.json")), "--out", s(&f.path("d"))]);
    assert_eq!(missing.status.code(), Some(2));
    std::fs::write(f.path("bad.json"), r#"{"train": {"lr": -1.0}}"#).unwrap();
    let bad = tbn(&["gen-data", "--config", s(&f.path("bad.json")), "--out", s(&f.path("d"))]);
    assert_eq!(bad.status.code(), Some(2));
    let pose = tbn(&["synth", "--model", "m.vbm", "--input", "a.png", "--pose", "east", "--target", "0,0"]);
    assert_eq!(pose.status.code(), Some(2));
    let model = f.model();
    let photo = f.photo();
    let mismatch = tbn(&[
        "synth", "--model", s(&model), "--input", s(&photo), "--input", s(&photo), "--pose", "0,0", "--target", "0,0",
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let f = Fixture::new();
    for name in ["a", "b"] {
        assert_ok(&tbn(&["gen-data", "--config", s(&f.config()), "--seed", "4", "--out", s(&f.path(name))]));
    }
    let manifest = |d: &str| std::fs::read(f.path(d).join("manifest.json")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    let m: Value = serde_json::from_slice(&manifest("a")).unwrap();
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["scenes"].as_array().unwrap().len(), 6);
    let view = |d: &str| std::fs::read(f.path(d).join("scenes/00005/view_3.ppm")).unwrap();
    assert_eq!(view("a"), view("b"));
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let f = Fixture::new();
    let data = f.path("data");
    assert_ok(&tbn(&["gen-data", "--config", s(&f.config()), "--out", s(&data)]));
    let run = |name: &str| {
        let out = f.path(name);
        assert_ok(&tbn(&[
            "train", "--config", s(&f.config()), "--data", s(&data), "--threads", "1", "--out", s(&out),
        ]));
        out
    };
    let (a, b) = (run("run_a"), run("run_b"));
    let log = read_loss_log(BufReader::new(std::fs::File::open(a.join("loss.jsonl")).unwrap())).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(std::fs::read(a.join("loss.jsonl")).unwrap(), std::fs::read(b.join("loss.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("model.vbm")).unwrap(), std::fs::read(b.join("model.vbm")).unwrap());
    let model: TbnModel32 = load_model(&a.join("model.vbm")).unwrap();
    assert_eq!(model.arch().side, 6);
    let cfg: Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    let w = &cfg["train"]["weights"];
    let echoed: Vec<f64> = ["perceptual", "ssim", "adversarial", "mask"].iter().map(|k| w[*k].as_f64().unwrap()).collect();
    assert_eq!(echoed, [5.0, 10.0, 0.05, 10.0]);
    let summary: Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 3);
    assert!(summary["heldout_l1"].as_f64().unwrap() > 0.0);
}

#[test]
fn synth_at_the_input_pose_is_the_autoencoded_input() {
    let f = Fixture::new();
    let model = f.model();
    let photo = f.photo();
    let out = f.path("synth");
    assert_ok(&tbn(&[
        "synth", "--model", s(&model), "--input", s(&photo), "--pose", "30,10", "--target", "30,10", "--out", s(&out),
    ]));
    let got = decode_png(&std::fs::read(out.join("synth.png")).unwrap()).unwrap();
    let m: TbnModel32 = load_model(&model).unwrap();
    let input = decode_png(&std::fs::read(&photo).unwrap()).unwrap();
    let auto = m.decode_image(&m.encode(&input).unwrap()).unwrap().rgb().unwrap();
    assert_eq!(got.to_bytes(255), auto.to_bytes(255));
    assert!(out.join("synth_mask.png").exists());
}

#[test]
fn recon_writes_an_iou_report_and_meshes() {
    let f = Fixture::new();
    let model = f.model();
    let out = f.path("recon");
    let run = tbn(&[
        "recon", "--config", s(&f.config()), "--model", s(&model), "--extra", "2", "--mode", "regular", "--mesh", "0.5",
        "--out", s(&out),
    ]);
    assert_ok(&run);
    let report: IoUReport = serde_json::from_slice(&std::fs::read(out.join("iou.json")).unwrap()).unwrap();
    assert_eq!(report.views_added, 2);
    assert_eq!(report.per_scene.len(), 2);
    assert!((0.0..=1.0).contains(&report.mean));
    let raw: Value = serde_json::from_slice(&std::fs::read(out.join("iou.json")).unwrap()).unwrap();
    for key in ["per_scene", "mean", "threshold", "views_added", "mode"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    assert_eq!(raw["mode"], "regular");
    assert!(String::from_utf8_lossy(&run.stdout).contains("regular"));
    assert_eq!(std::fs::read_dir(out.join("meshes")).unwrap().count(), 2);
    let real = tbn(&[
        "recon", "--config", s(&f.config()), "--model", s(&model), "--extra", "3", "--mode", "real", "--out", s(&out),
    ]);
    assert_ok(&real);
    let too_many = tbn(&[
        "recon", "--config", s(&f.config()), "--model", s(&model), "--extra", "4", "--mode", "real", "--out", s(&out),
    ]);
    assert_eq!(too_many.status.code(), Some(2));
    let bad_mode = tbn(&["recon", "--model", s(&model), "--mode", "sideways"]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn manip_applies_the_script() {
    let f = Fixture::new();
    let model = f.model();
    let photo = f.photo();
    let run = |script: &str, name: &str| {
        let p = f.path(&format!("{name}.json"));
        std::fs::write(&p, script).unwrap();
        let out = f.path(name);
        let o = tbn(&[
            "manip", "--model", s(&model), "--input", s(&photo), "--pose", "0,0", "--script", s(&p), "--mesh", "0.5",
            "--out", s(&out),
        ]);
        (o, out)
    };
    let (o, empty) = run("[]", "empty");
    assert_ok(&o);
    let (o, zero) = run(r#"[{"type": "twist", "split_y": 0.0, "alpha": 0.0}]"#, "zero");
    assert_ok(&o);
    let (o, moved) = run(r#"[{"type": "rigid", "azimuth": 90.0, "elevation": 0.0}]"#, "moved");
    assert_ok(&o);
    let png = |d: &Path| std::fs::read(d.join("manip.png")).unwrap();
    assert_eq!(png(&empty), png(&zero));
    assert_ne!(png(&empty), png(&moved));
    let m: TbnModel32 = load_model(&model).unwrap();
    let input = decode_png(&std::fs::read(&photo).unwrap()).unwrap();
    let (expected, _) = m.synthesize(&[(input, RigidPose::identity())], &RigidPose::identity()).unwrap();
    assert_eq!(decode_png(&png(&empty)).unwrap().to_bytes(255), expected.rgb().unwrap().to_bytes(255));
    assert!(empty.join("manip.obj").exists());
    let (o, _) = run(r#"[{"type": "melt"}]"#, "bad");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_code_follows_the_tolerance() {
    let f = Fixture::new();
    let out = f.path("gc");
    let ok = tbn(&["gradcheck", "--tiny", "--stride", "7", "--out", s(&out)]);
    assert_ok(&ok);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max relative error"));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    // a huge step makes the difference quotient useless
    let coarse = tbn(&["gradcheck", "--tiny", "--stride", "7", "--step", "0.5", "--out", s(&out)]);
    assert_eq!(coarse.status.code(), Some(3));
}

#[test]
fn serve_answers_health_checks() {
    let f = Fixture::new();
    let model = f.model();
    let missing = tbn(&["serve", "--model", s(&f.path("missing.vbm"))]);
    assert_eq!(missing.status.code(), Some(2));
    let mut child = Command::new(env!("CARGO_BIN_EXE_tbn"))
        .args(["serve", "--model", &format!("small={}", s(&model)), "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit("//").next().unwrap().to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /models HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"small\""));
}
