use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gift::descriptor_file;
use gift::image_io::save_image;
use gift::pipeline::Descriptor;
use gift::textures;
use tempfile::TempDir;

fn gift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gift"))
        .args(args)
        .current_dir(dir)
        .env_remove("GIFT_SEED")
        .output()
        .expect("run gift")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn texture_png(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    save_image(&textures::value_noise(w, h, seed, 12.0, 3), &path).unwrap();
    path
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn extract_ten_keypoints() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 64, 64, 1);
    let kp: String = (0..10).map(|k| format!("{},{}\n", 5 + 5 * k, 60 - 4 * k)).collect();
    std::fs::write(dir.path().join("kp.csv"), format!("x,y\n{kp}")).unwrap();
    let o = gift(dir.path(), &["extract", "--image", "a.png", "--keypoints", "kp.csv", "--out", "a.desc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("extracted 10 descriptors"));
    let (d, dim) = descriptor_file::load(dir.path().join("a.desc")).unwrap();
    assert_eq!((d.len(), dim), (10, 128));
    assert_eq!(d[3].point, (20.0, 48.0));
}

#[test]
fn extract_grid_on_eval_resolution() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "big.png", 480, 360, 2);
    let o = gift(dir.path(), &["extract", "--image", "big.png", "--grid", "8", "--depth", "1", "--out", "g.desc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (d, _) = descriptor_file::load(dir.path().join("g.desc")).unwrap();
    assert_eq!(d.len(), 64);
    assert_eq!(d[0].point, (29.5, 22.0));
    assert_eq!(d[63].point, (449.5, 337.0));
}

#[test]
fn extract_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 64, 64, 1);
    let o = gift(dir.path(), &["extract", "--image", "a.png", "--grid", "2", "--checkpoint", "missing.ckpt", "--out", "x.desc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));

    std::fs::write(dir.path().join("bad.ckpt"), b"NOTACKPT1 and then some").unwrap();
    let o = gift(dir.path(), &["extract", "--image", "a.png", "--grid", "2", "--checkpoint", "bad.ckpt", "--out", "x.desc"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    std::fs::write(dir.path().join("kp.csv"), "x,y\n1,2\nthree,4\n").unwrap();
    let o = gift(dir.path(), &["extract", "--image", "a.png", "--keypoints", "kp.csv", "--out", "x.desc"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("line 3"));

    std::fs::write(dir.path().join("noise.png"), b"not an image").unwrap();
    let o = gift(dir.path(), &["extract", "--image", "noise.png", "--grid", "2", "--out", "x.desc"]);
    assert_eq!(o.status.code(), Some(4));

    let o = gift(dir.path(), &["extract", "--image", "nope.png", "--grid", "2", "--out", "x.desc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.png"));
    assert!(!dir.path().join("x.desc").exists());
}

#[test]
fn match_identical_files_under_identity() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 64, 64, 3);
    let o = gift(dir.path(), &["extract", "--image", "a.png", "--grid", "4", "--depth", "1", "--out", "a.desc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("id.json"), "[1, 0, 0, 0, 1, 0, 0, 0, 1]").unwrap();

    let o = gift(dir.path(), &["match", "--a", "a.desc", "--b", "a.desc", "--homography", "id.json", "--out", "m.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&bytes(dir.path(), "m.json")).unwrap();
    assert_eq!(report["mean_pck"], 1.0);
    assert_eq!(report["per_pair"][0]["queries"], 16);
    let csv = String::from_utf8(bytes(dir.path(), "m.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("qx,qy,rx,ry,distance,correct"));
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0.00000000e0,1")));

    let o = gift(dir.path(), &["match", "--a", "a.desc", "--b", "a.desc", "--out", "plain.csv"]);
    assert!(o.status.success());
    assert!(dir.path().join("plain.csv").exists());
    assert!(!dir.path().join("plain.json").exists());
    let csv = String::from_utf8(bytes(dir.path(), "plain.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn match_reports_shape_and_corruption() {
    let dir = TempDir::new().unwrap();
    let desc = |dim: usize| Descriptor {
        values: (0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        point: (1.0, 2.0),
        degenerate: false,
    };
    descriptor_file::save(dir.path().join("d128.desc"), &[desc(128)], 128).unwrap();
    descriptor_file::save(dir.path().join("d64.desc"), &[desc(64)], 64).unwrap();
    let o = gift(dir.path(), &["match", "--a", "d128.desc", "--b", "d64.desc", "--out", "m.csv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("128") && stderr(&o).contains("64"));

    let mut raw = bytes(dir.path(), "d128.desc");
    raw[5] = b'X';
    std::fs::write(dir.path().join("bad.desc"), &raw).unwrap();
    let o = gift(dir.path(), &["match", "--a", "bad.desc", "--b", "d128.desc", "--out", "m.csv"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("offset 5"), "{}", stderr(&o));

    std::fs::write(dir.path().join("short.desc"), &raw[..15]).unwrap();
    let o = gift(dir.path(), &["match", "--a", "d128.desc", "--b", "short.desc", "--out", "m.csv"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 64, 64, 4);
    let run = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gift"));
        c.current_dir(dir.path()).env_remove("GIFT_SEED");
        if let Some(e) = env {
            c.env("GIFT_SEED", e);
        }
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        let o = c.args(["extract", "--image", "a.png", "--grid", "3", "--depth", "1", "--out", out]).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        bytes(dir.path(), out)
    };
    let flag = run("flag.desc", Some("7"), None);
    assert_eq!(run("env.desc", None, Some("7")), flag);
    assert_eq!(run("both.desc", Some("7"), Some("8")), flag);
    assert_ne!(run("other.desc", None, Some("8")), flag);
    assert_eq!(run("zero.desc", None, None), run("zero2.desc", Some("0"), None));
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 96, 80, 5);
    for w in ["1", "3"] {
        let o = gift(dir.path(), &["--workers", w, "extract", "--image", "a.png", "--grid", "5", "--depth", "1", "--out", &format!("w{w}.desc")]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = gift(
            dir.path(),
            &["--workers", w, "train", "--steps", "2", "--set", "depth=1", "--set", "batch=16", "--textures", "2", "--out", &format!("w{w}.ckpt"), "--loss-csv", &format!("w{w}.csv")],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(bytes(dir.path(), "w1.desc"), bytes(dir.path(), "w3.desc"));
    assert_eq!(bytes(dir.path(), "w1.ckpt"), bytes(dir.path(), "w3.ckpt"));
    assert_eq!(bytes(dir.path(), "w1.csv"), bytes(dir.path(), "w3.csv"));
}

#[test]
fn train_config_file_and_resume() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), "# toy run\nsteps = 2\nbatch = 16\ndepth = 1\nlr = 0.002\n").unwrap();
    let o = gift(dir.path(), &["train", "--config", "cfg.txt", "--textures", "2", "--out", "a.ckpt", "--loss-csv", "a.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(bytes(dir.path(), "a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,loss\n0,"));

    let o = gift(dir.path(), &["train", "--config", "cfg.txt", "--steps", "1", "--textures", "2", "--init", "a.ckpt", "--out", "b.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(bytes(dir.path(), "a.ckpt"), bytes(dir.path(), "b.ckpt"));

    std::fs::write(dir.path().join("typo.txt"), "stpes = 2\n").unwrap();
    let o = gift(dir.path(), &["train", "--config", "typo.txt", "--out", "c.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stpes"));
}

#[test]
fn eval_manifest_and_synthetic_pairs() {
    let dir = TempDir::new().unwrap();
    texture_png(dir.path(), "a.png", 64, 64, 6);
    std::fs::copy(dir.path().join("a.png"), dir.path().join("b.png")).unwrap();
    let manifest = r#"[{"image_a": "a.png", "image_b": "b.png", "homography": [1,0,0,0,1,0,0,0,1], "keypoints": [], "source": "copy"}]"#;
    std::fs::write(dir.path().join("pairs.json"), manifest).unwrap();
    let o = gift(dir.path(), &["eval", "--manifest", "pairs.json", "--grid", "4", "--depth", "1", "--out", "r.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&bytes(dir.path(), "r.json")).unwrap();
    assert_eq!(report["pairs"], 1);
    assert_eq!(report["mean_pck"], 1.0);

    let o = gift(dir.path(), &["eval", "--synthetic", "er", "--textures", "2", "--grid", "4", "--depth", "1", "--out", "er.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&bytes(dir.path(), "er.json")).unwrap();
    assert_eq!(report["per_pair"][1]["name"], "er-1");
}

#[test]
fn sweep_writes_curve_and_plot() {
    let dir = TempDir::new().unwrap();
    let o = gift(
        dir.path(),
        &["sweep", "--axis", "rotation", "--steps", "3", "--textures", "1", "--grid", "4", "--depth", "1", "--out", "s.csv", "--plot", "s.png"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(bytes(dir.path(), "s.csv")).unwrap();
    let mags: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(mags, ["0.00000000e0", "9.00000000e1", "1.80000000e2"]);
    assert!(csv.lines().nth(1).unwrap().ends_with(",1.00000000e0"));
    assert!(dir.path().join("s.png").exists());
}

#[test]
fn selftest_catches_injected_fault() {
    let dir = TempDir::new().unwrap();
    let o = gift(dir.path(), &["selftest", "--trials", "10", "--images", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 7 && out.lines().all(|l| l.contains(" pass ")), "{out}");

    let o = gift(dir.path(), &["selftest", "--trials", "10", "--images", "0", "--fault", "reflect-padding"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lemma2"), "{}", stderr(&o));
}
