use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcball(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcball"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Noiseless 120-frame dataset on the default rig.
fn write_config(dir: &Path, extra: &str) -> String {
    let cfg = dir.join("run.cfg");
    let text = format!(
        "[dataset]\ndir = data\n\n[sim]\nseed = 7\nn_frames = 120\n\n\
         [noise]\nsigma_px = 0\np_miss = 0\nlambda_fp = 0\n\n\
         [detector]\nDET_CONF = 0.9\nIOU_THD = 0.2\nRESIZE = 160\n\n\
         [eval]\nDistance = 50\n\n[training]\nAlpha = 0.5\n{extra}"
    );
    fs::write(&cfg, text).unwrap();
    cfg.display().to_string()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn kv(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("missing {key}"))
        .to_string()
}

#[test]
fn simulate_is_deterministic_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o1 = mcball(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    let o2 = mcball(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert!(o1.status.success(), "{}", stderr(&o1));
    assert!(o2.status.success());
    assert!(stdout(&o1).contains("frames: 120"));
    assert!(stdout(&o1).contains("cameras: 36"));
    assert_eq!(read_tree(&a), read_tree(&b));
    let o3 = mcball(&[
        "simulate",
        "--config",
        &cfg,
        "--seed",
        "8",
        "--out",
        tmp.path().join("c").to_str().unwrap(),
    ]);
    assert!(o3.status.success());
    assert_ne!(
        read_tree(&a)["truth3d.txt"],
        read_tree(&tmp.path().join("c"))["truth3d.txt"]
    );
}

#[test]
fn config_errors_exit_2() {
    let o = mcball(&["simulate", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[detector]\nDET_CONF = 2\n");
    assert_eq!(mcball(&["simulate", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "[tracker]\nlostfrm = 3\n");
    assert_eq!(mcball(&["track", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(mcball(&["track", "--strategy", "M9"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = mcball(&["track", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(mcball(&["eval", "--config", &cfg]).status.code(), Some(3));
}

#[test]
fn track_eval_and_bench_on_noiseless_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    assert!(mcball(&["simulate", "--config", &cfg]).status.success());
    let data = tmp.path().join("data");

    let o = mcball(&["track", "--config", &cfg, "--strategy", "M3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = fs::read_to_string(data.join("outputs_M3.txt")).unwrap();
    let lines: Vec<&str> = records.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 120);
    let ok = lines
        .iter()
        .filter(|l| l.split_whitespace().nth(1) == Some("OK"))
        .count();
    assert!(ok as f64 >= 0.99 * 120.0, "{ok} OK frames");

    // Re-running gives identical records; timing lives only in the bench file.
    assert!(mcball(&[
        "track",
        "--config",
        &cfg,
        "--out",
        data.join("again.txt").to_str().unwrap()
    ])
    .status
    .success());
    assert_eq!(records, fs::read_to_string(data.join("again.txt")).unwrap());

    let report = tmp.path().join("report.txt");
    let o = mcball(&[
        "eval",
        "--config",
        &cfg,
        "--strategy",
        "M3",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let header = table.lines().next().unwrap();
    let (a, b, c) = (
        header.find("iou=0.2").unwrap(),
        header.find("iou=1e-6").unwrap(),
        header.find("dist=50").unwrap(),
    );
    assert!(a < b && b < c);
    let kv_text = fs::read_to_string(&report).unwrap();
    let line3d = kv_text.lines().find(|l| l.starts_with("scope=3d")).unwrap();
    let field = |k: &str| -> f64 {
        line3d
            .split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("precision") >= 0.99 && field("recall") >= 0.99, "{line3d}");

    assert!(mcball(&["track", "--config", &cfg, "--strategy", "M1"])
        .status
        .success());
    let m1 = fs::read_to_string(data.join("outputs_M1.txt.bench")).unwrap();
    let m3 = fs::read_to_string(data.join("outputs_M3.txt.bench")).unwrap();
    assert_eq!(kv(&m1, "full_image_frames"), "24");
    assert_eq!(kv(&m3, "full_image_frames"), "1");
    assert!(kv(&m3, "mean_frame_ms").parse::<f64>().unwrap() >= 0.0);
    assert_eq!(m3.lines().filter(|l| l.starts_with("frame_ms ")).count(), 120);

    let o = mcball(&["bench", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in ["M1", "M2", "M3"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(s)), "{}", stdout(&o));
    }
}

#[test]
fn shuffled_outputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sim]\nn_frames = 30\n");
    assert!(mcball(&["simulate", "--config", &cfg]).status.success());
    assert!(mcball(&["track", "--config", &cfg]).status.success());
    let data = tmp.path().join("data");
    let text = fs::read_to_string(data.join("outputs_M3.txt")).unwrap();
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    lines.swap(3, 17);
    let shuffled = data.join("shuffled.txt");
    fs::write(&shuffled, lines.join("\n") + "\n").unwrap();
    let o = mcball(&["eval", "--config", &cfg, "--outputs", shuffled.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn template_detector_requires_rendered_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sim]\nn_frames = 5\n");
    assert!(mcball(&["simulate", "--config", &cfg]).status.success());
    let o = mcball(&["track", "--config", &cfg, "--detector", "template"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn shipped_config_is_valid() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/run.cfg");
    let tmp = tempfile::tempdir().unwrap();
    // Shortened copy so the run stays quick; everything else is verbatim.
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("n_frames = 450", "n_frames = 3");
    let local = tmp.path().join("run.cfg");
    fs::write(&local, text).unwrap();
    let o = mcball(&["simulate", "--config", local.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frames: 3"));
}
