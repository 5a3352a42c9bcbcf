use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
mode = 2d
data.height = 32
data.width = 32
network.levels = 2
network.base = 4
train.epochs = 1
train.batch_size = 2
train.learning_rate = 0.003
synth.count = 6
eval.folds = 2
";

fn covsegnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covsegnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config and a synthetic corpus; returns (config, data root).
fn tiny_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let o = covsegnet(&["--config", s(&cfg), "--out", s(&data), "synth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (cfg, data)
}

#[test]
fn train_without_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&covsegnet(&["--out", s(&out), "train"])), 2);
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&covsegnet(&["--config", s(&missing), "--out", s(&out), "train"])), 2);
}

#[test]
fn bad_flags_and_keys_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&covsegnet(&["--out", s(&out), "params", "--dims", "4d"])), 2);
    assert_eq!(code(&covsegnet(&["--out", s(&out), "--set", "network.depth=3", "params"])), 2);
    assert_eq!(code(&covsegnet(&["--out", s(&out), "ablate", "--variants", ""])), 2);
    assert_eq!(code(&covsegnet(&["--out", s(&out), "ablate"])), 2);
    assert_eq!(code(&covsegnet(&["--out", s(&out), "no-such-command"])), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let ckpt = dir.path().join("absent.ckpt");
    let o = covsegnet(&["--out", s(&out), "predict", "--input", "x.png", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn params_reports_published_rows_and_writes_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = covsegnet(&["--out", s(&out), "params", "--dims", "2d"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for published in ["0.37M", "1.60M", "6.70M", "27.00M"] {
        assert!(text.contains(published), "{text}");
    }
    let csv = std::fs::read_to_string(out.join("params.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("config.snapshot").is_file());
}

#[test]
fn snapshot_replays_to_the_same_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&covsegnet(&["--desk", "--seed", "5", "--set", "network.variant=V3", "--out", s(&a), "params"])), 0);
    let snap = a.join("config.snapshot");
    assert_eq!(code(&covsegnet(&["--config", s(&snap), "--out", s(&b), "params"])), 0);
    assert_eq!(std::fs::read_to_string(&snap).unwrap(), std::fs::read_to_string(b.join("config.snapshot")).unwrap());
}

#[test]
fn train_is_deterministic_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_corpus(dir.path());
    let root = format!("data.root={}", s(&data));
    let mut curves = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let o = covsegnet(&["--config", s(&cfg), "--set", &root, "--seed", "7", "--out", s(&out), "train"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("checkpoints/best.ckpt").is_file());
        assert!(out.join("loss.png").is_file());
        curves.push(std::fs::read_to_string(out.join("curves.csv")).unwrap());
    }
    assert_eq!(curves[0], curves[1]);
    let plots = dir.path().join("plots");
    let o = covsegnet(&["--out", s(&plots), "plot", "--run", s(&dir.path().join("r1"))]);
    assert_eq!(code(&o), 0);
    assert!(plots.join("dice.png").is_file());

    let pred = dir.path().join("pred");
    let ckpt = dir.path().join("r1/checkpoints/best.ckpt");
    let image = data.join("images/s000.png");
    let gt = data.join("masks/s000.png");
    let o = covsegnet(&[
        "--out",
        s(&pred),
        "predict",
        "--input",
        s(&image),
        "--checkpoint",
        s(&ckpt),
        "--gt",
        s(&gt),
        "--probabilities",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mask.png", "probability.png", "overlay.png"] {
        assert!(pred.join(f).is_file(), "{f}");
    }
}

fn overlay_colors(dir: &Path, pred: &Path) -> Vec<[u8; 3]> {
    let data = dir.join("data");
    let out = dir.join(format!("ov_{}", pred.file_stem().unwrap().to_str().unwrap()));
    let o = covsegnet(&[
        "--out",
        s(&out),
        "plot",
        "--image",
        s(&data.join("images/s001.png")),
        "--pred",
        s(pred),
        "--gt",
        s(&data.join("masks/s001.png")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = image::open(out.join("overlay.png")).unwrap().to_rgb8();
    img.pixels().map(|p| p.0).collect()
}

#[test]
fn overlays_follow_the_color_convention() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = tiny_corpus(dir.path());
    let gt_path = data.join("masks/s001.png");
    let gt = image::open(&gt_path).unwrap().to_luma8();
    let lesion: Vec<bool> = gt.pixels().map(|p| p.0[0] != 0).collect();
    assert!(lesion.iter().any(|&l| l));

    let colors = overlay_colors(dir.path(), &gt_path);
    for (c, &l) in colors.iter().zip(&lesion) {
        if l {
            assert_eq!(*c, [255, 255, 0]);
        } else {
            assert!(c[0] == c[1] && c[1] == c[2], "background must stay gray");
        }
    }

    let empty = dir.path().join("empty.png");
    image::GrayImage::new(gt.width(), gt.height()).save(&empty).unwrap();
    let colors = overlay_colors(dir.path(), &empty);
    for (c, &l) in colors.iter().zip(&lesion) {
        if l {
            assert_eq!(*c, [255, 0, 0]);
        } else {
            assert!(c[0] == c[1] && c[1] == c[2]);
        }
    }
}

#[test]
fn ablation_table_and_sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("ab");
    let o = covsegnet(&["--config", s(&cfg), "--out", s(&out), "ablate", "--variants", "V1,V7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("p vs V1"), "{table}");
    let rows: Vec<&str> = table.lines().filter(|l| l.contains('±')).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(out.join("ablation.json").is_file());

    let out = dir.path().join("sweep");
    let o = covsegnet(&["--config", s(&cfg), "--out", s(&out), "ablate", "--levels", "2,3", "--stages", "1,2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let grid: Vec<&str> = table.lines().filter(|l| l.starts_with("L=")).collect();
    assert_eq!(grid.len(), 2, "{table}");
    assert!(grid.iter().all(|r| r.matches('±').count() == 2), "{table}");
}

#[test]
fn evaluate_scores_checkpoints_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_corpus(dir.path());
    let root = format!("data.root={}", s(&data));
    let run = dir.path().join("run");
    assert_eq!(code(&covsegnet(&["--config", s(&cfg), "--set", &root, "--out", s(&run), "train"])), 0);
    let ckpt = run.join("checkpoints/best.ckpt");
    let copy = dir.path().join("other.ckpt");
    std::fs::copy(&ckpt, &copy).unwrap();
    let out = dir.path().join("eval");
    let o = covsegnet(&[
        "--config",
        s(&cfg),
        "--set",
        &root,
        "--out",
        s(&out),
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--checkpoint",
        s(&copy),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("other vs best: rank-sum p = 1.0000"), "{table}");
    assert!(out.join("report.json").is_file() && out.join("report.csv").is_file());
}
