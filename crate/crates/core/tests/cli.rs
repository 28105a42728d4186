use std::path::Path;
use std::process::{Command, Output};

use mgcd::io::images::{load_dataset, load_tensor, save_png};
use mgcd::textures::{generate, TextureKind};

fn mgcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgcd")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = "\
# desk-sized smoke run
dataset = data
output = run
grids = 2
channels = 1
channel_scale = 0.125
batch_size = 8
iterations = 2
learning_rate = 0.001
langevin_steps = 2
checkpoint_every = 1
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = mgcd(dir.path(), &["textures", "--n", "16", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mgcd(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&mgcd(dir.path(), &["sample"])), 1);
    assert_eq!(code(&mgcd(dir.path(), &["--help"])), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--dataset=missing"])), 2);
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--colour=blue"])), 2);
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--batch_size=many"])), 2);
    assert_eq!(code(&mgcd(p, &["train", "--config", "absent.cfg"])), 2);
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--single_grid_steps=5", "--match_budget=true"])), 2);
}

#[test]
fn runtime_errors_exit_3() {
    let dir = setup();
    assert_eq!(code(&mgcd(dir.path(), &["sample", "--checkpoint", "data/00000.png"])), 3);
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&mgcd(dir.path(), &["train", "--config", "tiny.cfg", "--dataset=empty"])), 3);
}

#[test]
fn train_then_use_the_checkpoint() {
    let dir = setup();
    let p = dir.path();
    let o = mgcd(p, &["train", "--config", "tiny.cfg", "--iterations=3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p.join("run/diagnostics.csv")).unwrap();
    assert!(csv.starts_with("iteration,grid,grad_l1,score_train,score_synth,value_gap\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(std::fs::read_to_string(p.join("run/config.txt")).unwrap().contains("iterations = 3"));

    assert_eq!(code(&mgcd(p, &["sample", "--checkpoint", "run/model.mgcd", "--n", "4", "--out", "s"])), 0);
    assert!(p.join("s/grid1_4x4.png").exists() && p.join("s/grid2_16x16.png").exists());

    assert_eq!(code(&mgcd(p, &["inpaint", "--checkpoint", "run/model.mgcd", "--images", "data", "--out", "ip"])), 0);
    let report = std::fs::read_to_string(p.join("ip/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 17);

    let o = mgcd(p, &["eval", "--checkpoint", "run/model.mgcd", "--set", "train=data"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("set,grid,n,mean,std\ntrain,1,16,"));

    assert_eq!(code(&mgcd(p, &["features", "--checkpoint", "run/model.mgcd", "--images", "data", "--out", "f"])), 0);
    let f1 = load_tensor(&p.join("f/grid1.mgtn")).unwrap();
    assert_eq!(f1.shape().n, 16);

    let o = mgcd(p, &["train", "--config", "tiny.cfg", "--iterations=4", "--resume", "run/model.mgcd"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(p.join("run/diagnostics.csv")).unwrap().lines().count(), 1 + 4 * 2);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--output=a"])), 0);
    assert_eq!(code(&mgcd(p, &["train", "--config", "tiny.cfg", "--output=b"])), 0);
    assert_eq!(std::fs::read(p.join("a/model.mgcd")).unwrap(), std::fs::read(p.join("b/model.mgcd")).unwrap());
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mgcd(dir.path(), &["gradcheck", "--configs", "3"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().lines().last().unwrap().starts_with("PASS"));
}

#[test]
fn png_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(TextureKind::Checkers, 3, 3, 8, 2).unwrap();
    for i in 0..3 {
        save_png(&set.images, i, &dir.path().join(format!("{i}.png"))).unwrap();
    }
    let (back, report) = load_dataset(dir.path(), 8, 3).unwrap();
    assert_eq!(report.loaded, 3);
    for (a, b) in back.data().iter().zip(set.images.data()) {
        assert!((a - b).abs() <= 1.0 / 127.5 + 1e-6);
    }
}

#[test]
fn unreadable_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(TextureKind::Noise, 2, 1, 4, 2).unwrap();
    save_png(&set.images, 0, &dir.path().join("a.png")).unwrap();
    std::fs::write(dir.path().join("b.png"), b"garbage").unwrap();
    let (t, report) = load_dataset(dir.path(), 4, 1).unwrap();
    assert_eq!(t.shape().n, 1);
    assert_eq!(report.skipped.len(), 1);
}
