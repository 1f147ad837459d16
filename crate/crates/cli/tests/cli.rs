use std::path::{Path, PathBuf};
use std::process::Command;

use issc_cli::commands::{cmd_eval, cmd_train, init_seed, EvalChannel};
use issc_cli::config::RunConfig;
use issc_core::datamodel::read_records;
use issc_core::datasets::Split;
use issc_core::model::IsscModel;
use issc_core::params::Parameters;

const TINY: &str = r#"
seed = 3

[model]
patch_size = 4
embedding_dimension = 2
depths = [2, 2, 2, 2]
head_number = [1, 1, 2, 2]
window_size = 2
mlp_ratio = 0.25
K = 6
N_cls = 3
H = 32
W = 32

[data]
n_train = 8
n_test = 4

[train]
steps = 3
batch_size = 2
crop_size = [32, 32]

[sweep]
values = [4.0]
systems = ["issc"]
repeats = 1
checkpoint = "train/model.safetensors"
"#;

fn issc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_issc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn params(m: &IsscModel<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.push(t.data().to_vec()));
    out
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = issc(&["--config", "/nonexistent/run.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn malformed_config_names_the_field() {
    let (dir, cfg) = setup("");
    std::fs::write(&cfg, "[train]\nsteps = -4\n").unwrap();
    let out = issc(&["--config", s(&cfg), "--out", s(dir.path()), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
    assert_eq!(issc(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_steps_saves_the_initialization() {
    let (dir, cfg) = setup("");
    let out_dir = dir.path().join("train");
    let out = issc(&["--config", s(&cfg), "--out", s(&out_dir), "train", "--steps", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::load(&cfg).unwrap();
    let init = IsscModel::<f32>::new(&cfg.model, init_seed(&cfg)).unwrap();
    let (saved, _) = issc_core::checkpoint::load(&out_dir.join("model.safetensors")).unwrap();
    assert_eq!(params(&saved), params(&init));
}

#[test]
fn train_eval_sweep_and_verify() {
    let (dir, cfg_path) = setup("");
    let train_dir = dir.path().join("train");
    let out = issc(&["--config", s(&cfg_path), "--out", s(&train_dir), "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["history.csv", "eval_history.csv", "model.safetensors", "run_config.toml"] {
        assert!(train_dir.join(f).is_file(), "{f}");
    }

    // The training-set mIoU stored with the checkpoint is reproduced exactly.
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let ckpt = train_dir.join("model.safetensors");
    let (_, meta) = issc_core::checkpoint::load(&ckpt).unwrap();
    let cm = cmd_eval(&cfg, &ckpt, EvalChannel::Noiseless, Split::Train, &dir.path().join("eval")).unwrap();
    assert_eq!(cm.miou().unwrap().to_string(), meta["train_miou"]);
    let report = std::fs::read_to_string(dir.path().join("eval/eval_report.csv")).unwrap();
    assert_eq!(report.lines().count() - 1, cfg.model.n_cls + 1);

    let sweep_dir = dir.path().join("sweep");
    let run = || issc(&["--config", s(&cfg_path), "--out", s(&sweep_dir), "sweep"]);
    let out = run();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_records(&sweep_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(sweep_dir.join("sweep.svg").is_file());
    assert!(run().status.success());
    let rows = read_records(&sweep_dir.join("results.csv")).unwrap();
    assert_eq!(rows[0], rows[1]);

    let out = issc(&["--config", s(&cfg_path), "verify-row", "--csv", s(&sweep_dir.join("results.csv")), "--row", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_fails_before_evaluating() {
    let (dir, cfg) = setup("");
    let out_dir = dir.path().join("sweep");
    let out = issc(&["--config", s(&cfg), "--out", s(&out_dir), "sweep"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!out_dir.join("results.csv").exists());
}

#[test]
fn class_count_mismatch_is_an_error() {
    let (dir, cfg_path) = setup("");
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.train.steps = 0;
    cmd_train(&cfg, &dir.path().join("t")).unwrap();
    let mut other = cfg.clone();
    other.data.source = issc_cli::config::DataSource::Layout;
    let root = dir.path().join("layout");
    let ds = issc_core::datasets::generate_synthetic(&issc_core::datasets::SyntheticSpec {
        n_images: 2,
        height: 32,
        width: 32,
        n_cls: 5,
        density: 1.0,
        seed: 1,
    })
    .unwrap();
    issc_core::datasets::materialize(&ds, &root, Split::Test).unwrap();
    other.data.root = Some(root);
    let r = cmd_eval(&other, &dir.path().join("t/model.safetensors"), EvalChannel::Awgn(5.0), Split::Test, dir.path());
    assert!(r.is_err());
}

#[test]
fn gen_data_and_gallery() {
    let (dir, cfg_path) = setup("");
    let data_dir = dir.path().join("data");
    let out = issc(&["--config", s(&cfg_path), "--out", s(&data_dir), "gen-data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(data_dir.join("images/train")).unwrap().count(), 8);
    assert_eq!(std::fs::read_dir(data_dir.join("masks/test")).unwrap().count(), 4);

    let train_dir = dir.path().join("train");
    assert!(issc(&["--config", s(&cfg_path), "--out", s(&train_dir), "train", "--steps", "0"]).status.success());
    let gal = dir.path().join("gallery");
    let out = issc(&["--config", s(&cfg_path), "--out", s(&gal), "cliff-gallery", "--snrs=-5,4,30,40"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let captions = std::fs::read_to_string(gal.join("captions.csv")).unwrap();
    let rows: Vec<&str> = captions.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("-5,true"), "{}", rows[0]);
    assert!(rows[3].starts_with("40,false,0,0"), "{}", rows[3]);
    let panel = image::open(gal.join("panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (5 * 32, 4 * 32));
    assert!(gal.join("snr_-5_baseline_reconstruction.png").is_file());
}
