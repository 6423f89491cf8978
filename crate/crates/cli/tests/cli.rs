use std::path::Path;
use std::process::{Command, Output};

use hresformer::phantom::{load_volume, MANIFEST};
use hresformer::train::{BEST_CKPT, LAST_CKPT, METRICS_FILE, METRICS_HEADER};
use hresformer::{Config, HResFormer, ModelConfig};

fn hresformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hresformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny model and data rooted in `dir`.
fn write_config(dir: &Path) -> String {
    let mut cfg = Config {
        model: ModelConfig::tiny(),
        ..Config::default()
    };
    cfg.data.depth = 4;
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.data.n_train = 2;
    cfg.data.n_val = 1;
    cfg.data.n_test = 1;
    cfg.train.epochs = 2;
    cfg.train.data_dir = dir.join("data");
    cfg.train.out_dir = dir.join("run");
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("# test config\n{}", cfg.render())).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = hresformer(&["count-params"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(hresformer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hresformer(&[]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = hresformer(&["count-params", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = hresformer(&["count-params", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_params_matches_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = hresformer(&["count-params", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let (_, store) = HResFormer::new(&ModelConfig::tiny(), 0).unwrap();
    let want: usize = store.iter().map(|p| p.value.numel()).sum();
    assert_eq!(stdout(&o).trim().parse::<usize>().unwrap(), want);
}

#[test]
fn count_flops_breakdown_sums_to_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = hresformer(&["count-flops", "--config", &cfg, "--breakdown"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let nums: Vec<u64> = text.lines().map(|l| l.split(' ').last().unwrap().parse().unwrap()).collect();
    assert_eq!(nums.len(), 4);
    assert_eq!(nums[0], nums[1..].iter().sum::<u64>());
    let (m, _) = HResFormer::new(&ModelConfig::tiny(), 0).unwrap();
    assert_eq!(nums[0], m.flops([4, 16, 16]).unwrap());
}

#[test]
fn gen_train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = hresformer(&["gen-data", "--config", &cfg, "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("data");
    let manifest = std::fs::read_to_string(data.join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    let o = hresformer(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 3);
    assert!(run.join(LAST_CKPT).exists() && run.join(BEST_CKPT).exists());

    let o = hresformer(&["eval", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("case_id,dsc_1,dsc_2,mean"));
    assert!(run.join("eval.csv").exists() && run.join("eval_2d.csv").exists());

    let case = manifest.lines().find(|l| l.ends_with(" test")).unwrap().split(' ').nth(1).unwrap();
    let input = data.join(case);
    let pred = dir.path().join("pred.hvol");
    let ck = run.join(LAST_CKPT);
    let o = hresformer(&[
        "infer",
        "--config",
        &cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (load_volume(&input).unwrap(), load_volume(&pred).unwrap());
    assert_eq!(a.intensity, b.intensity);
    assert_eq!(a.labels.len(), b.labels.len());

    // A second run with the same seed writes identical files.
    let again = dir.path().join("again");
    let o = hresformer(&["train", "--config", &cfg, "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(run.join(METRICS_FILE)).unwrap(), std::fs::read(again.join(METRICS_FILE)).unwrap());
    assert_eq!(std::fs::read(run.join(LAST_CKPT)).unwrap(), std::fs::read(again.join(LAST_CKPT)).unwrap());
}

#[test]
fn train_without_dataset_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(hresformer(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn gradcheck_suite_passes() {
    let o = hresformer(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), 9);
}
