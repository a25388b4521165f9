use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdvila_runtime::train::{read_metrics, RunPaths};
use hdvila_runtime::{Checkpoint, RunConfig};

fn hdvila(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdvila"))
        .args(args)
        .env_remove("HDVILA_THREADS")
        .output()
        .expect("binary runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../subtitle/tests/fixtures")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.data.train_samples = 16;
    cfg.data.eval_samples = 8;
    cfg.eval.recall_ks = vec![1, 5];
    cfg.train.batch_size = 8;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 0;
    cfg.paths.out_dir = dir.join("run");
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    let o = hdvila(&["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    std::fs::write(&bad, "seed = 3\n").unwrap();
    assert_eq!(code(&hdvila(&["--config", bad.to_str().unwrap(), "train"])), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_hdvila"))
        .args(["synth-preview", "--out", dir.path().join("p").to_str().unwrap()])
        .env("HDVILA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_a_plain_failure() {
    let o = hdvila(&["eval-retrieval", "--checkpoint", "/nonexistent/x.hdvk"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let o = hdvila(&["--config", c, "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = RunPaths::new(dir.path().join("run"));
    assert_eq!(read_metrics(&run.metrics()).unwrap().len(), 2);
    let ck = run.epoch_checkpoint(1);
    let out = dir.path().join("eval.json");
    let o = hdvila(&["--config", c, "eval-retrieval", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["segments"], 2 * RunConfig::default().sampling.segment_count);
    assert!(printed["t2v"]["recall"]["R@1"].is_number());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = RunPaths::new(dir.path().join("run"));
    assert_eq!(code(&hdvila(&["--config", c, "train"])), 0);
    let a = read_metrics(&run.metrics()).unwrap();
    assert_eq!(code(&hdvila(&["--config", c, "--seed", "99", "train"])), 0);
    let b = read_metrics(&run.metrics()).unwrap();
    assert_ne!(a, b);
    assert_eq!(code(&hdvila(&["--seed", "7", "--config", c, "train"])), 0);
    assert_eq!(read_metrics(&run.metrics()).unwrap(), a);
}

#[test]
fn numeric_failure_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let mut zero = RunConfig::load(&cfg).unwrap();
    zero.train.stage1_epochs = 0;
    let zero_path = dir.path().join("zero.toml");
    std::fs::write(&zero_path, zero.to_toml()).unwrap();
    assert_eq!(code(&hdvila(&["--config", zero_path.to_str().unwrap(), "train"])), 0);
    let init = RunPaths::new(dir.path().join("run")).init_checkpoint();
    let mut ck = Checkpoint::load(&init).unwrap();
    ck.tensors.get_mut("text.proj.weight").unwrap().data_mut()[0] = f32::NAN;
    let bad = dir.path().join("bad.hdvk");
    ck.save(&bad).unwrap();
    let o = hdvila(&["--config", c, "train", "--resume", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn align_and_stats_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let clips = dir.path().join("clips.jsonl");
    let o = hdvila(&["align", "--in", fixtures().to_str().unwrap(), "--format", "srt", "--out", clips.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&clips).unwrap();
    assert!(text.lines().count() > 0);
    let ids: std::collections::BTreeSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["video_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.into_iter().collect::<Vec<_>>(), ["lecture", "three_cues"]);

    let cats = dir.path().join("cats.tsv");
    std::fs::write(&cats, "lecture\teducation\nthree_cues\tfilm\n").unwrap();
    let o = hdvila(&["stats", "--in", clips.to_str().unwrap(), "--categories", cats.to_str().unwrap(), "--dataset", "fixtures"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("fixtures"));
    assert!(table.contains("education\t"));
    assert!(table.contains("film\t"));

    let o = hdvila(&["align", "--in", fixtures().to_str().unwrap(), "--format", "mkv", "--out", clips.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_subtitles_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.srt"), "1\nnot a timestamp\nhello\n").unwrap();
    let out = dir.path().join("o.jsonl");
    let o = hdvila(&["align", "--in", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.srt"));
}

#[test]
fn synth_preview_writes_frames_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    let o = hdvila(&["synth-preview", "--out", out.to_str().unwrap(), "--count", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let captions = std::fs::read_to_string(out.join("captions.tsv")).unwrap();
    assert_eq!(captions.lines().count(), 2);
    assert!(captions.lines().all(|l| l.contains(" moving ")));
    let frames = RunConfig::default().data.frames;
    let pngs = std::fs::read_dir(out.join("sample-000")).unwrap().count();
    assert_eq!(pngs, frames);
}

#[test]
fn grad_check_passes() {
    let o = hdvila(&["grad-check"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().last().unwrap().starts_with("all "));
}
