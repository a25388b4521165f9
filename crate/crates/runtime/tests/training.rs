use std::path::Path;

use hdvila_core::model::LOGIT_SCALE;
use hdvila_core::objectives::VIDEO_PROJ;
use hdvila_runtime::train::{read_metrics, RunPaths, TEXT_PROJ};
use hdvila_runtime::{train, Checkpoint, Error, RunConfig};

/// A run small enough for debug builds: 16 clips, two steps per epoch.
fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_samples = 16;
    cfg.data.eval_samples = 8;
    cfg.eval.recall_ks = vec![1, 5];
    cfg.train.batch_size = 8;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 0;
    cfg.train.lr = 1e-3;
    cfg.paths.out_dir = out.to_path_buf();
    cfg
}

fn checkpoint_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(RunPaths::new(dir).checkpoints())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn zero_epochs_writes_only_the_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage1_epochs = 0;
    let s = train(&cfg, None).unwrap();
    assert_eq!(s.steps, 0);
    assert_eq!(s.last_loss, None);
    assert_eq!(checkpoint_names(dir.path()), ["init.hdvk"]);
    assert!(read_metrics(&RunPaths::new(dir.path()).metrics()).unwrap().is_empty());
    assert_eq!(Checkpoint::load(&s.last_checkpoint).unwrap().step, 0);
}

#[test]
fn two_steps_are_bitwise_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&tiny(a.path()), None).unwrap();
    let rb = train(&tiny(b.path()), None).unwrap();
    assert_eq!(ra.steps, 2);
    let ma = std::fs::read(RunPaths::new(a.path()).metrics()).unwrap();
    let mb = std::fs::read(RunPaths::new(b.path()).metrics()).unwrap();
    assert_eq!(ma, mb);
    let ca = std::fs::read(ra.last_checkpoint).unwrap();
    let cb = std::fs::read(rb.last_checkpoint).unwrap();
    assert_eq!(ca, cb);
    let lines = read_metrics(&RunPaths::new(a.path()).metrics()).unwrap();
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), [0, 1]);
    assert!(lines.iter().all(|l| l.stage == 1 && l.loss.is_finite()));
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cb = tiny(b.path());
    cb.seed += 1;
    train(&tiny(a.path()), None).unwrap();
    train(&cb, None).unwrap();
    let ma = read_metrics(&RunPaths::new(a.path()).metrics()).unwrap();
    let mb = read_metrics(&RunPaths::new(b.path()).metrics()).unwrap();
    assert_ne!(ma, mb);
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    one.install(|| train(&tiny(a.path()), None)).unwrap();
    four.install(|| train(&tiny(b.path()), None)).unwrap();
    assert_eq!(
        std::fs::read(RunPaths::new(a.path()).metrics()).unwrap(),
        std::fs::read(RunPaths::new(b.path()).metrics()).unwrap()
    );
}

/// Resuming run A's epoch-1 checkpoint in a fresh directory reproduces A's
/// remaining metrics and final checkpoint bit for bit, across the stage-2
/// boundary.
#[test]
fn resume_reproduces_the_rest_of_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny(a.path());
    ca.train.stage1_epochs = 2;
    ca.train.stage2_epochs = 1;
    let full = train(&ca, None).unwrap();
    assert_eq!(full.steps, 6);
    let ma = read_metrics(&RunPaths::new(a.path()).metrics()).unwrap();
    assert_eq!(ma.iter().map(|m| m.stage).collect::<Vec<_>>(), [1, 1, 1, 1, 2, 2]);

    let mut cb = ca.clone();
    cb.paths.out_dir = b.path().to_path_buf();
    let from = RunPaths::new(a.path()).epoch_checkpoint(1);
    let resumed = train(&cb, Some(&from)).unwrap();
    let mb = read_metrics(&RunPaths::new(b.path()).metrics()).unwrap();
    assert_eq!(mb, ma[2..]);
    for (x, y) in mb.iter().zip(&ma[2..]) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    assert_eq!(
        std::fs::read(resumed.last_checkpoint).unwrap(),
        std::fs::read(full.last_checkpoint).unwrap()
    );
}

#[test]
fn resume_in_place_rewrites_the_log_tail() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage1_epochs = 2;
    train(&cfg, None).unwrap();
    let before = std::fs::read(RunPaths::new(dir.path()).metrics()).unwrap();
    let from = RunPaths::new(dir.path()).epoch_checkpoint(1);
    train(&cfg, Some(&from)).unwrap();
    assert_eq!(std::fs::read(RunPaths::new(dir.path()).metrics()).unwrap(), before);
}

#[test]
fn resume_rejects_mid_epoch_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = train(&cfg, None).unwrap();
    let mut ck = Checkpoint::load(&s.last_checkpoint).unwrap();
    ck.step = 1;
    let odd = dir.path().join("odd.hdvk");
    ck.save(&odd).unwrap();
    let err = train(&cfg, Some(&odd)).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    let mut wide = cfg.clone();
    wide.model.hidden = 32;
    let err = train(&wide, Some(&s.last_checkpoint)).unwrap_err();
    assert!(err.to_string().contains("dimension mismatch"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

/// Stage 2 extends the stage-1 parameters with the joint model and MLM head
/// and, by default, leaves the contrastive heads untouched.
#[test]
fn stage2_extends_and_freezes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage2_epochs = 1;
    cfg.train.learn_temperature = true;
    let s = train(&cfg, None).unwrap();
    let stage1 = Checkpoint::load(&RunPaths::new(dir.path()).epoch_checkpoint(1)).unwrap().params();
    let stage2 = Checkpoint::load(&s.last_checkpoint).unwrap().params();
    assert!(stage1.missing_in(&stage2).is_empty());
    let added = stage2.missing_in(&stage1);
    assert!(!added.is_empty());
    assert!(added.iter().all(|n| n.starts_with("mm.") || n.starts_with("mlm.")), "{added:?}");
    for (name, t) in stage1.iter() {
        let frozen = [VIDEO_PROJ, TEXT_PROJ, LOGIT_SCALE].iter().any(|p| name.starts_with(p));
        let after = stage2.get(name).unwrap().data();
        if frozen {
            assert_eq!(after, t.data(), "{name} moved in stage 2");
        }
    }
    // The encoders do train under MLM.
    assert!(stage1
        .iter()
        .filter(|(n, _)| n.starts_with("text.layer"))
        .any(|(n, t)| stage2.get(n).unwrap().data() != t.data()));
    let m = read_metrics(&RunPaths::new(dir.path()).metrics()).unwrap();
    assert_eq!(m.last().unwrap().stage, 2);
}

#[test]
fn unfrozen_stage2_moves_the_projections() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage2_epochs = 1;
    cfg.train.freeze_contrastive_stage2 = false;
    cfg.train.joint_loss_stage2 = true;
    let s = train(&cfg, None).unwrap();
    let stage1 = Checkpoint::load(&RunPaths::new(dir.path()).epoch_checkpoint(1)).unwrap().params();
    let stage2 = Checkpoint::load(&s.last_checkpoint).unwrap().params();
    let w = format!("{VIDEO_PROJ}.weight");
    assert_ne!(stage1.get(&w).unwrap().data(), stage2.get(&w).unwrap().data());
}

#[test]
fn schedule_in_the_log_warms_up_and_decays() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.train_samples = 40;
    cfg.train.warmup_fraction = 0.2;
    train(&cfg, None).unwrap();
    let lrs: Vec<f64> = read_metrics(&RunPaths::new(dir.path()).metrics())
        .unwrap()
        .iter()
        .map(|m| m.lr)
        .collect();
    assert_eq!(lrs.len(), 5);
    assert_eq!(lrs[0], 0.0);
    assert_eq!(lrs[1], cfg.train.lr);
    assert!(lrs.windows(2).skip(1).all(|w| w[1] < w[0]));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage1_epochs = 0;
    let init = train(&cfg, None).unwrap().last_checkpoint;
    let mut ck = Checkpoint::load(&init).unwrap();
    ck.tensors.get_mut("text.proj.weight").unwrap().data_mut()[0] = f32::NAN;
    let poisoned = dir.path().join("poisoned.hdvk");
    ck.save(&poisoned).unwrap();

    cfg.train.stage1_epochs = 2;
    let err = train(&cfg, Some(&poisoned)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(checkpoint_names(dir.path()), ["init.hdvk"]);
    assert_eq!(std::fs::read(&poisoned).unwrap(), ck.to_bytes());
    assert!(read_metrics(&RunPaths::new(dir.path()).metrics()).unwrap().is_empty());
}

#[test]
fn metrics_lines_are_strict_json() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny(dir.path()), None).unwrap();
    let text = std::fs::read_to_string(RunPaths::new(dir.path()).metrics()).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["step", "stage", "epoch", "loss", "lr"] {
            assert!(keys.contains(&k));
        }
    }
    let vocab = std::fs::read_to_string(RunPaths::new(dir.path()).vocab()).unwrap();
    assert!(vocab.lines().any(|l| l.contains("[MASK]")));
}
