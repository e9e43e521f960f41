use std::path::Path;

use tnet::checkpoint::Checkpoint;
use tnet::haze::{build_dataset, write_scenes, Manifest, SynthConfig};
use tnet::train::{read_log, train, LogRecord, Preset, RunConfig, LAST_CHECKPOINT, LOG_FILE};

fn dataset(dir: &Path, count: usize, crop: usize) -> Manifest {
    write_scenes(&dir.join("scenes"), 8, crop + 8, 1).unwrap();
    let cfg = SynthConfig {
        count,
        crop: Some(crop),
        seed: 3,
        ..SynthConfig::default()
    };
    build_dataset(&dir.join("scenes"), &dir.join("data"), &cfg).unwrap()
}

fn tiny(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Micro);
    cfg.model.base_channels = 2;
    cfg.model.rdb_growth = 4;
    cfg.model.rdb_layers = 2;
    cfg.train.crop = 16;
    cfg.train.epochs = epochs;
    cfg
}

fn steps(records: &[LogRecord]) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, loss, .. } => Some((*step, *loss)),
            _ => None,
        })
        .collect()
}

#[test]
fn one_epoch_of_eight_samples_in_pairs_is_four_steps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 8, 16);
    let mut cfg = tiny(1);
    cfg.train.batch_size = 2;
    cfg.train.holdout_percent = 0;
    let out = train(&manifest, &cfg, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.steps, 4);
    let logged = read_log(&dir.path().join("run").join(LOG_FILE)).unwrap();
    assert_eq!(steps(&logged).len(), 4);
    assert!(dir.path().join("run/best.ckpt").exists());
}

#[test]
fn partial_final_batch_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 7, 16);
    let mut cfg = tiny(1);
    cfg.train.batch_size = 3;
    cfg.train.holdout_percent = 0;
    assert_eq!(train(&manifest, &cfg, &dir.path().join("run"), None).unwrap().steps, 3);
}

#[test]
fn same_seed_gives_identical_parameters_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 12, 16);
    let cfg = tiny(2);
    let a = train(&manifest, &cfg, &dir.path().join("a"), None).unwrap();
    let b = train(&manifest, &cfg, &dir.path().join("b"), None).unwrap();
    assert_eq!(a.model.params, b.model.params);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/train_log.jsonl"), read("b/train_log.jsonl"));
    assert_eq!(read("a/last.ckpt"), read("b/last.ckpt"));

    let mut other = cfg.clone();
    other.train.seed = 99;
    let c = train(&manifest, &other, &dir.path().join("c"), None).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 10, 16);
    let full = train(&manifest, &tiny(3), &dir.path().join("full"), None).unwrap();

    train(&manifest, &tiny(1), &dir.path().join("part"), None).unwrap();
    let ck = Checkpoint::load(&dir.path().join("part").join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, 1);
    let resumed = train(&manifest, &tiny(3), &dir.path().join("part"), Some(ck)).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.steps, full.steps);

    let epochs: Vec<usize> = read_log(&dir.path().join("part").join(LOG_FILE))
        .unwrap()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { epoch, .. } => Some(*epoch),
            _ => None,
        })
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 6, 16);
    train(&manifest, &tiny(1), &dir.path().join("run"), None).unwrap();
    let ck = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT)).unwrap();
    let mut wider = tiny(2);
    wider.model.base_channels = 4;
    assert!(train(&manifest, &wider, &dir.path().join("run"), Some(ck)).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 6, 16);
    let out = train(&manifest, &tiny(1), &dir.path().join("run"), None).unwrap();
    let ck = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.params, out.model.params);
    let (hazy, _) = manifest.load_pair(&manifest.records[0]).unwrap();
    let a = out.model.dehaze(&hazy, 1).unwrap();
    let b = ck.model().unwrap().dehaze(&hazy, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn best_psnr_never_decreases_and_optimizer_has_one_entry_per_shared_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 30, 16);
    let mut cfg = tiny(3);
    cfg.set_stages(3);
    cfg.train.holdout_percent = 30;
    let out = train(&manifest, &cfg, &dir.path().join("run"), None).unwrap();
    let bests: Vec<f64> = out
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { best, .. } => best.and_then(|b| b.psnr_db),
            _ => None,
        })
        .collect();
    assert_eq!(bests.len(), 3);
    assert!(bests.windows(2).all(|w| w[1] >= w[0]));

    let ck = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT)).unwrap();
    let opt = ck.optimizer.unwrap();
    assert_eq!(opt.m.len(), ck.params.len());
    assert!(ck.params.names().all(|n| !n.starts_with("stage")));
}

#[test]
fn micro_run_reduces_training_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 32, 32);
    let mut cfg = RunConfig::preset(Preset::Micro);
    cfg.train.holdout_percent = 0;
    assert_eq!((cfg.model.m, cfg.model.n, cfg.model.base_channels, cfg.stack.stages), (2, 1, 4, 1));
    assert_eq!((cfg.train.crop, cfg.train.epochs), (32, 20));
    let out = train(&manifest, &cfg, &dir.path().join("run"), None).unwrap();
    let epoch_loss: Vec<f64> = out
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { train_loss, .. } => Some(*train_loss),
            _ => None,
        })
        .collect();
    assert_eq!(epoch_loss.len(), 20);
    assert!(epoch_loss[19] < epoch_loss[0], "{epoch_loss:?}");
}
