use std::path::Path;
use std::process::{Command, Output};

use tnet::checkpoint::Checkpoint;
use tnet::image::{Domain, ImageBuffer};

fn tnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnet"))
        .args(args)
        .env("TNET_LOG", "info")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn micro_dataset(dir: &Path) {
    let scenes = dir.join("scenes");
    assert!(tnet(&["scenes", "--out", p(&scenes), "--count", "4", "--size", "40", "--seed", "2"]).status.success());
    let o = tnet(&["synthesize", "--clean", p(&scenes), "--out", p(&dir.join("data")), "--count", "12", "--crop", "32", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train_micro(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("micro.toml");
    std::fs::write(&cfg, "preset = \"micro\"\nbase_channels = 2\nrdb_growth = 4\nrdb_layers = 2\nepochs = 2\nholdout_percent = 25\n").unwrap();
    let data = dir.join("data");
    let out = dir.join(out);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)];
    args.extend_from_slice(extra);
    tnet(&args)
}

#[test]
fn synthesize_writes_pairs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    tnet(&["scenes", "--out", p(&scenes), "--count", "3", "--size", "48"]);
    let run = |out: &str| {
        tnet(&["synthesize", "--clean", p(&scenes), "--out", p(&dir.path().join(out)), "--count", "20", "--seed", "7", "--crop", "32"])
    };
    let o = run("a");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).lines().next().unwrap().contains("resolved config"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 20 pairs"));
    assert_eq!(std::fs::read_dir(dir.path().join("a/hazy")).unwrap().count(), 20);
    run("b");
    let manifest = |d: &str| std::fs::read(dir.path().join(d).join("manifest.jsonl")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
}

#[test]
fn inverted_range_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = tnet(&["synthesize", "--clean", p(dir.path()), "--out", p(&dir.path().join("o")), "--beta-range", "1.0,0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beta range"), "{}", stderr(&o));
    assert_eq!(tnet(&["synthesize", "--bogus"]).status.code(), Some(1));
    assert_eq!(tnet(&["--help"]).status.code(), Some(0));
    let o = tnet(&["synthesize", "--clean", p(&dir.path().join("missing")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 3\nlearning_rate = 0.1\n").unwrap();
    let o = tnet(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("o")), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn train_dehaze_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    micro_dataset(dir.path());
    let o = train_micro(dir.path(), "run", &["--stages", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = stderr(&o).lines().next().unwrap().to_string();
    assert!(first.contains("resolved config") && first.contains("seed 0"), "{first}");
    let run = dir.path().join("run");
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = Checkpoint::load(&run.join("last.ckpt")).unwrap();
    assert_eq!(ck.config.stack.stages, 3);
    assert_eq!(ck.epoch, 2);

    // Resume continues the epoch counter.
    let last = run.join("last.ckpt");
    let o = tnet(&["train", "--data", p(&dir.path().join("data")), "--out", p(&run), "--resume", p(&last), "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(Checkpoint::load(&last).unwrap().epoch, 3);
    let o = tnet(&["train", "--data", p(&dir.path().join("data")), "--out", p(&run), "--resume", p(&last), "--stages", "2"]);
    assert_eq!(o.status.code(), Some(1));

    // Arbitrary sizes are padded internally and cropped back.
    let input = dir.path().join("in");
    ImageBuffer::from_fn(100, 75, Domain::Unit, |y, x, c| ((x * 3 + y * 5 + c * 40) % 256) as f64 / 255.0)
        .save_png(&input.join("photo.png"))
        .unwrap();
    let out = dir.path().join("out");
    let o = tnet(&["dehaze", "--checkpoint", p(&last), "--input", p(&input), "--out", p(&out), "--save-stages"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["photo.png", "photo_stage1.png", "photo_stage2.png", "photo_stage3.png"] {
        let img = ImageBuffer::load_png(&out.join(name)).unwrap();
        assert_eq!((img.width(), img.height()), (100, 75), "{name}");
    }
    assert!(!out.join("photo_stage4.png").exists());

    // Stage override warns.
    let o = tnet(&["dehaze", "--checkpoint", p(&last), "--input", p(&input.join("photo.png")), "--out", p(&out), "--stages", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("WARN"), "{}", stderr(&o));
}

#[test]
fn dehaze_reports_a_checkpoint_that_does_not_match_its_config() {
    let dir = tempfile::tempdir().unwrap();
    micro_dataset(dir.path());
    assert!(train_micro(dir.path(), "run", &["--epochs", "1"]).status.success());
    let path = dir.path().join("run/last.ckpt");
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.config.model.base_channels = 3;
    ck.save(&path).unwrap();
    let o = tnet(&["dehaze", "--checkpoint", p(&path), "--input", p(&dir.path().join("data/hazy")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match the architecture"), "{}", stderr(&o));
}

#[test]
fn eval_pairs_by_filename() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt, out) = (dir.path().join("pred"), dir.path().join("gt"), dir.path().join("report"));
    for i in 0..3 {
        let g = ImageBuffer::from_fn(24, 20, Domain::Unit, |y, x, c| ((x * 7 + y * 3 + c * 11 + i * 13) % 200) as f64 / 255.0);
        g.save_png(&gt.join(format!("{i}.png"))).unwrap();
        g.save_png(&pred.join(format!("{i}.png"))).unwrap();
    }
    let o = tnet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let agg: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().last().unwrap(),
    )
    .unwrap();
    assert_eq!(agg["mean_psnr_db"], 99.0);
    assert_eq!(agg["mean_ssim"], 1.0);
    assert!(std::fs::read_to_string(out.join("metrics.txt")).unwrap().contains("mean"));

    // A +0.1 offset is not representable in 8-bit PNG; the nearest
    // fixture is +26/255, whose PSNR is 20 log10(255 / 26) = 19.83 dB.
    let shifted = dir.path().join("shifted");
    for i in 0..3 {
        let g = ImageBuffer::load_png(&gt.join(format!("{i}.png"))).unwrap();
        let s = ImageBuffer::new(24, 20, g.data().iter().map(|v| v + 26.0 / 255.0).collect(), Domain::Unit).unwrap();
        s.save_png(&shifted.join(format!("{i}.png"))).unwrap();
    }
    let o = tnet(&["eval", "--pred", p(&shifted), "--gt", p(&gt), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let agg: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().last().unwrap(),
    )
    .unwrap();
    let expected = 20.0 * (255.0f64 / 26.0).log10();
    assert!((agg["mean_psnr_db"].as_f64().unwrap() - expected).abs() < 1e-9);

    std::fs::remove_file(pred.join("2.png")).unwrap();
    let o = tnet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2.png (only in gt)"), "{}", stderr(&o));
    let o = tnet(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&out), "--allow-partial"]);
    assert_eq!(o.status.code(), Some(0));
}
