//! Desk-scale end-to-end run: procedural scenes, 200 synthesized pairs,
//! K=2 Stack T-Net training with per-epoch held-out PSNR.
//!
//! `cargo run --release --example desk_run -- <work_dir> [epochs]`

use std::path::PathBuf;

use tnet::haze::{build_dataset, write_scenes, SynthConfig};
use tnet::train::{train, Preset, RunConfig};

fn main() -> tnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TNET_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "desk_run".into()));
    let epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    write_scenes(&work.join("scenes"), 200, 96, 11)?;
    let manifest = build_dataset(&work.join("scenes"), &work.join("data"), &SynthConfig::default())?;
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.train.epochs = epochs;
    let out = train(&manifest, &cfg, &work.join("run"), None)?;
    println!("{:?}", out.last_eval);
    Ok(())
}
