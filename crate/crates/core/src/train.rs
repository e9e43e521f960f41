//! Mini-batch Adam training of a Stack T-Net on a synthesized dataset,
//! with the step-halving learning-rate schedule, crop/flip augmentation,
//! per-epoch held-out evaluation and best/last checkpoints.
//!
//! Training is single-threaded and fully determined by the configuration
//! seed: the sample order and augmentation of epoch `e` come from an RNG
//! seeded with `(seed, e)`, so a resumed run continues exactly where an
//! uninterrupted one would be.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint};
use crate::error::{Error, Result};
use crate::haze::{sample_seed, Manifest};
use crate::image::{Domain, ImageBuffer};
use crate::losses::{total_loss, FeatureExtractorSpec, LossConfig, PerceptualExtractor};
use crate::metrics::{psnr, ssim};
use crate::params::ParamStore;
use crate::stack::{StackConfig, StackTNet};
use crate::tensor::{Element, Tensor};
use crate::tnet::TNetConfig;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

const HOLDOUT_SALT: u64 = 0x0068_6f6c_646f_7574;
const EPOCH_SALT: u64 = 0x0065_706f_6368;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub lr_floor_epoch: usize,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Square training crop side.
    pub crop: usize,
    /// Random horizontal flips.
    pub flip: bool,
    pub seed: u64,
    pub stages: usize,
    /// Share of the manifest held out for evaluation, by index hash.
    pub holdout_percent: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale optimisation settings: batch 14, 256-pixel crops, 2000 epochs.
    pub fn full() -> Self {
        Self {
            batch_size: 14,
            epochs: 2000,
            lr0: 1e-3,
            halve_every: 20,
            lr_floor_epoch: 80,
            lr_floor: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            crop: 256,
            flip: true,
            seed: 0,
            stages: 3,
            holdout_percent: 10,
        }
    }

    /// Single-machine scale: 64-pixel crops, 60 epochs, small batches.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            epochs: 60,
            crop: 64,
            stages: 2,
            ..Self::full()
        }
    }

    pub fn micro() -> Self {
        Self {
            batch_size: 4,
            epochs: 20,
            crop: 32,
            stages: 1,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.halve_every == 0 {
            return bad("halve_every must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr_floor > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.crop == 0 {
            return bad("crop must be positive");
        }
        if self.stages == 0 {
            return bad("stages must be positive");
        }
        if self.holdout_percent >= 100 {
            return bad("holdout_percent must be below 100");
        }
        Ok(())
    }
}

/// `lr0 / 2^floor(e / halve_every)` before `lr_floor_epoch`, `lr_floor` from it on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.lr_floor_epoch {
        cfg.lr_floor
    } else {
        cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: TNetConfig,
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Desk,
    Micro,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self {
                model: TNetConfig::default(),
                stack: StackConfig::default(),
                train: TrainConfig::full(),
                loss: LossConfig {
                    extractor: FeatureExtractorSpec::PretrainedVgg16 {
                        weights: PathBuf::from("weights/vgg16.safetensors"),
                    },
                    ..LossConfig::default()
                },
            },
            Preset::Desk => Self {
                model: TNetConfig::default(),
                stack: StackConfig {
                    stages: 2,
                    share_parameters: true,
                },
                train: TrainConfig::desk(),
                loss: LossConfig {
                    stages: 2,
                    ..LossConfig::default()
                },
            },
            Preset::Micro => Self {
                model: TNetConfig {
                    m: 2,
                    n: 1,
                    base_channels: 4,
                    ..TNetConfig::default()
                },
                stack: StackConfig {
                    stages: 1,
                    share_parameters: true,
                },
                train: TrainConfig::micro(),
                loss: LossConfig {
                    stages: 1,
                    ..LossConfig::default()
                },
            },
        }
    }

    /// Set the stage count everywhere it appears.
    pub fn set_stages(&mut self, k: usize) {
        self.stack.stages = k;
        self.train.stages = k;
        self.loss.stages = k;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stack.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.stack.stages != self.train.stages || self.stack.stages != self.loss.stages {
            return Err(Error::Config(format!(
                "stage counts disagree: stack {}, train {}, loss {}",
                self.stack.stages, self.train.stages, self.loss.stages
            )));
        }
        let mult = self.model.spatial_multiple();
        if !self.train.crop.is_multiple_of(mult) {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of 2^m = {mult}",
                self.train.crop
            )));
        }
        Ok(())
    }
}

/// A training pair after augmentation, in the `[-1, 1]` domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub hazy: ImageBuffer,
    pub clean: ImageBuffer,
    pub crop_x: usize,
    pub crop_y: usize,
    pub flipped: bool,
}

/// Same random crop and flip for both images, then map to `[-1, 1]`.
pub fn augment(hazy: &ImageBuffer, clean: &ImageBuffer, crop: usize, flip: bool, seed: u64) -> Result<Augmented> {
    if !hazy.same_size(clean) {
        return Err(Error::Shape("hazy and clean images differ in size".into()));
    }
    if hazy.width() < crop || hazy.height() < crop {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the {crop}x{crop} crop",
            hazy.width(),
            hazy.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop_x = rng.gen_range(0..=hazy.width() - crop);
    let crop_y = rng.gen_range(0..=hazy.height() - crop);
    let flipped = flip && rng.gen_bool(0.5);
    let prep = |img: &ImageBuffer| -> Result<ImageBuffer> {
        let c = img.crop(crop_x, crop_y, crop, crop)?;
        let c = if flipped { c.flip_horizontal() } else { c };
        Ok(c.to_domain(Domain::Signed))
    };
    Ok(Augmented {
        hazy: prep(hazy)?,
        clean: prep(clean)?,
        crop_x,
        crop_y,
        flipped,
    })
}

/// Whether manifest sample `index` belongs to the held-out split.
pub fn is_holdout(index: usize, percent: u32) -> bool {
    sample_seed(HOLDOUT_SALT, index) % 100 < u64::from(percent)
}

/// Adam with bias correction. One moment pair per named parameter, so a
/// parameter shared by all stages has a single optimizer entry.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            s
        };
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            state: AdamState {
                t: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
            let m = self.state.m.get_mut(name).expect("moment per parameter");
            let v = self.state.v.get_mut(name).expect("moment per parameter");
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i].to_f64_lossy();
                let mi = b1 * md[i].to_f64_lossy() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pd[i] = T::from_f64_lossy(pd[i].to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    /// `None` when there is no held-out split.
    pub psnr_db: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    /// The same metrics for the untouched hazy inputs.
    pub hazy_psnr_db: f64,
    pub hazy_ssim: f64,
}

/// Structured training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        config: RunConfig,
        train_samples: usize,
        holdout_samples: usize,
        start_epoch: usize,
    },
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        smooth_l1: Vec<f64>,
        perceptual: Vec<f64>,
    },
    Eval {
        epoch: usize,
        train_loss: f64,
        eval: Option<EvalSummary>,
        best: Option<BestRecord>,
    },
}

/// Mean PSNR/SSIM of the final stage over `(hazy, clean)` pairs.
pub fn evaluate(model: &StackTNet<f32>, pairs: &[(ImageBuffer, ImageBuffer)], stages: usize) -> Result<Option<EvalSummary>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut acc = [0.0; 4];
    for (hazy, clean) in pairs {
        let out = model.dehaze(hazy, stages)?;
        let pred = out.last().expect("at least one stage");
        acc[0] += psnr(pred, clean)?;
        acc[1] += ssim(pred, clean)?;
        acc[2] += psnr(hazy, clean)?;
        acc[3] += ssim(hazy, clean)?;
    }
    let n = pairs.len() as f64;
    Ok(Some(EvalSummary {
        count: pairs.len(),
        psnr_db: acc[0] / n,
        ssim: acc[1] / n,
        hazy_psnr_db: acc[2] / n,
        hazy_ssim: acc[3] / n,
    }))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: StackTNet<f32>,
    pub epochs_completed: usize,
    pub steps: usize,
    pub best: Option<BestRecord>,
    pub last_eval: Option<EvalSummary>,
    /// Records written by this invocation.
    pub records: Vec<LogRecord>,
}

struct LogWriter {
    path: PathBuf,
    out: BufWriter<std::fs::File>,
}

impl LogWriter {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Read every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Train on `manifest`, writing the log and checkpoints into `out_dir`.
/// With `resume`, optimisation continues from the checkpoint's epoch with
/// its parameters, optimizer moments and best record; its model, stack and
/// loss configuration must equal `cfg`'s.
pub fn train(manifest: &Manifest, cfg: &RunConfig, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tc = &cfg.train;

    let mut train_pairs = Vec::new();
    let mut holdout_pairs = Vec::new();
    for rec in &manifest.records {
        let pair = manifest.load_pair(rec)?;
        if is_holdout(rec.index, tc.holdout_percent) {
            holdout_pairs.push(pair);
        } else {
            train_pairs.push(pair);
        }
    }
    if train_pairs.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }

    let (mut model, mut adam, start_epoch, mut step, mut best) = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model || ck.config.stack != cfg.stack || ck.config.loss != cfg.loss {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model, stack or loss configuration".into(),
                ));
            }
            let model = StackTNet::with_params(cfg.model, cfg.stack, ck.params)?;
            let mut adam = Adam::new(tc, &model.params);
            if let Some(state) = ck.optimizer {
                adam.state = state;
            }
            (model, adam, ck.epoch, ck.step, ck.best)
        }
        None => {
            let model = StackTNet::<f32>::build(cfg.model, cfg.stack, tc.seed)?;
            let adam = Adam::new(tc, &model.params);
            (model, adam, 0, 0, None)
        }
    };
    let extractor = PerceptualExtractor::<f32>::new(&cfg.loss.extractor)?;
    let mut log = LogWriter::open(out_dir.join(LOG_FILE), start_epoch > 0)?;
    let mut records = Vec::new();
    let mut emit = |log: &mut LogWriter, rec: LogRecord| -> Result<()> {
        log.write(&rec)?;
        records.push(rec);
        Ok(())
    };
    emit(
        &mut log,
        LogRecord::Start {
            config: cfg.clone(),
            train_samples: train_pairs.len(),
            holdout_samples: holdout_pairs.len(),
            start_epoch,
        },
    )?;
    log::info!(
        "training on {} pairs, {} held out, epochs {}..{}",
        train_pairs.len(),
        holdout_pairs.len(),
        start_epoch,
        tc.epochs
    );

    let stages = cfg.stack.stages;
    let mut last_eval = None;
    for epoch in start_epoch..tc.epochs {
        let lr = lr_at(epoch, tc);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(tc.seed ^ EPOCH_SALT, epoch));
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let aug: Vec<Augmented> = chunk
                .iter()
                .map(|&i| {
                    let (h, c) = &train_pairs[i];
                    augment(h, c, tc.crop, tc.flip, rng.gen())
                })
                .collect::<Result<_>>()?;
            let hazy = ImageBuffer::batch_to_tensor::<f32>(&aug.iter().map(|a| &a.hazy).collect::<Vec<_>>())?;
            let clean = ImageBuffer::batch_to_tensor::<f32>(&aug.iter().map(|a| &a.clean).collect::<Vec<_>>())?;

            let mut tape = crate::autograd::Tape::new();
            let p = tape.bind(&model.params, true);
            let ep = extractor.bind(&mut tape);
            let x = tape.constant(hazy);
            let gt = tape.constant(clean);
            let out = model.forward(&mut tape, &p, x, stages)?;
            let terms = total_loss(&mut tape, &extractor, &ep, &out, gt, &cfg.loss)?;
            let breakdown = terms.breakdown(&tape);
            step += 1;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    value: breakdown.total,
                });
            }
            let grads = tape.backward(terms.total)?.for_params(&tape, &p);
            drop(tape);
            adam.step(&mut model.params, &grads, lr)?;
            loss_sum += breakdown.total;
            batches += 1;
            emit(
                &mut log,
                LogRecord::Step {
                    epoch,
                    step,
                    lr,
                    loss: breakdown.total,
                    smooth_l1: breakdown.smooth_l1,
                    perceptual: breakdown.perceptual,
                },
            )?;
        }

        let eval = evaluate(&model, &holdout_pairs, stages)?;
        let improved = match (&eval, &best) {
            (Some(e), Some(b)) => b.psnr_db.is_none_or(|p| e.psnr_db > p),
            (Some(_), None) => true,
            // Without a held-out split the latest model counts as best.
            (None, _) => true,
        };
        if improved {
            best = Some(BestRecord {
                epoch,
                psnr_db: eval.map(|e| e.psnr_db),
            });
        }
        let train_loss = loss_sum / batches as f64;
        emit(
            &mut log,
            LogRecord::Eval {
                epoch,
                train_loss,
                eval,
                best,
            },
        )?;
        match &eval {
            Some(e) => log::info!(
                "epoch {epoch}: lr {lr:.2e} loss {train_loss:.5} held-out PSNR {:.3} dB (hazy {:.3}) SSIM {:.4}",
                e.psnr_db,
                e.hazy_psnr_db,
                e.ssim
            ),
            None => log::info!("epoch {epoch}: lr {lr:.2e} loss {train_loss:.5}"),
        }
        let ck = Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            step,
            best,
            params: model.params.clone(),
            optimizer: Some(adam.state.clone()),
        };
        ck.save(&out_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&out_dir.join(BEST_CHECKPOINT))?;
        }
        last_eval = eval;
    }

    Ok(TrainOutcome {
        model,
        epochs_completed: tc.epochs.max(start_epoch),
        steps: step,
        best,
        last_eval,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_published_points() {
        let cfg = TrainConfig::full();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(19, &cfg), 1e-3);
        assert_eq!(lr_at(20, &cfg), 5e-4);
        assert!((lr_at(65, &cfg) - 1.25e-4).abs() < 1e-18);
        assert_eq!(lr_at(80, &cfg), 1e-4);
        assert_eq!(lr_at(1999, &cfg), 1e-4);
    }

    #[test]
    fn augment_shares_the_window() {
        let hazy = ImageBuffer::from_fn(20, 16, Domain::Unit, |y, x, c| ((y * 20 + x) * 3 + c) as f64 / 960.0);
        let clean = hazy.clone();
        let a = augment(&hazy, &clean, 8, true, 42).unwrap();
        assert_eq!(a, augment(&hazy, &clean, 8, true, 42).unwrap());
        assert_eq!(a.hazy, a.clean);
        assert!(a.hazy.check_range().is_ok() && a.hazy.domain() == Domain::Signed);
        let flips = (0..64).filter(|&s| augment(&hazy, &clean, 8, true, s).unwrap().flipped).count();
        assert!(flips > 10 && flips < 54);
        assert!(augment(&hazy, &clean, 17, false, 0).is_err());
    }

    #[test]
    fn holdout_is_about_ten_percent() {
        let n = (0..10_000).filter(|&i| is_holdout(i, 10)).count();
        assert!((800..1200).contains(&n), "{n}");
        assert!((0..100).all(|i| !is_holdout(i, 0)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&TrainConfig::full(), &params);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.3, -2.0]).unwrap())]);
        adam.step(&mut params, &grads, 1e-3).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(adam.state.t, 1);
    }

    #[test]
    fn presets_are_valid_and_stage_counts_agree() {
        for p in [Preset::Full, Preset::Desk, Preset::Micro] {
            RunConfig::preset(p).validate().unwrap();
        }
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.stack.stages = 3;
        assert!(cfg.validate().is_err());
        cfg.set_stages(3);
        cfg.validate().unwrap();
    }
}
