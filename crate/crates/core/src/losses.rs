//! Per-stage smooth-L1 and perceptual losses and their weighted sum over
//! all stages of a stack.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Tape, Var};
use crate::blocks::Conv2d;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stack::StackOutput;
use crate::tensor::{Element, Tensor};

/// ImageNet statistics the pretrained classifier was trained with.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `0.5 e^2` for `e < 1`, `e - 0.5` otherwise.
pub fn smooth_l1_pointwise(e: f64) -> Result<f64> {
    if e.is_nan() || e < 0.0 {
        return Err(Error::Domain(format!("smooth-L1 is defined for e >= 0, got {e}")));
    }
    Ok(if e < 1.0 { 0.5 * e * e } else { e - 0.5 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureExtractorSpec {
    /// Three frozen, seeded 3x3 conv + ReLU stages of widths 64/128/256
    /// separated by 2x average pooling.
    FixedRandomPyramid { seed: u64 },
    /// VGG-16 `relu1_2`, `relu2_2`, `relu3_3` from a safetensors file with
    /// torchvision names (`features.{0,2,5,7,10,12,14}.{weight,bias}`).
    PretrainedVgg16 { weights: PathBuf },
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec::FixedRandomPyramid { seed: 0x7e7 }
    }
}

impl FeatureExtractorSpec {
    /// `(channels, spatial divisor)` of the three feature levels.
    pub fn levels(&self) -> [(usize, usize); 3] {
        [(64, 1), (128, 2), (256, 4)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub extractor: FeatureExtractorSpec,
    pub stages: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.04,
            extractor: FeatureExtractorSpec::default(),
            stages: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.stages == 0 {
            return Err(Error::Config("loss needs at least one stage".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    None,
    Avg,
    Max,
}

/// Frozen feature extractor for the perceptual loss.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    spec: FeatureExtractorSpec,
    /// Per level: pooling before the level, then conv + ReLU layers.
    levels: Vec<(Pool, Vec<Conv2d>)>,
    params: ParamStore<T>,
}

impl<T: Element> PerceptualExtractor<T> {
    pub fn new(spec: &FeatureExtractorSpec) -> Result<Self> {
        match spec {
            FeatureExtractorSpec::FixedRandomPyramid { seed } => Self::random_pyramid(*seed),
            FeatureExtractorSpec::PretrainedVgg16 { weights } => Self::vgg16(weights),
        }
    }

    fn random_pyramid(seed: u64) -> Result<Self> {
        let levels = vec![
            (Pool::None, vec![Conv2d::new("level1", 3, 64, 3, 1)]),
            (Pool::Avg, vec![Conv2d::new("level2", 64, 128, 3, 1)]),
            (Pool::Avg, vec![Conv2d::new("level3", 128, 256, 3, 1)]),
        ];
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, convs) in &levels {
            for c in convs {
                c.init(&mut params, &mut rng)?;
            }
        }
        Ok(Self {
            spec: FeatureExtractorSpec::FixedRandomPyramid { seed },
            levels,
            params,
        })
    }

    fn vgg16(path: &Path) -> Result<Self> {
        let unavailable = |why: String| {
            Error::ExtractorUnavailable(format!(
                "{why}; use the fixed-random-pyramid extractor (`--extractor random`) instead"
            ))
        };
        let bytes = std::fs::read(path)
            .map_err(|e| unavailable(format!("cannot read VGG-16 weights {}: {e}", path.display())))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| unavailable(format!("{} is not a safetensors file: {e}", path.display())))?;
        // (torchvision index, in, out) for conv1_1 .. conv3_3.
        let layout: [&[(usize, usize, usize)]; 3] = [
            &[(0, 3, 64), (2, 64, 64)],
            &[(5, 64, 128), (7, 128, 128)],
            &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
        ];
        let mut params = ParamStore::new();
        let mut levels = Vec::new();
        for (li, convs) in layout.iter().enumerate() {
            let mut layer = Vec::new();
            for &(idx, cin, cout) in convs.iter() {
                let conv = Conv2d::new(format!("features.{idx}"), cin, cout, 3, 1);
                for (name, shape) in [
                    (conv.weight_name(), vec![cout, cin, 3, 3]),
                    (conv.bias_name(), vec![cout]),
                ] {
                    let view = st
                        .tensor(&name)
                        .map_err(|_| unavailable(format!("missing tensor `{name}` in {}", path.display())))?;
                    if view.shape() != shape.as_slice() {
                        return Err(unavailable(format!(
                            "tensor `{name}` has shape {:?}, expected {shape:?}",
                            view.shape()
                        )));
                    }
                    let data: Vec<T> = match view.dtype() {
                        safetensors::Dtype::F32 => view
                            .data()
                            .chunks_exact(4)
                            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                            .collect(),
                        other => {
                            return Err(unavailable(format!("tensor `{name}` has dtype {other:?}, expected F32")))
                        }
                    };
                    params.insert(name, Tensor::new(&shape, data)?)?;
                }
                layer.push(conv);
            }
            levels.push((if li == 0 { Pool::None } else { Pool::Max }, layer));
        }
        Ok(Self {
            spec: FeatureExtractorSpec::PretrainedVgg16 {
                weights: path.to_path_buf(),
            },
            levels,
            params,
        })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Bind the frozen weights as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        tape.bind(&self.params, false)
    }

    /// Map a network-domain image (`[-1, 1]`) into the extractor's input
    /// domain.
    pub fn preprocess(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let unit = tape.affine(image, 0.5, 0.5);
        match self.spec {
            FeatureExtractorSpec::FixedRandomPyramid { .. } => Ok(unit),
            FeatureExtractorSpec::PretrainedVgg16 { .. } => {
                tape.channel_normalize(unit, &IMAGENET_MEAN, &IMAGENET_STD)
            }
        }
    }

    /// The three feature maps of a network-domain image.
    pub fn features(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let mut x = self.preprocess(tape, image)?;
        let mut out = Vec::with_capacity(3);
        for (pool, convs) in &self.levels {
            x = match pool {
                Pool::None => x,
                Pool::Avg => tape.avg_pool2(x)?,
                Pool::Max => tape.max_pool2(x)?,
            };
            for conv in convs {
                let y = conv.forward(tape, p, x)?;
                x = tape.relu(y);
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Sum over levels of `||F_j(pred) - F_j(gt)||^2 / (C_j H_j W_j)`,
    /// averaged over the batch, against precomputed ground-truth features.
    pub fn distance(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pred: Var,
        gt_features: &[Var],
    ) -> Result<Var> {
        let feats = self.features(tape, p, pred)?;
        let mut total: Option<Var> = None;
        for (&a, &b) in feats.iter().zip(gt_features) {
            let d = tape.squared_distance(a, b)?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
        Ok(total.expect("three levels"))
    }
}

/// Loss variables recorded on the tape.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub smooth_l1: Vec<Var>,
    /// Empty when `lambda == 0` and the perceptual family is skipped.
    pub perceptual: Vec<Var>,
}

/// Plain values of [`LossTerms`], for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub smooth_l1: Vec<f64>,
    pub perceptual: Vec<f64>,
}

impl LossTerms {
    pub fn breakdown<T: Element>(&self, tape: &Tape<T>) -> LossBreakdown {
        let val = |v: Var| tape.value(v).item().to_f64_lossy();
        LossBreakdown {
            total: val(self.total),
            smooth_l1: self.smooth_l1.iter().map(|&v| val(v)).collect(),
            perceptual: self.perceptual.iter().map(|&v| val(v)).collect(),
        }
    }
}

/// `sum_k SL1(y^k, gt) + lambda * sum_k P(y^k, gt)`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    extractor: &PerceptualExtractor<T>,
    extractor_params: &Bound,
    stack_out: &StackOutput<Var>,
    gt: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if stack_out.len() != cfg.stages {
        return Err(Error::Config(format!(
            "loss configured for {} stages, stack produced {}",
            cfg.stages,
            stack_out.len()
        )));
    }
    let mut smooth = Vec::with_capacity(cfg.stages);
    for &y in &stack_out.per_stage {
        smooth.push(tape.smooth_l1(y, gt)?);
    }
    let mut total = sum_vars(tape, &smooth)?;

    let mut perceptual = Vec::new();
    if cfg.lambda > 0.0 {
        let gt_feats = extractor.features(tape, extractor_params, gt)?;
        for &y in &stack_out.per_stage {
            perceptual.push(extractor.distance(tape, extractor_params, y, &gt_feats)?);
        }
        let p_sum = sum_vars(tape, &perceptual)?;
        let weighted = tape.affine(p_sum, cfg.lambda, 0.0);
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        smooth_l1: smooth,
        perceptual,
    })
}

fn sum_vars<T: Element>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Config("empty loss sum".into()))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// Smooth-L1 loss of one stage output against the ground truth.
pub fn stage_smooth_l1<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, g) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let l = tape.smooth_l1(p, g)?;
    Ok(tape.value(l).item().to_f64_lossy())
}

/// Perceptual loss of one stage output (both images in the network domain).
pub fn stage_perceptual<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    extractor: &PerceptualExtractor<T>,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "perceptual loss of mismatched shapes {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut tape = Tape::new();
    let p = extractor.bind(&mut tape);
    let (pv, gv) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
    let gf = extractor.features(&mut tape, &p, gv)?;
    let l = extractor.distance(&mut tape, &p, pv, &gf)?;
    Ok(tape.value(l).item().to_f64_lossy())
}
