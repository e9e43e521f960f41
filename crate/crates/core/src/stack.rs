//! Stack T-Net: `K` recursive unfoldings of T-Net. Stage `k` sees the
//! original hazy image concatenated with the previous stage's output
//! (`y^0 = x^0`), and by default every stage shares one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Domain, ImageBuffer};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};
use crate::tnet::{TNet, TNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub stages: usize,
    pub share_parameters: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            share_parameters: true,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stack needs at least one stage".into()));
        }
        Ok(())
    }
}

/// Per-stage outputs `y^1..y^K` in the network domain; the last is final.
#[derive(Clone, Debug)]
pub struct StackOutput<V> {
    pub per_stage: Vec<V>,
}

impl<V> StackOutput<V> {
    pub fn final_output(&self) -> &V {
        self.per_stage.last().expect("at least one stage")
    }

    pub fn len(&self) -> usize {
        self.per_stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_stage.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StackTNet<T> {
    net_config: TNetConfig,
    stack_config: StackConfig,
    stages: Vec<TNet>,
    pub params: ParamStore<T>,
}

impl<T: Element> StackTNet<T> {
    pub fn build(net_config: TNetConfig, stack_config: StackConfig, seed: u64) -> Result<Self> {
        let mut model = Self::layout(net_config, stack_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stage in &model.stages {
            stage.init(&mut model.params, &mut rng)?;
        }
        Ok(model)
    }

    /// Architecture with an empty parameter store, for loading checkpoints.
    pub fn layout(net_config: TNetConfig, stack_config: StackConfig) -> Result<Self> {
        stack_config.validate()?;
        if net_config.in_channels != 2 * net_config.out_channels {
            return Err(Error::Config(format!(
                "stacked stages consume (hazy, previous output): in_channels must be 2 x out_channels = {}, got {}",
                2 * net_config.out_channels,
                net_config.in_channels
            )));
        }
        let stages = if stack_config.share_parameters {
            vec![TNet::new(net_config, "")?]
        } else {
            (1..=stack_config.stages)
                .map(|k| TNet::new(net_config, &format!("stage{k}.")))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            net_config,
            stack_config,
            stages,
            params: ParamStore::new(),
        })
    }

    /// Attach an existing parameter set, checking that names and shapes
    /// match the architecture exactly.
    pub fn with_params(net_config: TNetConfig, stack_config: StackConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::layout(net_config, stack_config)?;
        let mut template = ParamStore::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stage in &model.stages {
            stage.init(&mut template, &mut rng)?;
        }
        for (name, t) in template.iter() {
            match params.get(name) {
                None => {
                    return Err(Error::Config(format!(
                        "parameter set does not match the architecture: `{name}` is missing"
                    )))
                }
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter set does not match the architecture: `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !template.contains(n)) {
            return Err(Error::Config(format!(
                "parameter set does not match the architecture: unexpected `{extra}`"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn net_config(&self) -> &TNetConfig {
        &self.net_config
    }

    pub fn stack_config(&self) -> &StackConfig {
        &self.stack_config
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// The network evaluated at stage `k` (1-based).
    pub fn stage_net(&self, k: usize) -> &TNet {
        if self.stack_config.share_parameters {
            &self.stages[0]
        } else {
            &self.stages[k - 1]
        }
    }

    /// Unroll `stages` stages on the tape. `stages` may differ from the
    /// configured count only for shared-parameter stacks.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        hazy: Var,
        stages: usize,
    ) -> Result<StackOutput<Var>> {
        if stages == 0 {
            return Err(Error::Config("stack needs at least one stage".into()));
        }
        if !self.stack_config.share_parameters && stages > self.stack_config.stages {
            return Err(Error::Config(format!(
                "unshared stack has {} parameter sets, cannot run {stages} stages",
                self.stack_config.stages
            )));
        }
        let c = tape.value(hazy).dims4()?.1;
        if c != self.net_config.out_channels {
            return Err(Error::Shape(format!(
                "stack input must have {} channels, got {c}",
                self.net_config.out_channels
            )));
        }
        let mut per_stage = Vec::with_capacity(stages);
        let mut prev = hazy;
        for k in 1..=stages {
            let x = tape.concat_channels(&[hazy, prev])?;
            let y = self
                .stage_net(k)
                .forward(tape, p, x)
                .map_err(|e| stage_error(k, e))?;
            per_stage.push(y);
            prev = y;
        }
        Ok(StackOutput { per_stage })
    }

    /// Run the configured number of stages on constant input.
    pub fn infer(&self, hazy: &Tensor<T>) -> Result<StackOutput<Tensor<T>>> {
        self.infer_stages(hazy, self.stack_config.stages)
    }

    pub fn infer_stages(&self, hazy: &Tensor<T>, stages: usize) -> Result<StackOutput<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let x = tape.constant(hazy.clone());
        let out = self.forward(&mut tape, &p, x, stages)?;
        Ok(StackOutput {
            per_stage: out.per_stage.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Dehaze one image of any size: reflection-pad to a multiple of `2^m`,
    /// run `stages` stages, crop back and map every stage output to a
    /// clamped `[0, 1]` image.
    pub fn dehaze(&self, hazy: &ImageBuffer, stages: usize) -> Result<Vec<ImageBuffer>> {
        let (w, h) = (hazy.width(), hazy.height());
        let mult = self.net_config.spatial_multiple();
        let (pw, ph) = (w.div_ceil(mult) * mult, h.div_ceil(mult) * mult);
        let padded = hazy.to_domain(Domain::Signed).reflect_pad(pw, ph)?;
        let out = self.infer_stages(&padded.to_tensor(), stages)?;
        out.per_stage
            .iter()
            .map(|t| {
                ImageBuffer::from_tensor(t, 0, Domain::Signed)?
                    .crop(0, 0, w, h)
                    .map(|im| im.to_unit_clamped())
            })
            .collect()
    }
}

fn stage_error(k: usize, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("stage {k}: {msg}")),
        Error::Config(msg) => Error::Config(format!("stage {k}: {msg}")),
        other => other,
    }
}
