//! Reusable T-Net blocks: residual dense block, sampling blocks, dual
//! attention and the per-channel weighted skip fusion.
//!
//! Blocks are stateless descriptors. They know the names of their parameters,
//! can initialise them into a [`ParamStore`], and evaluate on a [`Tape`]
//! against a set of [`Bound`] parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Zero "same" padding: spatial size changes only through the stride.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        let fan_in = self.in_channels * k * k;
        store.insert(
            self.weight_name(),
            fan_in_uniform(&[self.out_channels, self.in_channels, k, k], fan_in, rng),
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 4x4 stride-2 transposed convolution with padding 1: exact 2x upsampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2d {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let k = Self::KERNEL;
        store.insert(
            self.weight_name(),
            fan_in_uniform(&[self.in_channels, self.out_channels, k, k], self.in_channels * k * k, rng),
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        tape.conv_transpose2d(x, w, Some(b), Self::STRIDE, Self::PAD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdbSpec {
    pub channels: usize,
    pub growth: usize,
    pub layers: usize,
}

impl RdbSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.growth == 0 {
            return Err(Error::Config(
                "RDB channels and growth must be positive".into(),
            ));
        }
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "an RDB needs at least 2 layers (feature convs + 1x1 projection), got {}",
                self.layers
            )));
        }
        Ok(())
    }

    /// Channels entering the final 1x1 projection.
    pub fn concat_channels(&self) -> usize {
        self.channels + (self.layers - 1) * self.growth
    }
}

impl Default for RdbSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            growth: 16,
            layers: 5,
        }
    }
}

/// Residual dense block: `layers - 1` densely connected 3x3 conv + ReLU
/// layers, a 1x1 projection back to `channels`, and a residual addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rdb {
    pub name: String,
    pub spec: RdbSpec,
    convs: Vec<Conv2d>,
}

impl Rdb {
    pub fn new(name: impl Into<String>, spec: RdbSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let mut convs = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers - 1 {
            convs.push(Conv2d::new(
                format!("{name}.conv{}", l + 1),
                spec.channels + l * spec.growth,
                spec.growth,
                3,
                1,
            ));
        }
        convs.push(Conv2d::new(
            format!("{name}.conv{}", spec.layers),
            spec.concat_channels(),
            spec.channels,
            1,
            1,
        ));
        Ok(Self { name, spec, convs })
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.convs.iter().try_for_each(|c| c.init(store, rng))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.spec.channels {
            return Err(Error::Config(format!(
                "{}: input has {c} channels, block expects {}",
                self.name, self.spec.channels
            )));
        }
        let (last, feature_convs) = self.convs.split_last().expect("layers >= 2");
        let mut features = vec![x];
        for conv in feature_convs {
            let input = if features.len() == 1 {
                x
            } else {
                tape.concat_channels(&features)?
            };
            let y = conv.forward(tape, p, input)?;
            features.push(tape.relu(y));
        }
        let dense = tape.concat_channels(&features)?;
        let projected = last.forward(tape, p, dense)?;
        tape.add(x, projected)
    }
}

/// 3x3 stride-2 conv + ReLU, then 1x1 conv doubling the channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DownBlock {
    pub name: String,
    pub channels: usize,
    spatial: Conv2d,
    project: Conv2d,
}

impl DownBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            spatial: Conv2d::new(format!("{name}.spatial"), channels, channels, 3, 2),
            project: Conv2d::new(format!("{name}.project"), channels, 2 * channels, 1, 1),
            name,
            channels,
        }
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.spatial.init(store, rng)?;
        self.project.init(store, rng)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "{}: downsampling needs even spatial size, got {h}x{w}",
                self.name
            )));
        }
        if c != self.channels {
            return Err(Error::Config(format!(
                "{}: input has {c} channels, block expects {}",
                self.name, self.channels
            )));
        }
        let y = self.spatial.forward(tape, p, x)?;
        let y = tape.relu(y);
        self.project.forward(tape, p, y)
    }
}

/// 4x4 stride-2 transposed conv + ReLU, then 1x1 conv halving the channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpBlock {
    pub name: String,
    pub channels: usize,
    spatial: ConvTranspose2d,
    project: Conv2d,
}

impl UpBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: upsampling halves the channel count, {channels} is odd"
            )));
        }
        Ok(Self {
            spatial: ConvTranspose2d::new(format!("{name}.spatial"), channels, channels),
            project: Conv2d::new(format!("{name}.project"), channels, channels / 2, 1, 1),
            name,
            channels,
        })
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.spatial.init(store, rng)?;
        self.project.init(store, rng)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::Config(format!(
                "{}: input has {c} channels, block expects {}",
                self.name, self.channels
            )));
        }
        let y = self.spatial.forward(tape, p, x)?;
        let y = tape.relu(y);
        self.project.forward(tape, p, y)
    }
}

/// Output of an attention branch together with its row-stochastic
/// attention matrix, `(N, P, P)` for position and `(N, C, C)` for channel.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Var,
}

/// Position (spatial) self-attention: `S = softmax(X^T X)` over the `H*W`
/// positions, `out = x + gamma * X S^T`.
pub fn position_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
) -> Result<AttentionOutput> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let flat = tape.reshape(x, &[n, c, h * w])?;
    let energy = tape.bmm(flat, flat, true, false)?;
    let attention = tape.softmax_rows(energy)?;
    let increment = tape.bmm(flat, attention, false, true)?;
    let increment = tape.reshape(increment, &[n, c, h, w])?;
    let scaled = tape.mul_scalar(increment, gamma)?;
    Ok(AttentionOutput {
        output: tape.add(x, scaled)?,
        attention,
    })
}

/// Channel self-attention: `M = softmax(X X^T)` over channels,
/// `out = x + gamma * M X`.
pub fn channel_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
) -> Result<AttentionOutput> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let flat = tape.reshape(x, &[n, c, h * w])?;
    let energy = tape.bmm(flat, flat, false, true)?;
    let attention = tape.softmax_rows(energy)?;
    let increment = tape.bmm(attention, flat, false, false)?;
    let increment = tape.reshape(increment, &[n, c, h, w])?;
    let scaled = tape.mul_scalar(increment, gamma)?;
    Ok(AttentionOutput {
        output: tape.add(x, scaled)?,
        attention,
    })
}

/// Sum of the position and channel attention branches. Both scales start at
/// zero, so the block initially maps `x` to `2x`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualAttention {
    pub name: String,
}

impl DualAttention {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    pub fn gamma_pos_name(&self) -> String {
        format!("{}.gamma_pos", self.name)
    }

    pub fn gamma_chan_name(&self) -> String {
        format!("{}.gamma_chan", self.name)
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(self.gamma_pos_name(), Tensor::zeros(&[1]))?;
        store.insert(self.gamma_chan_name(), Tensor::zeros(&[1]))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let pos = position_attention(tape, x, p.get(&self.gamma_pos_name())?)?;
        let chan = channel_attention(tape, x, p.get(&self.gamma_chan_name())?)?;
        tape.add(pos.output, chan.output)
    }
}

/// Trainable per-channel `alpha`, `beta` of one skip level, both
/// initialised to ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub name: String,
    pub level: usize,
    pub channels: usize,
}

impl FusionWeights {
    pub fn new(name: impl Into<String>, level: usize, channels: usize) -> Self {
        Self {
            name: name.into(),
            level,
            channels,
        }
    }

    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(self.alpha_name(), Tensor::full(&[self.channels], T::one()))?;
        store.insert(self.beta_name(), Tensor::full(&[self.channels], T::one()))
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        lateral: Var,
        vertical: Var,
    ) -> Result<Var> {
        weighted_fuse(
            tape,
            lateral,
            vertical,
            p.get(&self.alpha_name())?,
            p.get(&self.beta_name())?,
            self.level,
        )
    }
}

/// `alpha[c] * lateral + beta[c] * vertical`.
pub fn weighted_fuse<T: Element>(
    tape: &mut Tape<T>,
    lateral: Var,
    vertical: Var,
    alpha: Var,
    beta: Var,
    level: usize,
) -> Result<Var> {
    let (ls, vs) = (tape.value(lateral).shape(), tape.value(vertical).shape());
    if ls != vs {
        return Err(Error::Shape(format!(
            "skip fusion at level {level}: lateral {ls:?} vs vertical {vs:?}"
        )));
    }
    let c = ls[1];
    for (what, v) in [("alpha", alpha), ("beta", beta)] {
        if tape.value(v).numel() != c {
            return Err(Error::Shape(format!(
                "skip fusion at level {level}: {what} has {} entries for {c} channels",
                tape.value(v).numel()
            )));
        }
    }
    let a = tape.channel_scale(lateral, alpha)?;
    let b = tape.channel_scale(vertical, beta)?;
    tape.add(a, b)
}
