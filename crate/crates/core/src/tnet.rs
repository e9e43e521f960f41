//! The T-Net backbone: a U-shaped encoder/decoder of residual dense blocks
//! with weighted skip fusion and a dual-attention bottleneck.
//!
//! Parameter names (prefixed by the network's name prefix, empty for a
//! single shared network):
//!
//! | name                       | block                                            |
//! |----------------------------|--------------------------------------------------|
//! | `conv_in`                  | 3x3 conv, `in_channels -> base`, no activation   |
//! | `down{i}.{spatial,project}`| downsampling block, level `i-1 -> i`, `i = 1..=m`|
//! | `enc{i}.rdb{j}.conv{l}`    | encoder trunk RDBs at level `i`                  |
//! | `attn.{gamma_pos,gamma_chan}` | dual attention at level `m`                   |
//! | `up{i}.{spatial,project}`  | upsampling block, level `i -> i-1`               |
//! | `lat{i}.conv{l}`           | lateral RDB on the skip at level `i = 1..m-1`    |
//! | `fuse{i}.{alpha,beta}`     | skip fusion vectors at level `i = 0..m-1`        |
//! | `dec{i}.rdb{j}.conv{l}`    | decoder trunk RDBs at level `i`                  |
//! | `conv_out`                 | 3x3 conv, `base -> out_channels`, no activation  |
//!
//! Every conv carries `.weight` and `.bias`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Tape, Var};
use crate::blocks::{Conv2d, DownBlock, DualAttention, FusionWeights, Rdb, RdbSpec, UpBlock};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TNetConfig {
    /// Down/up block pairs.
    pub m: usize,
    /// Trunk RDB pairs.
    pub n: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub rdb_growth: usize,
    pub rdb_layers: usize,
}

impl Default for TNetConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n: 3,
            base_channels: 16,
            in_channels: 6,
            out_channels: 3,
            rdb_growth: 16,
            rdb_layers: 5,
        }
    }
}

impl TNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 {
            return bad("m (down/up pairs) must be at least 1".into());
        }
        if self.m > 12 {
            return bad(format!("m = {} would need inputs of at least 2^{} pixels", self.m, self.m));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.n > 0 && self.m < 2 {
            return bad(format!(
                "n = {} trunk RDB pairs need an intermediate level, but m = 1 has none (trunk RDBs live at levels 1..m-1)",
                self.n
            ));
        }
        RdbSpec {
            channels: self.base_channels,
            growth: self.rdb_growth,
            layers: self.rdb_layers,
        }
        .validate()
    }

    /// Channel count at levels `0..=m`.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..=self.m).map(|i| self.base_channels << i).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.m
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.m
    }

    pub fn rdb_spec(&self, level: usize) -> RdbSpec {
        RdbSpec {
            channels: self.base_channels << level,
            growth: self.rdb_growth,
            layers: self.rdb_layers,
        }
    }

    /// Trunk RDB pairs per level (index = level). Pairs go to levels
    /// `1..m-1`, one per level starting from the deepest; when `n > m-1`
    /// the surplus stacks up on the deepest levels first.
    pub fn trunk_rdbs_per_level(&self) -> Vec<usize> {
        let mut counts = vec![0; self.m + 1];
        let levels = self.m.saturating_sub(1);
        if levels == 0 {
            return counts;
        }
        let (base, extra) = (self.n / levels, self.n % levels);
        for (i, c) in counts.iter_mut().enumerate().take(self.m).skip(1) {
            *c = base + usize::from(i > self.m - 1 - extra);
        }
        counts
    }
}

/// Block inventory of a built network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCounts {
    pub conv_in: usize,
    pub conv_out: usize,
    pub down: usize,
    pub up: usize,
    pub encoder_rdbs: usize,
    pub decoder_rdbs: usize,
    pub lateral_rdbs: usize,
    pub attention: usize,
    pub fusion_pairs: usize,
}

/// Intermediate features recorded by [`TNet::forward_traced`].
#[derive(Clone, Debug)]
pub struct LevelTrace {
    /// Encoder features `F_0..F_m`.
    pub encoder: Vec<Var>,
    /// Dual-attention output at level `m`.
    pub bottleneck: Var,
    /// Fused decoder features at levels `m-1..0`, deepest first.
    pub fused: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TNet {
    config: TNetConfig,
    prefix: String,
    conv_in: Conv2d,
    conv_out: Conv2d,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    encoder: Vec<Vec<Rdb>>,
    decoder: Vec<Vec<Rdb>>,
    lateral: Vec<Option<Rdb>>,
    attention: DualAttention,
    fusion: Vec<FusionWeights>,
}

impl TNet {
    /// Lay out the blocks; parameter names carry `prefix` (use `""` for a
    /// standalone network).
    pub fn new(config: TNetConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let m = config.m;
        let ch = config.level_channels();
        let name = |s: String| format!("{prefix}{s}");
        let trunk = config.trunk_rdbs_per_level();

        let mut down = Vec::with_capacity(m);
        let mut up = Vec::with_capacity(m);
        for i in 1..=m {
            down.push(DownBlock::new(name(format!("down{i}")), ch[i - 1]));
            up.push(UpBlock::new(name(format!("up{i}")), ch[i])?);
        }
        let mut encoder = Vec::with_capacity(m + 1);
        let mut decoder = Vec::with_capacity(m + 1);
        let mut lateral = Vec::with_capacity(m);
        for (i, &count) in trunk.iter().enumerate() {
            let spec = config.rdb_spec(i);
            let make = |side: &str| -> Result<Vec<Rdb>> {
                (1..=count)
                    .map(|j| Rdb::new(name(format!("{side}{i}.rdb{j}")), spec))
                    .collect()
            };
            encoder.push(make("enc")?);
            decoder.push(make("dec")?);
            if i < m {
                lateral.push(if i == 0 {
                    None
                } else {
                    Some(Rdb::new(name(format!("lat{i}")), spec)?)
                });
            }
        }
        let fusion = (0..m)
            .map(|i| FusionWeights::new(name(format!("fuse{i}")), i, ch[i]))
            .collect();
        Ok(Self {
            conv_in: Conv2d::new(name("conv_in".into()), config.in_channels, ch[0], 3, 1),
            conv_out: Conv2d::new(name("conv_out".into()), ch[0], config.out_channels, 3, 1),
            attention: DualAttention::new(name("attn".into())),
            prefix: prefix.to_string(),
            config,
            down,
            up,
            encoder,
            decoder,
            lateral,
            fusion,
        })
    }

    pub fn config(&self) -> &TNetConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn block_counts(&self) -> BlockCounts {
        BlockCounts {
            conv_in: 1,
            conv_out: 1,
            down: self.down.len(),
            up: self.up.len(),
            encoder_rdbs: self.encoder.iter().map(Vec::len).sum(),
            decoder_rdbs: self.decoder.iter().map(Vec::len).sum(),
            lateral_rdbs: self.lateral.iter().flatten().count(),
            attention: 1,
            fusion_pairs: self.fusion.len(),
        }
    }

    /// Initialise every parameter in a fixed block order.
    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv_in.init(store, rng)?;
        for i in 1..=self.config.m {
            self.down[i - 1].init(store, rng)?;
            for rdb in &self.encoder[i] {
                rdb.init(store, rng)?;
            }
        }
        self.attention.init(store)?;
        for i in (1..=self.config.m).rev() {
            self.up[i - 1].init(store, rng)?;
            if let Some(lat) = &self.lateral[i - 1] {
                lat.init(store, rng)?;
            }
            self.fusion[i - 1].init(store)?;
            for rdb in &self.decoder[i - 1] {
                rdb.init(store, rng)?;
            }
        }
        self.conv_out.init(store, rng)
    }

    /// Reject inputs whose spatial size is not a multiple of `2^m`,
    /// naming the first level that would be odd.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Shape(format!("expected (N, C, H, W), got {shape:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::Config(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let k = self.config.spatial_multiple();
        if h % k != 0 || w % k != 0 || *h == 0 || *w == 0 {
            let mut level = 0;
            let (mut hh, mut ww) = (*h, *w);
            while level < self.config.m && hh % 2 == 0 && ww % 2 == 0 && hh > 0 && ww > 0 {
                hh /= 2;
                ww /= 2;
                level += 1;
            }
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {k}: level {level} has odd size {hh}x{ww} and cannot be downsampled",
                self.config.m
            )));
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.0)
    }

    pub fn forward_traced<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, LevelTrace)> {
        let shape = tape.value(x).shape().to_vec();
        self.check_input(&shape)?;
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let m = self.config.m;
        let ch = self.config.level_channels();
        let expect = |tape: &Tape<T>, v: Var, level: usize, what: &str| -> Result<()> {
            let want = [n, ch[level], h >> level, w >> level];
            if tape.value(v).shape() != want {
                return Err(Error::Shape(format!(
                    "{what} at level {level}: expected {want:?}, got {:?}",
                    tape.value(v).shape()
                )));
            }
            Ok(())
        };

        let mut enc = Vec::with_capacity(m + 1);
        let mut f = self.conv_in.forward(tape, p, x)?;
        expect(tape, f, 0, "encoder feature")?;
        enc.push(f);
        for i in 1..=m {
            f = self.down[i - 1].forward(tape, p, f)?;
            for rdb in &self.encoder[i] {
                f = rdb.forward(tape, p, f)?;
            }
            expect(tape, f, i, "encoder feature")?;
            enc.push(f);
        }

        let bottleneck = self.attention.forward(tape, p, enc[m])?;
        expect(tape, bottleneck, m, "attention output")?;

        let mut fused = Vec::with_capacity(m);
        let mut t = bottleneck;
        for i in (1..=m).rev() {
            let upsampled = self.up[i - 1].forward(tape, p, t)?;
            let skip = match &self.lateral[i - 1] {
                Some(lat) => lat.forward(tape, p, enc[i - 1])?,
                None => enc[i - 1],
            };
            let mut g = self.fusion[i - 1].forward(tape, p, skip, upsampled)?;
            expect(tape, g, i - 1, "fused feature")?;
            fused.push(g);
            for rdb in &self.decoder[i - 1] {
                g = rdb.forward(tape, p, g)?;
            }
            t = g;
        }
        let y = self.conv_out.forward(tape, p, t)?;
        Ok((
            y,
            LevelTrace {
                encoder: enc,
                bottleneck,
                fused,
            },
        ))
    }
}

/// Lay out a standalone network and initialise its parameters from `seed`.
pub fn build_tnet<T: Element>(config: TNetConfig, seed: u64) -> Result<(TNet, ParamStore<T>)> {
    let net = TNet::new(config, "")?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((net, store))
}

/// Evaluate a network on a constant input without recording gradients.
pub fn tnet_infer<T: Element>(net: &TNet, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let y = net.forward(&mut tape, &p, xv)?;
    Ok(tape.value(y).clone())
}
