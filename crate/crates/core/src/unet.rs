//! Noise-predicting U-net with timestep-modulated residual blocks,
//! self-attention at selected levels and cross-attention on skip
//! connections guided by wavelet details of the CNN prediction.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Manifest;
use crate::error::{Error, Result};
use crate::freq::dwt_haar;
use crate::image::Image;
use crate::nn::{timestep_embedding, Conv2d, GroupNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of 2x downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel multiplier per level `0..=depth`; the last is the bottleneck.
    pub channel_mults: Vec<usize>,
    /// Levels (`0..=depth`) that get a self-attention block.
    pub attention_levels: Vec<usize>,
    /// Wavelet-guided cross-attention on the skips of levels `1..depth`.
    pub hf_cross_attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4],
            attention_levels: vec![3],
            hf_cross_attention: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("U-net depth and base channels must be positive".into()));
        }
        if self.channel_mults.len() != self.depth + 1 || self.channel_mults.contains(&0) {
            return Err(Error::Config(format!(
                "U-net needs {} positive channel multipliers, got {:?}",
                self.depth + 1,
                self.channel_mults
            )));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l > self.depth) {
            return Err(Error::Config(format!("attention level {l} exceeds depth {}", self.depth)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn to_manifest(&self) -> Manifest {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut m = Manifest::new();
        m.set("depth", self.depth)
            .set("base_channels", self.base_channels)
            .set("channel_mults", join(&self.channel_mults))
            .set("attention_levels", join(&self.attention_levels))
            .set("hf_cross_attention", self.hf_cross_attention);
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let list = |key: &str| -> Result<Vec<usize>> {
            let raw = m.require(key)?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("malformed {key} {raw:?}"))))
                .collect()
        };
        let c = UNetConfig {
            depth: m.parse("depth")?,
            base_channels: m.parse("base_channels")?,
            channel_mults: list("channel_mults")?,
            attention_levels: list("attention_levels")?,
            hf_cross_attention: m.parse("hf_cross_attention")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Per-level wavelet guidance. `levels[i - 1]` is `[N, 1, H / 2^i, W / 2^i]`:
/// the level-`i` horizontal, vertical and diagonal details summed over
/// orientations and input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HfGuidance<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> HfGuidance<T> {
    pub fn from_batch(x_cnn: &Tensor<T>, levels: usize) -> Result<Self> {
        let images = Image::unbatch(x_cnn);
        let pyramids = images.iter().map(|im| dwt_haar(im, levels)).collect::<Result<Vec<_>>>()?;
        let levels = (1..=levels)
            .map(|lvl| {
                let maps: Vec<Image<T>> = pyramids
                    .iter()
                    .map(|p| {
                        let s = p.level(lvl).expect("level in range").sum();
                        Image::from_fn(s.height(), s.width(), 1, |y, x, _| {
                            (0..s.channels()).map(|c| s.get(y, x, c)).sum()
                        })
                    })
                    .collect();
                Image::batch(&maps)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HfGuidance { levels })
    }

    pub fn zeros_like(&self) -> Self {
        HfGuidance { levels: self.levels.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn level(&self, i: usize) -> Option<&Tensor<T>> {
        i.checked_sub(1).and_then(|k| self.levels.get(k))
    }
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { location: layer.to_string() })
    }
}

/// `[N, C, H, W] -> [N, H*W, C]`
fn tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    g.transpose12(flat)
}

/// `[N, H*W, C] -> [N, C, H, W]`
fn untokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let t = g.transpose12(x);
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `softmax(Q K^T / sqrt(d)) V` over flattened positions; `q`, `k` are
/// `[N, P, d]`, `v` is `[N, P, C]`. Returns output and attention weights.
fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = g.shape(q)[2];
    let kt = g.transpose12(k);
    let scores = g.matmul(q, kt);
    let scaled = g.affine(scores, T::one() / T::of_usize(d).sqrt(), T::zero());
    let weights = g.softmax_last(scaled);
    (g.matmul(weights, v), weights)
}

/// Cross-attention whose queries come from the wavelet guidance map and
/// whose keys and values come from the features; adds the input back.
#[derive(Debug, Clone)]
pub struct HfCrossAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub dim: usize,
    pub channels: usize,
}

impl HfCrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        HfCrossAttention {
            query: Conv2d::new(store, &format!("{name}.query"), 1, channels, 1, 1, rng),
            key: Conv2d::new(store, &format!("{name}.key"), channels, channels, 1, 1, rng),
            value: Conv2d::new(store, &format!("{name}.value"), channels, channels, 1, 1, rng),
            dim: channels,
            channels,
        }
    }

    /// Returns the output `[N, C, H, W]` and attention weights `[N, HW, HW]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        features: Var,
        guidance: Var,
    ) -> Result<(Var, Var)> {
        let fs = g.shape(features).to_vec();
        let gs = g.shape(guidance).to_vec();
        if fs.len() != 4 || gs.len() != 4 || fs[1] != self.channels || gs[1] != 1 || fs[0] != gs[0] || fs[2..] != gs[2..] {
            return Err(Error::Dimension(format!(
                "cross-attention guidance {gs:?} does not match features {fs:?} ({} channels)",
                self.channels
            )));
        }
        let q = self.query.forward(g, p, guidance);
        let q = tokens(g, q);
        let k = self.key.forward(g, p, features);
        let k = tokens(g, k);
        let v = self.value.forward(g, p, features);
        let v = tokens(g, v);
        let (o, weights) = attend(g, q, k, v);
        let o = untokens(g, o, fs[2], fs[3]);
        Ok((g.add(o, features), weights))
    }
}

/// Attention over positions of a single feature map, with a residual.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: [Conv2d; 3],
    proj: Conv2d,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        SelfAttention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            qkv: [
                Conv2d::new(store, &format!("{name}.q"), channels, channels, 1, 1, rng),
                Conv2d::new(store, &format!("{name}.k"), channels, channels, 1, 1, rng),
                Conv2d::new(store, &format!("{name}.v"), channels, channels, 1, 1, rng),
            ],
            proj: Conv2d::zeroed(store, &format!("{name}.proj"), channels, channels, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let h = self.norm.forward(g, p, x);
        let [q, k, v] = self.qkv.map(|c| {
            let y = c.forward(g, p, h);
            tokens(g, y)
        });
        let (o, _) = attend(g, q, k, v);
        let o = untokens(g, o, s[2], s[3]);
        let o = self.proj.forward(g, p, o);
        g.add(o, x)
    }
}

/// GN, SiLU, conv; timestep scale-shift; GN, SiLU, conv; skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_channels: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), time_dim, 2 * cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
            out_channels: cout,
        }
    }

    /// `temb` is the SiLU-activated embedding `[N, time_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, temb: Var) -> Var {
        let n = g.shape(x)[0];
        let c = self.out_channels;
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let m = self.time.forward(g, p, temb);
        let m = g.reshape(m, &[n, 2 * c, 1, 1]);
        let scale = g.narrow(m, 0, c);
        let scale = g.affine(scale, T::one(), T::one());
        let shift = g.narrow(m, c, c);
        let h = self.norm2.forward(g, p, h);
        let h = g.mul(h, scale);
        let h = g.add(h, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, p, x),
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Conv2d,
    cross: Option<HfCrossAttention>,
    res: ResBlock,
    attn: Option<SelfAttention>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    in_channels: usize,
    out_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<SelfAttention>,
    mid2: ResBlock,
    /// Ordered from level 0 upwards.
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        config: &UNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (base, tdim, depth) = (config.base_channels, config.time_dim(), config.depth);
        let ch = |l: usize| config.channels(l);
        let time1 = Linear::new(store, &format!("{name}.time1"), base, tdim, rng);
        let time2 = Linear::new(store, &format!("{name}.time2"), tdim, tdim, rng);
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), in_channels, ch(0), 3, 1, rng);
        let attn_at = |l: usize| config.attention_levels.contains(&l);
        let mut down = Vec::with_capacity(depth);
        let mut prev = ch(0);
        for l in 0..depth {
            let pre = format!("{name}.down.{l}");
            down.push(DownLevel {
                res: ResBlock::new(store, &format!("{pre}.res"), prev, ch(l), tdim, rng),
                attn: attn_at(l).then(|| SelfAttention::new(store, &format!("{pre}.attn"), ch(l), rng)),
                down: Conv2d::new(store, &format!("{pre}.down"), ch(l), ch(l), 3, 2, rng),
            });
            prev = ch(l);
        }
        let mid1 = ResBlock::new(store, &format!("{name}.mid.res1"), prev, ch(depth), tdim, rng);
        let mid_attn = attn_at(depth).then(|| SelfAttention::new(store, &format!("{name}.mid.attn"), ch(depth), rng));
        let mid2 = ResBlock::new(store, &format!("{name}.mid.res2"), ch(depth), ch(depth), tdim, rng);
        let mut up = Vec::with_capacity(depth);
        for l in 0..depth {
            let pre = format!("{name}.up.{l}");
            up.push(UpLevel {
                up: Conv2d::new(store, &format!("{pre}.up"), ch(l + 1), ch(l + 1), 3, 1, rng),
                cross: (config.hf_cross_attention && l >= 1)
                    .then(|| HfCrossAttention::new(store, &format!("{pre}.cross"), ch(l), rng)),
                res: ResBlock::new(store, &format!("{pre}.res"), ch(l + 1) + ch(l), ch(l), tdim, rng),
                attn: attn_at(l).then(|| SelfAttention::new(store, &format!("{pre}.attn"), ch(l), rng)),
            });
        }
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), ch(0));
        let conv_out = Conv2d::zeroed(store, &format!("{name}.conv_out"), ch(0), out_channels, 3);
        Ok(UNet {
            config: config.clone(),
            in_channels,
            out_channels,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// The output convolution (zero at initialization).
    pub fn output_conv(&self) -> &Conv2d {
        &self.conv_out
    }

    fn check_input<T: Scalar>(&self, shape: &[usize], t: &[usize], guidance: &HfGuidance<T>) -> Result<()> {
        let depth = self.config.depth;
        if shape.len() != 4 || shape[1] != self.in_channels || t.len() != shape[0] {
            return Err(Error::Dimension(format!(
                "U-net expects [N, {}, H, W] input with N timesteps, got {shape:?} and {} timesteps",
                self.in_channels,
                t.len()
            )));
        }
        let f = 1 << depth;
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::Dimension(format!(
                "U-net of depth {depth} needs sides divisible by {f}, got {}x{}",
                shape[2], shape[3]
            )));
        }
        if self.config.hf_cross_attention {
            for l in 1..depth {
                let expect = [shape[0], 1, shape[2] >> l, shape[3] >> l];
                match guidance.level(l) {
                    Some(gt) if gt.shape() == expect => {}
                    other => {
                        return Err(Error::Dimension(format!(
                            "guidance level {l} should be {expect:?}, got {:?}",
                            other.map(Tensor::shape)
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Predicted noise `[N, out_channels, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        t: &[usize],
        guidance: &HfGuidance<T>,
    ) -> Result<Var> {
        self.check_input(g.shape(x), t, guidance)?;
        let emb = g.constant(timestep_embedding(t, self.config.base_channels));
        let temb = self.time1.forward(g, p, emb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, p, temb);
        let temb = g.silu(temb);

        let mut h = self.conv_in.forward(g, p, x);
        check_finite(g, h, "unet.conv_in")?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (l, level) in self.down.iter().enumerate() {
            h = level.res.forward(g, p, h, temb);
            if let Some(a) = &level.attn {
                h = a.forward(g, p, h);
            }
            check_finite(g, h, &format!("unet.down.{l}"))?;
            skips.push(h);
            h = level.down.forward(g, p, h);
        }
        h = self.mid1.forward(g, p, h, temb);
        if let Some(a) = &self.mid_attn {
            h = a.forward(g, p, h);
        }
        h = self.mid2.forward(g, p, h, temb);
        check_finite(g, h, "unet.mid")?;
        for l in (0..self.config.depth).rev() {
            let level = &self.up[l];
            let u = g.upsample_nearest(h, 2);
            let u = level.up.forward(g, p, u);
            let mut skip = skips[l];
            if let Some(ca) = &level.cross {
                let guide = g.constant(guidance.level(l).expect("checked").clone());
                skip = ca.forward(g, p, skip, guide)?.0;
                check_finite(g, skip, &format!("unet.up.{l}.cross"))?;
            }
            let cat = g.concat(&[u, skip]);
            h = level.res.forward(g, p, cat, temb);
            if let Some(a) = &level.attn {
                h = a.forward(g, p, h);
            }
            check_finite(g, h, &format!("unet.up.{l}"))?;
        }
        let h = self.norm_out.forward(g, p, h);
        let h = g.silu(h);
        let out = self.conv_out.forward(g, p, h);
        check_finite(g, out, "unet.conv_out")?;
        Ok(out)
    }
}
