//! Network definitions.
//!
//! Every model takes an (N, 1, H, W) batch and returns pre-sigmoid logits:
//! (N, 1, H, W) for the segmenters and (N, 1) for the classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, dilation }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.dilation)
    }
}

pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), glorot_uniform(&[fout, fin], fin, fout, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

/// conv3×3 → ReLU → dropout → conv3×3 → ReLU
struct Block {
    c1: Conv2d,
    c2: Conv2d,
    dropout: f32,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, dropout: f32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            c2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            dropout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.c2.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// Encoder/decoder with `levels` resolutions and `2·levels − 1` blocks.
/// With `extra_skips`, each decoder block also receives a same-level
/// feature map from another network.
struct Unet {
    enc: Vec<Block>,
    dec: Vec<Block>,
}

impl Unet {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        base: usize,
        levels: usize,
        dropout: f32,
        extra_skips: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ch = |l: usize| base << l;
        let mut enc = Vec::new();
        for l in 0..levels {
            let input = if l == 0 { cin } else { ch(l - 1) };
            enc.push(Block::new(store, &format!("{name}.enc{l}"), input, ch(l), dropout, rng));
        }
        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            let extra = if extra_skips { ch(l) } else { 0 };
            let input = ch(l + 1) + ch(l) + extra;
            dec.push(Block::new(store, &format!("{name}.dec{l}"), input, ch(l), dropout, rng));
        }
        Self { enc, dec }
    }

    /// Returns the last decoder feature map and the encoder maps per level.
    fn forward(&self, g: &mut Graph, x: Var, extra: Option<&[Var]>) -> Result<(Var, Vec<Var>)> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                h = g.maxpool2(h)?;
            }
            h = block.forward(g, h)?;
            skips.push(h);
        }
        let levels = self.enc.len();
        for (i, block) in self.dec.iter().enumerate() {
            let l = levels - 2 - i;
            let up = g.upsample2(h);
            let cat = match extra {
                Some(e) => g.concat(&[up, skips[l], e[l]])?,
                None => g.concat(&[up, skips[l]])?,
            };
            h = block.forward(g, cat)?;
        }
        Ok((h, skips))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub input_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub dropout: f32,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            levels: 4,
            base_channels: 64,
            dropout: 0.1,
        }
    }
}

impl SegNetConfig {
    /// Blocks per Unet half.
    pub fn blocks_per_half(&self) -> usize {
        2 * self.levels - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 || self.base_channels == 0 {
            return Err(NnError::Config(format!(
                "levels {} and base channels {} must be positive (levels ≤ 8)",
                self.levels, self.base_channels
            )));
        }
        let factor = 1usize << (self.levels - 1);
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(NnError::Config(format!(
                "input size {} is not divisible by {factor} for {} levels",
                self.input_size, self.levels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnetClConfig {
    pub input_size: usize,
    pub filters: usize,
    pub dilations: Vec<usize>,
    /// Width of the first 1×1 convolution after the concatenation.
    pub mid_channels: usize,
    pub hidden: usize,
    pub dropout: f32,
}

impl Default for PnetClConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            filters: 64,
            dilations: vec![1, 2, 4, 8, 16],
            mid_channels: 64,
            hidden: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetClConfig {
    pub input_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub hidden: usize,
    pub dropout: f32,
}

impl Default for UnetClConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            levels: 4,
            base_channels: 64,
            hidden: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    WnetSeg(SegNetConfig),
    UnetSeg(SegNetConfig),
    PnetCl(PnetClConfig),
    UnetCl(UnetClConfig),
}

impl Arch {
    pub fn is_classifier(&self) -> bool {
        matches!(self, Arch::PnetCl(_) | Arch::UnetCl(_))
    }

    pub fn input_size(&self) -> usize {
        match self {
            Arch::WnetSeg(c) | Arch::UnetSeg(c) => c.input_size,
            Arch::PnetCl(c) => c.input_size,
            Arch::UnetCl(c) => c.input_size,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::WnetSeg(_) => "wnet_seg",
            Arch::UnetSeg(_) => "unet_seg",
            Arch::PnetCl(_) => "pnet_cl",
            Arch::UnetCl(_) => "unet_cl",
        }
    }
}

enum Net {
    Wnet {
        first: Unet,
        head1: Conv2d,
        second: Unet,
        head2: Conv2d,
    },
    Unet {
        unet: Unet,
        head: Conv2d,
    },
    Pnet {
        dilated: Vec<Conv2d>,
        mid: Conv2d,
        out: Conv2d,
        fc1: Linear,
        fc2: Linear,
        dropout: f32,
    },
    UnetCl {
        unet: Unet,
        head: Conv2d,
        fc1: Linear,
        fc2: Linear,
        dropout: f32,
    },
}

/// An architecture together with its parameters.
pub struct Model {
    arch: Arch,
    pub store: ParamStore,
    net: Net,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("arch", &self.arch)
            .field("params", &self.store.count_trainable())
            .finish()
    }
}

impl Model {
    /// Builds and initializes; the same `(arch, seed)` always yields the same weights.
    pub fn build(arch: Arch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match &arch {
            Arch::WnetSeg(c) => {
                c.validate()?;
                let first = Unet::new(&mut store, "unet1", 1, c.base_channels, c.levels, c.dropout, false, &mut rng);
                let head1 = Conv2d::new(&mut store, "unet1.head", c.base_channels, 1, 1, 1, &mut rng);
                let second = Unet::new(&mut store, "unet2", 2, c.base_channels, c.levels, c.dropout, true, &mut rng);
                let head2 = Conv2d::new(&mut store, "unet2.head", c.base_channels, 1, 1, 1, &mut rng);
                Net::Wnet {
                    first,
                    head1,
                    second,
                    head2,
                }
            }
            Arch::UnetSeg(c) => {
                c.validate()?;
                let unet = Unet::new(&mut store, "unet1", 1, c.base_channels, c.levels, c.dropout, false, &mut rng);
                let head = Conv2d::new(&mut store, "unet1.head", c.base_channels, 1, 1, 1, &mut rng);
                Net::Unet { unet, head }
            }
            Arch::PnetCl(c) => {
                if c.input_size == 0 || c.filters == 0 || c.dilations.is_empty() || c.hidden == 0 {
                    return Err(NnError::Config("PnetCl sizes must be positive".into()));
                }
                if let Some(&d) = c.dilations.iter().find(|&&d| d == 0) {
                    return Err(NnError::Config(format!("invalid dilation {d}")));
                }
                let mut dilated = Vec::new();
                for (i, &d) in c.dilations.iter().enumerate() {
                    let cin = if i == 0 { 1 } else { c.filters };
                    dilated.push(Conv2d::new(&mut store, &format!("dil{i}"), cin, c.filters, 3, d, &mut rng));
                }
                let cat = c.filters * c.dilations.len();
                let mid = Conv2d::new(&mut store, "mix1", cat, c.mid_channels, 1, 1, &mut rng);
                let out = Conv2d::new(&mut store, "mix2", c.mid_channels, 1, 1, 1, &mut rng);
                let flat = c.input_size * c.input_size;
                let fc1 = Linear::new(&mut store, "fc1", flat, c.hidden, &mut rng);
                let fc2 = Linear::new(&mut store, "fc2", c.hidden, 1, &mut rng);
                Net::Pnet {
                    dilated,
                    mid,
                    out,
                    fc1,
                    fc2,
                    dropout: c.dropout,
                }
            }
            Arch::UnetCl(c) => {
                SegNetConfig {
                    input_size: c.input_size,
                    levels: c.levels,
                    base_channels: c.base_channels,
                    dropout: 0.0,
                }
                .validate()?;
                let unet = Unet::new(&mut store, "unet", 1, c.base_channels, c.levels, 0.0, false, &mut rng);
                let head = Conv2d::new(&mut store, "unet.head", c.base_channels, 1, 1, 1, &mut rng);
                let flat = c.input_size * c.input_size;
                let fc1 = Linear::new(&mut store, "fc1", flat, c.hidden, &mut rng);
                let fc2 = Linear::new(&mut store, "fc2", c.hidden, 1, &mut rng);
                Net::UnetCl {
                    unet,
                    head,
                    fc1,
                    fc2,
                    dropout: c.dropout,
                }
            }
        };
        Ok(Self { arch, store, net })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 {
            return Err(NnError::Shape(format!("expected (N, 1, H, W) input, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        match &self.arch {
            Arch::WnetSeg(c) | Arch::UnetSeg(c) => {
                let f = 1 << (c.levels - 1);
                if h % f != 0 || w % f != 0 {
                    return Err(NnError::Config(format!(
                        "input {h}×{w} is not divisible by {f}"
                    )));
                }
            }
            _ => {
                let n = self.arch.input_size();
                if (h, w) != (n, n) {
                    return Err(NnError::Config(format!(
                        "classifier expects {n}×{n} input, got {h}×{w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward pass producing logits.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        match &self.net {
            Net::Wnet {
                first,
                head1,
                second,
                head2,
            } => {
                let (f1, skips) = first.forward(g, x, None)?;
                let l1 = head1.forward(g, f1)?;
                let p1 = g.sigmoid(l1);
                // the second Unet sees the raw image next to the refined mask
                let x2 = g.concat(&[x, p1])?;
                let (f2, _) = second.forward(g, x2, Some(&skips))?;
                head2.forward(g, f2)
            }
            Net::Unet { unet, head } => {
                let (f, _) = unet.forward(g, x, None)?;
                head.forward(g, f)
            }
            Net::Pnet { .. } => {
                let (logits, _) = self.pnet_forward(g, x)?;
                Ok(logits)
            }
            Net::UnetCl {
                unet,
                head,
                fc1,
                fc2,
                dropout,
            } => {
                let (f, _) = unet.forward(g, x, None)?;
                let m = head.forward(g, f)?;
                let flat = g.flatten(m)?;
                let h = fc1.forward(g, flat)?;
                let h = g.relu(h);
                let h = g.dropout(h, *dropout);
                fc2.forward(g, h)
            }
        }
    }

    /// PnetCl forward that also returns the per-dilation feature maps.
    pub fn pnet_forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let Net::Pnet {
            dilated,
            mid,
            out,
            fc1,
            fc2,
            dropout,
        } = &self.net
        else {
            return Err(NnError::Config("not a PnetCl model".into()));
        };
        self.check_input(g, x)?;
        let mut maps = Vec::with_capacity(dilated.len());
        let mut h = x;
        for conv in dilated {
            let y = conv.forward(g, h)?;
            h = g.relu(y);
            maps.push(h);
        }
        let cat = g.concat(&maps)?;
        let cat = g.dropout(cat, *dropout);
        let m = mid.forward(g, cat)?;
        let m = g.relu(m);
        let o = out.forward(g, m)?;
        let flat = g.flatten(o)?;
        let hid = fc1.forward(g, flat)?;
        let hid = g.relu(hid);
        let hid = g.dropout(hid, *dropout);
        Ok((fc2.forward(g, hid)?, maps))
    }

    /// Evaluation-mode probabilities for a batch, processed `chunk` items at a time.
    pub fn predict(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = batch.shape()[0];
        let mut out: Vec<f32> = Vec::new();
        let mut out_shape = None;
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let mut g = Graph::new(&self.store, false, 0);
            let x = g.input(batch.batch_slice(start, len));
            let logits = self.forward(&mut g, x)?;
            let p = g.sigmoid(logits);
            let t = g.value(p);
            if out_shape.is_none() {
                let mut s = t.shape().to_vec();
                s[0] = n;
                out_shape = Some(s);
            }
            out.extend_from_slice(t.data());
            start += len;
        }
        let shape = out_shape.unwrap_or_else(|| vec![0]);
        Tensor::new(shape, out)
    }
}
