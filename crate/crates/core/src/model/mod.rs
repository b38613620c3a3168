//! The multi-task network: one convolutional encoder shared by a U-Net style
//! segmentation decoder and a pooled classification head.
//!
//! ```text
//!  image ─► [enc 0] ─► pool ─► [enc 1] ─► pool ─► … ─► [enc d-1] ─► pool ─► features
//!              │                  │                        │                 │
//!              │skip 0            │skip 1                  │skip d-1         ├─► GAP ─► dropout ─► linear ─► class logits
//!              ▼                  ▼                        ▼                 │
//!  seg ◄─ 1x1 ◄─ [dec 0] ◄─ up ◄─ [dec 1] ◄─ … ◄─ up ◄─ [dec d-1] ◄─ up ◄────┘
//! ```
//!
//! Every encoder stage is `(conv3x3 → group norm → relu) × 2`; every decoder
//! stage is `upsample ×2 → concat skip → conv3x3 → group norm → relu`.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::nn::{
    concat_channels, conv2d, dropout, global_avg_pool, group_norm, linear, maxpool2d, upsample_nearest2d,
};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of encoder stages (and pooling steps).
    pub depth: usize,
    pub num_classes: usize,
    pub seg_channels: usize,
    pub dropout_p: f64,
    /// Side length of the square input.
    pub input_size: usize,
    /// Upper bound on group-norm groups; each layer uses the largest divisor
    /// of its channel count not exceeding this.
    pub norm_groups: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            depth: 3,
            num_classes: 3,
            seg_channels: 1,
            dropout_p: 0.5,
            input_size: 64,
            norm_groups: 8,
        }
    }
}

const MAX_DEPTH: usize = 8;
const MAX_WIDTH: usize = 4096;
const MAX_INPUT: usize = 4096;
const MAX_IN_CHANNELS: usize = 16;
const MAX_CLASSES: usize = 1024;

impl NetConfig {
    /// Checks every field, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(1..=MAX_IN_CHANNELS).contains(&self.in_channels) {
            errs.push(format!("in_channels must be in 1..={MAX_IN_CHANNELS}, got {}", self.in_channels));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            errs.push(format!("depth must be in 1..={MAX_DEPTH}, got {}", self.depth));
        }
        let widest = self.base_width.checked_shl(self.depth.saturating_sub(1) as u32);
        if self.base_width == 0 || widest.is_none_or(|w| w > MAX_WIDTH) {
            errs.push(format!(
                "base_width {} must be positive with base_width * 2^(depth-1) <= {MAX_WIDTH}",
                self.base_width
            ));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            errs.push(format!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.seg_channels != 1 {
            errs.push(format!("seg_channels must be 1, got {}", self.seg_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errs.push(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.norm_groups == 0 {
            errs.push("norm_groups must be at least 1".into());
        }
        if self.input_size == 0 || self.input_size > MAX_INPUT {
            errs.push(format!("input_size must be in 1..={MAX_INPUT}, got {}", self.input_size));
        } else if self.depth <= MAX_DEPTH && !self.input_size.is_multiple_of(1 << self.depth) {
            errs.push(format!(
                "input_size {} must be divisible by 2^depth = {}",
                self.input_size,
                1usize << self.depth
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Channel width of encoder stage `i`.
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Group count used for a layer with `channels` channels.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
    }

    /// Number of trainable scalars.
    ///
    /// With `w_i = base_width · 2^i`, `c_0 = in_channels`, `c_i = w_{i-1}`,
    /// `u_i = w_{i+1}` (and `u_{d-1} = w_{d-1}`):
    ///
    /// * encoder stage `i`: `9·w_i·(c_i + w_i) + 6·w_i`
    /// * decoder stage `i`: `9·w_i·(u_i + w_i) + 3·w_i`
    /// * segmentation output: `seg_channels·(w_0 + 1)`
    /// * classifier: `(w_{d-1} + 1)·num_classes`
    pub fn param_count(&self) -> usize {
        let d = self.depth;
        let mut total = 0;
        for i in 0..d {
            let w = self.width(i);
            let cin = if i == 0 { self.in_channels } else { self.width(i - 1) };
            let up = if i + 1 < d { self.width(i + 1) } else { w };
            total += 9 * w * (cin + w) + 6 * w;
            total += 9 * w * (up + w) + 3 * w;
        }
        total += self.seg_channels * (self.width(0) + 1);
        total += (self.width(d - 1) + 1) * self.num_classes;
        total
    }
}

/// Indices into the parameter list for one conv → norm → relu block.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[ConvBlock; 2]>,
    /// Indexed by the encoder stage whose skip it consumes.
    decoder: Vec<ConvBlock>,
    seg_out: (usize, usize),
    cls_fc: (usize, usize),
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    SegHead,
    ClsHead,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Builds the parameter list in its canonical order together with the
/// index layout the forward pass uses.
fn plan(cfg: &NetConfig) -> (Vec<ParamSpec>, Layout) {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
        specs.len() - 1
    };
    let block = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                 prefix: &str,
                 conv: &str,
                 norm: &str,
                 cin: usize,
                 cout: usize| {
        let fan_in = cin * 9;
        ConvBlock {
            weight: push(format!("{prefix}.{conv}.weight"), vec![cout, cin, 3, 3], Init::He { fan_in }),
            bias: push(format!("{prefix}.{conv}.bias"), vec![cout], Init::Zeros),
            gamma: push(format!("{prefix}.{norm}.gamma"), vec![cout], Init::Ones),
            beta: push(format!("{prefix}.{norm}.beta"), vec![cout], Init::Zeros),
            groups: cfg.groups_for(cout),
        }
    };

    let d = cfg.depth;
    let mut encoder = Vec::with_capacity(d);
    for i in 0..d {
        let w = cfg.width(i);
        let cin = if i == 0 { cfg.in_channels } else { cfg.width(i - 1) };
        let prefix = format!("encoder.{i}");
        let first = block(&mut push, &prefix, "conv1", "norm1", cin, w);
        let second = block(&mut push, &prefix, "conv2", "norm2", w, w);
        encoder.push([first, second]);
    }
    // Decoder parameters are listed from the deepest stage outward, the order
    // in which the forward pass uses them.
    let mut decoder = vec![None; d];
    for i in (0..d).rev() {
        let w = cfg.width(i);
        let up = if i + 1 < d { cfg.width(i + 1) } else { w };
        decoder[i] = Some(block(&mut push, &format!("seg_head.up{i}"), "conv", "norm", up + w, w));
    }
    let w0 = cfg.width(0);
    let seg_out = (
        push("seg_head.out.weight".into(), vec![cfg.seg_channels, w0, 1, 1], Init::He { fan_in: w0 }),
        push("seg_head.out.bias".into(), vec![cfg.seg_channels], Init::Zeros),
    );
    let feat = cfg.width(d - 1);
    let cls_fc = (
        push("cls_head.fc.weight".into(), vec![feat, cfg.num_classes], Init::He { fan_in: feat }),
        push("cls_head.fc.bias".into(), vec![cfg.num_classes], Init::Zeros),
    );
    let layout = Layout {
        encoder,
        decoder: decoder.into_iter().map(|b| b.expect("every stage planned")).collect(),
        seg_out,
        cls_fc,
    };
    (specs, layout)
}

/// Logits produced by one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[N, 1, S, S]`
    pub seg_logits: Tensor,
    /// `[N, num_classes]`
    pub cls_logits: Tensor,
}

/// Shared-encoder network owning every trainable tensor.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl MultiTaskNet {
    /// He-normal convolution and linear weights, zero biases, unit norm scales.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.push(Tensor::param(&spec.shape, data)?);
            names.push(spec.name);
        }
        Ok(Self { config, names, params, layout })
    }

    /// Rebuilds a network from named parameter values, checking that names and
    /// shapes match what `config` implies.
    pub fn from_named(config: NetConfig, named: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = plan(&config);
        if named.len() != specs.len() {
            return Err(Error::Dimension(format!(
                "config expects {} parameter tensors, checkpoint has {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, shape, data)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != shape {
                return Err(Error::Dimension(format!(
                    "config expects {} {:?}, checkpoint has {} {:?}",
                    spec.name, spec.shape, name, shape
                )));
            }
            params.push(Tensor::param(&shape, data)?);
            names.push(name);
        }
        Ok(Self { config, names, params, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// `(name, tensor)` for every trainable tensor, in canonical order:
    /// encoder stages outward-in, decoder stages deepest first, then the
    /// segmentation output conv and the classifier.
    pub fn param_groups(&self) -> Vec<(&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces every parameter, keeping shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        for ((old, new), name) in self.params.iter().zip(&params).zip(&self.names) {
            if old.shape() != new.shape() {
                return Err(Error::dim(format!("{name}: shape {:?} replaced by {:?}", old.shape(), new.shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    pub fn part_of(name: &str) -> Part {
        if name.starts_with("encoder.") {
            Part::Encoder
        } else if name.starts_with("seg_head.") {
            Part::SegHead
        } else {
            Part::ClsHead
        }
    }

    fn block(&self, x: &Tensor, b: &ConvBlock) -> Result<Tensor> {
        let p = &self.params;
        let y = conv2d(x, &p[b.weight], &p[b.bias], 1, 1)?;
        Ok(group_norm(&y, b.groups, &p[b.gamma], &p[b.beta], GROUP_NORM_EPS)?.relu())
    }

    /// Runs the shared encoder once and both heads on its output. `training`
    /// only toggles dropout in the classifier.
    pub fn forward<R: Rng + ?Sized>(&self, images: &Tensor, training: bool, rng: &mut R) -> Result<NetOutput> {
        let cfg = &self.config;
        let s = cfg.input_size;
        match *images.shape() {
            [_, c, h, w] if c == cfg.in_channels && h == s && w == s => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "expected images [N, {}, {s}, {s}] (input size S = {s}), got {:?}",
                    cfg.in_channels,
                    images.shape()
                )))
            }
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = images.clone();
        for [first, second] in &self.layout.encoder {
            x = self.block(&x, first)?;
            x = self.block(&x, second)?;
            skips.push(x.clone());
            x = maxpool2d(&x, 2, 2)?;
        }
        let features = x;

        let mut y = features.clone();
        for (skip, block) in skips.iter().zip(&self.layout.decoder).rev() {
            y = upsample_nearest2d(&y, 2)?;
            y = concat_channels(&y, skip)?;
            y = self.block(&y, block)?;
        }
        let (ow, ob) = self.layout.seg_out;
        let seg_logits = conv2d(&y, &self.params[ow], &self.params[ob], 1, 0)?;

        let pooled = global_avg_pool(&features)?;
        let pooled = dropout(&pooled, cfg.dropout_p, training, rng)?;
        let (fw, fb) = self.layout.cls_fc;
        let cls_logits = linear(&pooled, &self.params[fw], &self.params[fb])?;
        Ok(NetOutput { seg_logits, cls_logits })
    }
}
