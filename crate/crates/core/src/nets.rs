//! Learnable components: residual backbones, the HGD face/gaze/fusion models,
//! the noHP landmark detector with its auxiliary and final stacks, and the
//! wing loss.
//!
//! Tensors are `NCHW` `f32`. Convolutions are lowered to im2col + matmul,
//! which on CPU is several times faster to differentiate than the native
//! convolution kernels. Convolution weights are stored as `(out, k * k * in)`
//! with the patch index ordered `(ky, kx, channel)`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, ModuleT, Tensor, Var};
use candle_nn::{BatchNorm, BatchNormConfig, Init, Linear, Module, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::EyeStrategy;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Regression heads emit `ANGLE_SCALE * output` degrees so that unit-scale
/// activations cover the label range.
pub const ANGLE_SCALE: f64 = 30.0;
pub const HEAD_FEATURE: usize = 64;
pub const GAZE_FEATURE: usize = 64;
pub const FUSION_HIDDEN: usize = 64;
pub const LANDMARK_FEATURE: usize = 200;
pub const LANDMARK_OUTPUTS: usize = 32;
pub const FINAL_INPUT: usize = 3 * LANDMARK_FEATURE;

pub const WING_W: f64 = 10.0;
pub const WING_EPS: f64 = 2.0;

fn shape_err(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> NetError {
    NetError::Shape(format!("{what}: expected {expected:?}, got {got:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Imagenet,
    /// A single 3x3 convolution with the configured stride.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Average,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub base_width: usize,
    pub stem: Stem,
    pub stem_stride: usize,
    pub pool: Pool,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
}

impl BackboneConfig {
    pub fn new(depth: usize, input: (usize, usize, usize)) -> Self {
        Self {
            depth,
            base_width: 64,
            stem: Stem::Imagenet,
            stem_stride: 2,
            pool: Pool::Average,
            input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

fn layout(depth: usize) -> Result<(BlockKind, &'static [usize], &'static [usize])> {
    Ok(match depth {
        10 => (BlockKind::Basic, &[1, 1, 1, 1], &[1, 2, 4, 8]),
        18 => (BlockKind::Basic, &[2, 2, 2, 2], &[1, 2, 4, 8]),
        34 => (BlockKind::Basic, &[3, 4, 6, 3], &[1, 2, 4, 8]),
        56 => (BlockKind::Basic, &[9, 9, 9], &[1, 2, 4]),
        101 => (BlockKind::Bottleneck, &[3, 4, 23, 3], &[1, 2, 4, 8]),
        d => return Err(NetError::Config(format!("unsupported depth {d}; use 10, 18, 34, 56 or 101"))),
    })
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Gathers the `k * k` shifted views of a padded input: `(B, k*k*C, Ho, Wo)`.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let extra = stride - 1;
    let xp = if pad + extra > 0 {
        x.pad_with_zeros(2, pad, pad + extra)?.pad_with_zeros(3, pad, pad + extra)?
    } else {
        x.clone()
    };
    let mut views = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let v = xp.narrow(2, ky, stride * ho)?.narrow(3, kx, stride * wo)?;
            let v = if stride == 1 {
                v
            } else {
                v.contiguous()?
                    .reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?
            };
            views.push(v);
        }
    }
    Ok(Tensor::cat(&views, 1)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    cout: usize,
}

impl Conv2d {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((cout, k * k * cin), "weight", Init::Const(0.0))?;
        Ok(Self {
            weight,
            k,
            stride,
            pad,
            cout,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (ho, wo) = (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad));
        let cols = if self.k == 1 && self.pad == 0 && self.stride == 1 {
            x.clone()
        } else if self.k == 1 && self.pad == 0 {
            im2col(x, 1, self.stride, 0)?
        } else {
            im2col(x, self.k, self.stride, self.pad)?
        };
        let kc = cols.dim(1)?;
        let y = cols
            .reshape((b, kc, ho * wo))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * ho * wo, kc))?
            .matmul(&self.weight.t()?)?;
        Ok(y.reshape((b, ho * wo, self.cout))?.transpose(1, 2)?.reshape((b, self.cout, ho, wo))?)
    }
}

fn bn(c: usize, vb: VarBuilder) -> Result<BatchNorm> {
    let cfg = BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    };
    Ok(candle_nn::batch_norm(c, cfg, vb)?)
}

fn linear(din: usize, dout: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((dout, din), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(dout, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// 3x3 max pooling, stride 2, over non-negative inputs (zero padding is neutral).
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let cols = im2col(x, 3, 2, 1)?;
    let (ho, wo) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    Ok(cols.reshape((b, 9, c, ho, wo))?.max(1)?)
}

#[derive(Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, vb.pp("conv"))?,
            bn: bn(cout, vb.pp("bn"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }
}

#[derive(Debug)]
struct Block {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl Block {
    fn new(kind: BlockKind, cin: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<(Self, usize)> {
        let (convs, cout) = match kind {
            BlockKind::Basic => (
                vec![
                    ConvBn::new(cin, width, 3, stride, vb.pp("c1"))?,
                    ConvBn::new(width, width, 3, 1, vb.pp("c2"))?,
                ],
                width,
            ),
            BlockKind::Bottleneck => (
                vec![
                    ConvBn::new(cin, width, 1, 1, vb.pp("c1"))?,
                    ConvBn::new(width, width, 3, stride, vb.pp("c2"))?,
                    ConvBn::new(width, 4 * width, 1, 1, vb.pp("c3"))?,
                ],
                4 * width,
            ),
        };
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(cin, cout, 1, stride, vb.pp("down"))?)
        } else {
            None
        };
        Ok((Self { convs, shortcut }, cout))
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(&y, train)?;
            if i + 1 < self.convs.len() {
                y = y.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Residual convolutional network ending in global pooling or flattening.
#[derive(Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBn,
    blocks: Vec<Block>,
    out_channels: usize,
    out_hw: (usize, usize),
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let (kind, counts, mults) = layout(cfg.depth)?;
        let (c, mut h, mut w) = cfg.input;
        if c == 0 || h == 0 || w == 0 || cfg.base_width == 0 || cfg.stem_stride == 0 {
            return Err(NetError::Config(format!("degenerate backbone {cfg:?}")));
        }
        let stem = match cfg.stem {
            Stem::Imagenet => {
                (h, w) = (conv_out(h, 7, 2, 3), conv_out(w, 7, 2, 3));
                (h, w) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
                ConvBn::new(c, cfg.base_width, 7, 2, vb.pp("stem"))?
            }
            Stem::Compact => {
                (h, w) = (conv_out(h, 3, cfg.stem_stride, 1), conv_out(w, 3, cfg.stem_stride, 1));
                ConvBn::new(c, cfg.base_width, 3, cfg.stem_stride, vb.pp("stem"))?
            }
        };
        let mut blocks = Vec::new();
        let mut cin = cfg.base_width;
        for (s, (&n, &m)) in counts.iter().zip(mults).enumerate() {
            for i in 0..n {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                if stride == 2 {
                    (h, w) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
                }
                let (block, cout) = Block::new(kind, cin, cfg.base_width * m, stride, vb.pp(format!("s{s}b{i}")))?;
                blocks.push(block);
                cin = cout;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            out_channels: cin,
            out_hw: (h, w),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn output_width(&self) -> usize {
        match self.cfg.pool {
            Pool::Average => self.out_channels,
            Pool::Flatten => self.out_channels * self.out_hw.0 * self.out_hw.1,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims();
        let (c, h, w) = self.cfg.input;
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(shape_err("backbone input (B, C, H, W)", ("B", c, h, w), dims));
        }
        let mut y = self.stem.forward(x, train)?.relu()?;
        if self.cfg.stem == Stem::Imagenet {
            y = max_pool_3x3_s2(&y)?;
        }
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        Ok(match self.cfg.pool {
            Pool::Average => y.mean((2, 3))?,
            Pool::Flatten => y.flatten_from(1)?,
        })
    }
}

/// A chain of linear layers with ReLU between them; returns every hidden
/// activation alongside the output.
#[derive(Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(sizes: &[usize], vb: VarBuilder) -> Result<Self> {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let name = if i + 1 == n { "out".to_string() } else { format!("fc{i}") };
                linear(sizes[i], sizes[i + 1], vb.pp(name))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut hidden = Vec::new();
        let mut y = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(&y)?;
            if i + 1 < self.layers.len() {
                y = y.relu()?;
                hidden.push(y.clone());
            }
        }
        Ok((y, hidden))
    }

    fn input_width(&self) -> usize {
        self.layers[0].weight().dim(1).unwrap_or(0)
    }
}

fn check_width(what: &str, x: &Tensor, width: usize) -> Result<()> {
    match x.dims() {
        [_, w] if *w == width => Ok(()),
        d => Err(shape_err(what, ("B", width), d)),
    }
}

/// Re-initializes every variable from a per-name stream of `seed`, in sorted
/// name order. Rank-2 weights are He-uniform (`out.weight` layers use the
/// narrower `1/sqrt(fan_in)` bound); batch-norm scales and running variances
/// are 1; everything else is 0.
pub fn init_vars(vars: &VarMap, seed: u64) -> Result<()> {
    let data = vars.data().lock().expect("var map lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let values: Vec<f32> = if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let bound = if name.ends_with("out.weight") {
                1.0 / (fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let digest = Sha256::digest(name.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
            (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
        } else if name.ends_with("running_var") || name.ends_with("bn.weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        var.set(&Tensor::from_vec(values, dims, var.device())?)?;
    }
    Ok(())
}

fn is_trainable(name: &str) -> bool {
    !name.ends_with("running_mean") && !name.ends_with("running_var")
}

/// Trainable variables in sorted name order.
pub fn trainable_vars(vars: &VarMap) -> Vec<Var> {
    let data = vars.data().lock().expect("var map lock");
    let mut named: Vec<(&String, &Var)> = data.iter().filter(|(n, _)| is_trainable(n)).collect();
    named.sort_by(|a, b| a.0.cmp(b.0));
    named.into_iter().map(|(_, v)| v.clone()).collect()
}

pub fn param_count(vars: &VarMap) -> usize {
    trainable_vars(vars).iter().map(|v| v.elem_count()).sum()
}

/// Every variable (including batch-norm statistics) flattened to `f32`, keyed
/// by name. Used for freeze checks.
pub fn snapshot(vars: &VarMap) -> Result<BTreeMap<String, Vec<f32>>> {
    let data = vars.data().lock().expect("var map lock");
    data.iter()
        .map(|(n, v)| Ok((n.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
        .collect()
}

fn new_builder(vars: &VarMap, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_varmap(vars, DType::F32, device)
}

/// Face branch: backbone, 64-unit head feature, 2-unit head pose.
#[derive(Debug)]
pub struct FaceModel {
    backbone: Backbone,
    head: Mlp,
}

impl FaceModel {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let backbone = Backbone::new(cfg, vb.pp("backbone"))?;
        let head = Mlp::new(&[backbone.output_width(), HEAD_FEATURE, 2], vb.pp("head"))?;
        Ok(Self { backbone, head })
    }

    /// `(feature (B, 64), head pose (B, 2) in degrees)`.
    pub fn forward(&self, face: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let f = self.backbone.forward(face, train)?;
        let (out, hidden) = self.head.forward(&f)?;
        Ok((hidden[0].clone(), (out * ANGLE_SCALE)?))
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}

/// Output head of the gaze branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Regression,
    Classifier,
}

/// Gaze branch: backbone, 64-unit gaze feature ("FC-3"), then fusion layers
/// over the concatenation `[gaze feature, head feature?, lda?]`.
#[derive(Debug)]
pub struct GazeModel {
    backbone: Backbone,
    fc3: Linear,
    fusion: Mlp,
    head_width: usize,
    lda_width: usize,
    output: OutputKind,
}

impl GazeModel {
    pub fn new(cfg: &BackboneConfig, head_width: usize, lda_width: usize, outputs: usize, output: OutputKind, vb: VarBuilder) -> Result<Self> {
        let backbone = Backbone::new(cfg, vb.pp("backbone"))?;
        let fc3 = linear(backbone.output_width(), GAZE_FEATURE, vb.pp("fc3"))?;
        let fusion_in = GAZE_FEATURE + head_width + lda_width;
        let fusion = Mlp::new(&[fusion_in, FUSION_HIDDEN, outputs], vb.pp("fusion"))?;
        Ok(Self {
            backbone,
            fc3,
            fusion,
            head_width,
            lda_width,
            output,
        })
    }

    pub fn fusion_input_width(&self) -> usize {
        self.fusion.input_width()
    }

    /// 64-unit gaze feature.
    pub fn feature(&self, eye: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.fc3.forward(&self.backbone.forward(eye, train)?)?.relu()?)
    }

    /// Gaze angles in degrees (regression) or zone logits (classifier).
    pub fn forward(&self, eye: &Tensor, head_feature: Option<&Tensor>, lda: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut parts = vec![self.feature(eye, train)?];
        match (self.head_width, head_feature) {
            (0, None) => {}
            (w, Some(h)) if w > 0 => {
                check_width("head feature", h, w)?;
                parts.push(h.clone());
            }
            (w, h) => {
                return Err(shape_err("head feature width", w, h.map(|t| t.dims().to_vec())));
            }
        }
        match (self.lda_width, lda) {
            (0, None) => {}
            (k, Some(l)) if k > 0 => {
                check_width("LDA vector", l, k)?;
                parts.push(l.clone());
            }
            (k, l) => return Err(shape_err("LDA width", k, l.map(|t| t.dims().to_vec()))),
        }
        let fused = Tensor::cat(&parts, 1)?;
        let (out, _) = self.fusion.forward(&fused)?;
        Ok(match self.output {
            OutputKind::Regression => (out * ANGLE_SCALE)?,
            OutputKind::Classifier => out,
        })
    }
}

/// Full HGD configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgdConfig {
    pub depth: usize,
    pub base_width: usize,
    pub stem: Stem,
    pub stem_stride: usize,
    pub pool: Pool,
    /// Model input `(height, width)` of the face.
    pub face_size: (usize, usize),
    /// Model input `(height, width)` of one eye.
    pub eye_size: (usize, usize),
    pub strategy: EyeStrategy,
    pub use_face_model: bool,
    pub use_head_task: bool,
    /// mHoG levels appended to every image (0 disables).
    pub mhog_levels: usize,
    /// LDA vector width appended to the fusion input (0 disables).
    pub lda_dim: usize,
    pub output: OutputKind,
    pub zones: usize,
}

impl Default for HgdConfig {
    fn default() -> Self {
        Self {
            depth: 34,
            base_width: 64,
            stem: Stem::Imagenet,
            stem_stride: 2,
            pool: Pool::Average,
            face_size: (224, 224),
            eye_size: (224, 224),
            strategy: EyeStrategy::Sem,
            use_face_model: true,
            use_head_task: true,
            mhog_levels: 0,
            lda_dim: 0,
            output: OutputKind::Regression,
            zones: 9,
        }
    }
}

impl HgdConfig {
    pub fn channels(&self) -> usize {
        1 + self.mhog_levels
    }

    pub fn face_input(&self) -> (usize, usize, usize) {
        (self.channels(), self.face_size.0, self.face_size.1)
    }

    pub fn eye_input(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.strategy.merged_shape(self.eye_size.0, self.eye_size.1, self.channels());
        (c, h, w)
    }

    pub fn outputs(&self) -> usize {
        match self.output {
            OutputKind::Classifier => self.zones,
            OutputKind::Regression => self.strategy.target_width(),
        }
    }

    fn backbone(&self, input: (usize, usize, usize)) -> BackboneConfig {
        BackboneConfig {
            depth: self.depth,
            base_width: self.base_width,
            stem: self.stem,
            stem_stride: self.stem_stride,
            pool: self.pool,
            input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_head_task && !self.use_face_model {
            return Err(NetError::Config("the head task needs the face model".into()));
        }
        if self.output == OutputKind::Classifier && self.zones < 2 {
            return Err(NetError::Config("a classifier needs at least 2 zones".into()));
        }
        if self.output == OutputKind::Classifier && self.strategy.is_dual() {
            return Err(NetError::Config("the classifier predicts one zone; use the SEM strategy".into()));
        }
        layout(self.depth).map(|_| ())
    }
}

/// Face model (optional) plus gaze model, each with its own variable map so
/// they can be optimized or frozen independently.
pub struct HgdModel {
    pub cfg: HgdConfig,
    pub face: Option<FaceModel>,
    pub gaze: GazeModel,
    pub face_vars: VarMap,
    pub gaze_vars: VarMap,
}

/// Output of a full HGD forward pass.
pub struct HgdOutput {
    pub head_feature: Option<Tensor>,
    pub head: Option<Tensor>,
    pub gaze: Tensor,
}

impl HgdModel {
    pub fn new(cfg: &HgdConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let face_vars = VarMap::new();
        let gaze_vars = VarMap::new();
        let face = if cfg.use_face_model {
            Some(FaceModel::new(&cfg.backbone(cfg.face_input()), new_builder(&face_vars, device))?)
        } else {
            None
        };
        let head_width = if cfg.use_face_model { HEAD_FEATURE } else { 0 };
        let gaze = GazeModel::new(
            &cfg.backbone(cfg.eye_input()),
            head_width,
            cfg.lda_dim,
            cfg.outputs(),
            cfg.output,
            new_builder(&gaze_vars, device),
        )?;
        init_vars(&face_vars, seed)?;
        init_vars(&gaze_vars, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            face,
            gaze,
            face_vars,
            gaze_vars,
        })
    }

    pub fn forward(&self, face: Option<&Tensor>, eye: &Tensor, lda: Option<&Tensor>, train: bool) -> Result<HgdOutput> {
        let (head_feature, head) = match (&self.face, face) {
            (Some(m), Some(x)) => {
                let (f, h) = m.forward(x, train)?;
                (Some(f), Some(h))
            }
            (Some(_), None) => return Err(NetError::Shape("face model enabled but no face batch given".into())),
            (None, _) => (None, None),
        };
        let gaze = self.gaze.forward(eye, head_feature.as_ref(), lda, train)?;
        Ok(HgdOutput {
            head_feature,
            head,
            gaze,
        })
    }

    pub fn parts(&self) -> Vec<(&'static str, &VarMap)> {
        vec![("face", &self.face_vars), ("gaze", &self.gaze_vars)]
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.face_vars) + param_count(&self.gaze_vars)
    }
}

/// Landmark detector: backbone, 200-unit feature, 32 normalized coordinates.
#[derive(Debug)]
pub struct LandmarkDetector {
    backbone: Backbone,
    head: Mlp,
}

impl LandmarkDetector {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let backbone = Backbone::new(cfg, vb.pp("backbone"))?;
        let head = Mlp::new(&[backbone.output_width(), LANDMARK_FEATURE, LANDMARK_OUTPUTS], vb.pp("head"))?;
        Ok(Self { backbone, head })
    }

    /// `(coords (B, 32) as x/width, y/height pairs, feature (B, 200))`.
    pub fn forward(&self, eye: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let f = self.backbone.forward(eye, train)?;
        let (out, hidden) = self.head.forward(&f)?;
        Ok(((out + 0.5)?, hidden[0].clone()))
    }
}

/// Auxiliary gaze or head-pose module: FC 200, 200, 100, 50, 2 over the
/// detector feature; the tap is the second 200-unit activation.
#[derive(Debug)]
pub struct AuxModule {
    mlp: Mlp,
}

impl AuxModule {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[LANDMARK_FEATURE, 200, 200, 100, 50, 2], vb)?,
        })
    }

    /// `(prediction (B, 2) in degrees, tap (B, 200))`.
    pub fn forward(&self, feature: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width("auxiliary module input", feature, LANDMARK_FEATURE)?;
        let (out, hidden) = self.mlp.forward(feature)?;
        Ok(((out * ANGLE_SCALE)?, hidden[1].clone()))
    }
}

/// Final gaze model: FC 600, 300, 100, 32, 2 over the 600-unit concatenation.
#[derive(Debug)]
pub struct FinalModel {
    mlp: Mlp,
}

impl FinalModel {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[FINAL_INPUT, 600, 300, 100, 32, 2], vb)?,
        })
    }

    pub fn forward(&self, concat: &Tensor) -> Result<Tensor> {
        check_width("final model input", concat, FINAL_INPUT)?;
        Ok((self.mlp.forward(concat)?.0 * ANGLE_SCALE)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoHpConfig {
    pub detector: BackboneConfig,
}

impl NoHpConfig {
    pub fn eye_size(&self) -> (usize, usize) {
        (self.detector.input.1, self.detector.input.2)
    }
}

/// The noHP stack with one variable map per component.
pub struct NoHpStack {
    pub cfg: NoHpConfig,
    pub detector: LandmarkDetector,
    pub gaze_module: AuxModule,
    pub head_module: AuxModule,
    pub final_model: FinalModel,
    pub detector_vars: VarMap,
    pub gaze_module_vars: VarMap,
    pub head_module_vars: VarMap,
    pub final_vars: VarMap,
}

impl NoHpStack {
    pub fn new(cfg: &NoHpConfig, seed: u64, device: &Device) -> Result<Self> {
        let [detector_vars, gaze_module_vars, head_module_vars, final_vars] = std::array::from_fn(|_| VarMap::new());
        let detector = LandmarkDetector::new(&cfg.detector, new_builder(&detector_vars, device))?;
        let gaze_module = AuxModule::new(new_builder(&gaze_module_vars, device).pp("gaze_module"))?;
        let head_module = AuxModule::new(new_builder(&head_module_vars, device).pp("head_module"))?;
        let final_model = FinalModel::new(new_builder(&final_vars, device).pp("final"))?;
        for v in [&detector_vars, &gaze_module_vars, &head_module_vars, &final_vars] {
            init_vars(v, seed)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            detector,
            gaze_module,
            head_module,
            final_model,
            detector_vars,
            gaze_module_vars,
            head_module_vars,
            final_vars,
        })
    }

    /// `[detector feature, gaze-module tap, head-module tap]`, width 600.
    pub fn concat_features(&self, eye: &Tensor) -> Result<Tensor> {
        let (_, f) = self.detector.forward(eye, false)?;
        let (_, gt) = self.gaze_module.forward(&f)?;
        let (_, ht) = self.head_module.forward(&f)?;
        let cat = Tensor::cat(&[f, gt, ht], 1)?;
        check_width("noHP concatenation", &cat, FINAL_INPUT)?;
        Ok(cat)
    }

    pub fn predict(&self, eye: &Tensor) -> Result<Tensor> {
        self.final_model.forward(&self.concat_features(eye)?)
    }

    pub fn parts(&self) -> Vec<(&'static str, &VarMap)> {
        vec![
            ("detector", &self.detector_vars),
            ("gaze_module", &self.gaze_module_vars),
            ("head_module", &self.head_module_vars),
            ("final", &self.final_vars),
        ]
    }
}

/// Wing loss of one residual.
pub fn wing_value(x: f64, w: f64, eps: f64) -> f64 {
    let a = x.abs();
    if a < w {
        w * (1.0 + a / eps).ln()
    } else {
        a - (w - w * (1.0 + w / eps).ln())
    }
}

/// Derivative of [`wing_value`] with respect to the residual.
pub fn wing_grad(x: f64, w: f64, eps: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let a = x.abs();
    let d = if a < w { w / (eps + a) } else { 1.0 };
    d * x.signum()
}

/// Mean wing loss over all elements; any float dtype.
pub fn wing_loss(pred: &Tensor, target: &Tensor, w: f64, eps: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_err("wing loss operands", target.dims(), pred.dims()));
    }
    let a = (pred - target)?.abs()?;
    let c = w - w * (1.0 + w / eps).ln();
    let small = ((&a / eps)? + 1.0)?.log()?.affine(w, 0.0)?;
    let large = (&a - c)?;
    let mask = a.lt(w)?;
    Ok(mask.where_cond(&small, &large)?.mean_all()?)
}

/// Row-wise softmax of `(B, K)` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

const CHECKPOINT_MAGIC: &str = "headgaze-checkpoint";

/// Metadata stored next to a checkpoint blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub params: usize,
    pub sha256: String,
    pub config: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NetError + '_ {
    move |e| NetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes all variables as one safetensors blob (names prefixed by part) and a
/// text sidecar with the config echo, parameter count, content hash and seed.
pub fn save_checkpoint(path: &Path, parts: &[(&str, &VarMap)], config_json: &str, seed: u64) -> Result<CheckpointMeta> {
    let mut tensors = HashMap::new();
    let mut params = 0;
    for (prefix, vars) in parts {
        params += param_count(vars);
        let data = vars.data().lock().expect("var map lock");
        for (name, var) in data.iter() {
            tensors.insert(format!("{prefix}.{name}"), var.as_tensor().clone());
        }
    }
    candle_core::safetensors::save(&tensors, path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let meta = CheckpointMeta {
        seed,
        params,
        sha256: hex::encode(Sha256::digest(&bytes)),
        config: config_json.replace('\n', " "),
    };
    let text = format!(
        "{CHECKPOINT_MAGIC} 1\nseed {}\nparams {}\nsha256 {}\nconfig {}\n",
        meta.seed, meta.params, meta.sha256, meta.config
    );
    let side = sidecar_path(path);
    fs::write(&side, text).map_err(io_err(&side))?;
    Ok(meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let mut lines = text.lines();
    if lines.next() != Some(&format!("{CHECKPOINT_MAGIC} 1")) {
        return Err(NetError::Checkpoint(format!("{} is not a checkpoint sidecar", side.display())));
    }
    let mut fields = HashMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once(' ') {
            fields.insert(k, v);
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| NetError::Checkpoint(format!("sidecar lacks `{k}`")));
    let parse = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| NetError::Checkpoint(format!("bad `{k}`"))) };
    Ok(CheckpointMeta {
        seed: parse("seed")?,
        params: parse("params")? as usize,
        sha256: get("sha256")?.to_string(),
        config: get("config")?.to_string(),
    })
}

/// Verifies the content hash and copies stored values into `parts`.
pub fn load_checkpoint(path: &Path, parts: &[(&str, &VarMap)]) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    if hash != meta.sha256 {
        return Err(NetError::Checkpoint(format!("content hash {hash} does not match sidecar {}", meta.sha256)));
    }
    let stored = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    for (prefix, vars) in parts {
        let data = vars.data().lock().expect("var map lock");
        for (name, var) in data.iter() {
            let key = format!("{prefix}.{name}");
            let t = stored.get(&key).ok_or_else(|| NetError::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(shape_err(&key, var.dims(), t.dims()));
            }
            var.set(&t.to_device(var.device())?)?;
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_candle_reference() {
        let dev = Device::Cpu;
        let vars = VarMap::new();
        let conv = Conv2d::new(3, 5, 3, 2, 1, new_builder(&vars, &dev)).unwrap();
        init_vars(&vars, 1).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 9, 11), &dev).unwrap();
        let ours = conv.forward(&x).unwrap();
        // (O, ky, kx, C) -> (O, C, ky, kx)
        let w = conv.weight.reshape((5, 3, 3, 3)).unwrap().permute((0, 3, 1, 2)).unwrap().contiguous().unwrap();
        let reference = x.conv2d(&w, 1, 2, 1, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn max_pool_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1.0, (1, 2, 7, 8), &dev).unwrap();
        let ours = max_pool_3x3_s2(&x).unwrap();
        let reference = x.pad_with_zeros(2, 1, 1).unwrap().pad_with_zeros(3, 1, 1).unwrap().max_pool2d_with_stride(3, 2).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = HgdConfig {
            depth: 10,
            base_width: 4,
            face_size: (16, 16),
            eye_size: (16, 24),
            stem: Stem::Compact,
            ..HgdConfig::default()
        };
        let a = HgdModel::new(&cfg, 3, &Device::Cpu).unwrap();
        let b = HgdModel::new(&cfg, 3, &Device::Cpu).unwrap();
        let c = HgdModel::new(&cfg, 4, &Device::Cpu).unwrap();
        assert_eq!(snapshot(&a.gaze_vars).unwrap(), snapshot(&b.gaze_vars).unwrap());
        assert_ne!(snapshot(&a.gaze_vars).unwrap(), snapshot(&c.gaze_vars).unwrap());
    }
}
