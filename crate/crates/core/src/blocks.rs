//! Architectural building blocks: Conv-BN-SiLU, Go-ELAN aggregation,
//! SPPELAN pooling, ADown downsampling, and the CBLinear/CBFuse pair used by
//! the auxiliary branch.
//!
//! Every block records its operations on a [`Tape`] so the same code serves
//! inference and training. [`Block::apply`] wraps a block as a plain function
//! from one [`FeatureMap`] to another.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{out_dim, Mode, Tape, Var};
use crate::params::{Builder, BufferId, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

/// A batch of feature maps tagged with its downsampling factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array4<T>,
    pub stride: usize,
}

pub const VALID_STRIDES: [usize; 6] = [1, 2, 4, 8, 16, 32];

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array4<T>, stride: usize) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature map needs non-empty channels and spatial dims, got {:?}",
                data.dim()
            )));
        }
        if !VALID_STRIDES.contains(&stride) {
            return Err(Error::Shape(format!(
                "stride {stride} is not one of {VALID_STRIDES:?}"
            )));
        }
        Ok(Self { data, stride })
    }

    pub fn from_elem(shape: (usize, usize, usize, usize), value: T, stride: usize) -> Result<Self> {
        Self::new(Array4::from_elem(shape, value), stride)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    ConvBnAct,
    GoElan,
    Sppelan,
    ADown,
    CbLinear,
    CbFuse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Go-ELAN: one width per computational path. SPPELAN: the hidden width.
    #[serde(default)]
    pub internal_widths: Vec<usize>,
    #[serde(default)]
    pub pool_sizes: Vec<usize>,
}

impl BlockSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::ConvBnAct,
            out_channels,
            kernel,
            stride,
            internal_widths: Vec::new(),
            pool_sizes: Vec::new(),
        }
    }

    pub fn go_elan(out_channels: usize, internal_widths: Vec<usize>) -> Self {
        Self {
            kind: BlockKind::GoElan,
            out_channels,
            kernel: 3,
            stride: 1,
            internal_widths,
            pool_sizes: Vec::new(),
        }
    }

    pub fn sppelan(out_channels: usize, hidden: usize, pool_sizes: Vec<usize>) -> Self {
        Self {
            kind: BlockKind::Sppelan,
            out_channels,
            kernel: 1,
            stride: 1,
            internal_widths: vec![hidden],
            pool_sizes,
        }
    }

    pub fn adown(out_channels: usize) -> Self {
        Self {
            kind: BlockKind::ADown,
            out_channels,
            kernel: 3,
            stride: 2,
            internal_widths: Vec::new(),
            pool_sizes: Vec::new(),
        }
    }

    pub fn validate(&self, block: &str) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::config(block, "out_channels must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(block, format!("kernel {} must be odd", self.kernel)));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::config(block, format!("stride {} must be 1 or 2", self.stride)));
        }
        match self.kind {
            BlockKind::GoElan | BlockKind::Sppelan if self.internal_widths.is_empty() => {
                Err(Error::config(block, "internal_widths must not be empty"))
            }
            _ if self.internal_widths.contains(&0) => {
                Err(Error::config(block, "internal widths must be positive"))
            }
            BlockKind::Sppelan if self.pool_sizes.is_empty() => {
                Err(Error::config(block, "pool_sizes must not be empty"))
            }
            BlockKind::Sppelan if self.pool_sizes.iter().any(|&p| p % 2 == 0) => {
                Err(Error::config(block, "pool windows must be odd"))
            }
            BlockKind::ADown if self.out_channels < 2 => {
                Err(Error::config(block, "ADown needs at least two output channels"))
            }
            _ => Ok(()),
        }
    }

    fn expect_kind(&self, kind: BlockKind, block: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(
                block,
                format!("expected a {kind:?} spec, got {:?}", self.kind),
            ));
        }
        self.validate(block)
    }
}

/// Multiply-accumulate counted as two FLOPs.
pub fn conv_flops(kernel: usize, in_ch: usize, out_ch: usize, out_h: usize, out_w: usize) -> f64 {
    2.0 * (kernel * kernel * in_ch) as f64 * out_ch as f64 * (out_h * out_w) as f64
}

pub trait Block<T: Scalar> {
    fn name(&self) -> &str;
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Spatial downsampling factor (1 or 2).
    fn stride(&self) -> usize;
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
    /// Convolution FLOPs for an input of the given spatial size.
    fn flops(&self, h: usize, w: usize) -> f64;

    fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride()), w.div_ceil(self.stride()))
    }

    fn apply(&self, store: &ParamStore<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let mut tape = Tape::new(store, mode);
        let xi = tape.input(x.data.clone());
        let y = self.forward(&mut tape, xi)?;
        let data = tape.value(y).clone();
        FeatureMap::new(data, x.stride * self.stride())
    }
}

/// Plain convolution with bias, no normalization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: ParamId,
    bias: Option<ParamId>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = b.uniform("weight", &[out_ch, in_ch, kernel, kernel], fan_in, ParamKind::ConvWeight);
        let bias = bias.then(|| b.uniform("bias", &[out_ch], fan_in, ParamKind::Bias));
        Self {
            name: b.prefix().to_string(),
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }
}

impl<T: Scalar> Block<T> for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }
    fn in_channels(&self) -> usize {
        self.in_ch
    }
    fn out_channels(&self) -> usize {
        self.out_ch
    }
    fn stride(&self) -> usize {
        1
    }
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv(x, self.weight, self.bias, 1, &self.name)
    }
    fn flops(&self, h: usize, w: usize) -> f64 {
        conv_flops(self.kernel, self.in_ch, self.out_ch, h, w)
    }
}

/// Convolution, batch normalization, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    name: String,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, spec: &BlockSpec) -> Result<Self> {
        let name = b.prefix().to_string();
        spec.expect_kind(BlockKind::ConvBnAct, &name)?;
        if in_ch == 0 {
            return Err(Error::config(&name, "input width must be positive"));
        }
        let (out_ch, kernel) = (spec.out_channels, spec.kernel);
        let weight = b.uniform(
            "conv.weight",
            &[out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
            ParamKind::ConvWeight,
        );
        let gamma = b.constant("bn.weight", &[out_ch], 1.0, ParamKind::NormScale);
        let beta = b.constant("bn.bias", &[out_ch], 0.0, ParamKind::NormShift);
        let running_mean = b.buffer("bn.running_mean", &[out_ch], 0.0);
        let running_var = b.buffer("bn.running_var", &[out_ch], 1.0);
        Ok(Self {
            name,
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
            in_ch,
            out_ch,
            kernel,
            stride: spec.stride,
        })
    }

    fn simple<T: Scalar>(b: &mut Builder<T>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(b, in_ch, &BlockSpec::conv(out_ch, kernel, stride))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }
}

impl<T: Scalar> Block<T> for ConvBnAct {
    fn name(&self) -> &str {
        &self.name
    }
    fn in_channels(&self) -> usize {
        self.in_ch
    }
    fn out_channels(&self) -> usize {
        self.out_ch
    }
    fn stride(&self) -> usize {
        self.stride
    }
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.conv(x, self.weight, None, self.stride, &self.name)?;
        let n = tape.batch_norm(c, self.gamma, self.beta, self.running_mean, self.running_var);
        Ok(tape.silu(n))
    }
    fn flops(&self, h: usize, w: usize) -> f64 {
        let (ho, wo) = <Self as Block<T>>::output_size(self, h, w);
        conv_flops(self.kernel, self.in_ch, self.out_ch, ho, wo)
    }
}

/// Go-ELAN aggregation: the input is split channel-wise; the first half
/// bypasses, the second runs through a chain of computational paths (two
/// 3x3 Conv-BN-SiLU each). The bypass half and every path output are
/// concatenated and fused by a 1x1 transition.
#[derive(Clone, Debug)]
pub struct GoElan {
    name: String,
    in_ch: usize,
    bypass: usize,
    paths: Vec<(ConvBnAct, ConvBnAct)>,
    transition: ConvBnAct,
}

impl GoElan {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, spec: &BlockSpec) -> Result<Self> {
        let name = b.prefix().to_string();
        spec.expect_kind(BlockKind::GoElan, &name)?;
        if in_ch < 2 {
            return Err(Error::config(&name, "Go-ELAN needs at least two input channels to split"));
        }
        let bypass = in_ch / 2;
        let mut prev = in_ch - bypass;
        let mut paths = Vec::with_capacity(spec.internal_widths.len());
        for (i, &w) in spec.internal_widths.iter().enumerate() {
            let mut pb = b.scope(&format!("path{i}"));
            let first = ConvBnAct::simple(&mut pb.scope("0"), prev, w, 3, 1)?;
            let second = ConvBnAct::simple(&mut pb.scope("1"), w, w, 3, 1)?;
            paths.push((first, second));
            prev = w;
        }
        let transition = ConvBnAct::simple(
            &mut b.scope("transition"),
            Self::concat_width_for(in_ch, &spec.internal_widths),
            spec.out_channels,
            1,
            1,
        )?;
        Ok(Self {
            name,
            in_ch,
            bypass,
            paths,
            transition,
        })
    }

    /// Width entering the transition convolution.
    pub fn concat_width_for(in_ch: usize, widths: &[usize]) -> usize {
        in_ch / 2 + widths.iter().sum::<usize>()
    }

    pub fn concat_width(&self) -> usize {
        self.bypass + self.paths.iter().map(|(_, s)| s.out_ch()).sum::<usize>()
    }
}

impl<T: Scalar> Block<T> for GoElan {
    fn name(&self) -> &str {
        &self.name
    }
    fn in_channels(&self) -> usize {
        self.in_ch
    }
    fn out_channels(&self) -> usize {
        self.transition.out_ch()
    }
    fn stride(&self) -> usize {
        1
    }
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.channels(x) != self.in_ch {
            return Err(Error::config(
                &self.name,
                format!("input has {} channels but the block expects {}", tape.channels(x), self.in_ch),
            ));
        }
        let bypass = tape.slice_channels(x, 0, self.bypass)?;
        let mut h = tape.slice_channels(x, self.bypass, self.in_ch - self.bypass)?;
        let mut parts = vec![bypass];
        for (first, second) in &self.paths {
            h = first.forward(tape, h)?;
            h = second.forward(tape, h)?;
            parts.push(h);
        }
        let cat = tape.concat(&parts)?;
        self.transition.forward(tape, cat)
    }
    fn flops(&self, h: usize, w: usize) -> f64 {
        let paths: f64 = self
            .paths
            .iter()
            .map(|(a, b)| <ConvBnAct as Block<T>>::flops(a, h, w) + <ConvBnAct as Block<T>>::flops(b, h, w))
            .sum();
        paths + <ConvBnAct as Block<T>>::flops(&self.transition, h, w)
    }
}

/// Spatial pyramid pooling: 1x1 reduction, a cascade of stride-1 max pools,
/// concatenation of the reduced map with every pooled map, 1x1 fusion.
#[derive(Clone, Debug)]
pub struct Sppelan {
    name: String,
    reduce: ConvBnAct,
    pools: Vec<usize>,
    fuse: ConvBnAct,
}

impl Sppelan {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, spec: &BlockSpec) -> Result<Self> {
        let name = b.prefix().to_string();
        spec.expect_kind(BlockKind::Sppelan, &name)?;
        let hidden = spec.internal_widths[0];
        let reduce = ConvBnAct::simple(&mut b.scope("reduce"), in_ch, hidden, 1, 1)?;
        let fuse = ConvBnAct::simple(
            &mut b.scope("fuse"),
            hidden * (spec.pool_sizes.len() + 1),
            spec.out_channels,
            1,
            1,
        )?;
        Ok(Self {
            name,
            reduce,
            pools: spec.pool_sizes.clone(),
            fuse,
        })
    }

    pub fn max_pool(&self) -> usize {
        self.pools.iter().copied().max().unwrap_or(1)
    }
}

impl<T: Scalar> Block<T> for Sppelan {
    fn name(&self) -> &str {
        &self.name
    }
    fn in_channels(&self) -> usize {
        self.reduce.in_ch()
    }
    fn out_channels(&self) -> usize {
        self.fuse.out_ch()
    }
    fn stride(&self) -> usize {
        1
    }
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (h, w) = tape.spatial(x);
        if h.min(w) < self.max_pool() {
            return Err(Error::config(
                &self.name,
                format!("pool window {} exceeds the {h}x{w} feature map", self.max_pool()),
            ));
        }
        let mut y = self.reduce.forward(tape, x)?;
        let mut parts = vec![y];
        for &k in &self.pools {
            y = tape.max_pool_same(y, k);
            parts.push(y);
        }
        let cat = tape.concat(&parts)?;
        self.fuse.forward(tape, cat)
    }
    fn flops(&self, h: usize, w: usize) -> f64 {
        <ConvBnAct as Block<T>>::flops(&self.reduce, h, w) + <ConvBnAct as Block<T>>::flops(&self.fuse, h, w)
    }
}

/// Average-convolution downsampling. The first channel half goes through a
/// 3x3/2 average pool and a 1x1 Conv-BN-SiLU, the second through a 3x3
/// stride-2 Conv-BN-SiLU; the halves are concatenated.
#[derive(Clone, Debug)]
pub struct ADown {
    name: String,
    in_ch: usize,
    split: usize,
    pooled: ConvBnAct,
    strided: ConvBnAct,
}

impl ADown {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, spec: &BlockSpec) -> Result<Self> {
        let name = b.prefix().to_string();
        spec.expect_kind(BlockKind::ADown, &name)?;
        if in_ch < 2 {
            return Err(Error::config(&name, "ADown needs at least two input channels"));
        }
        let split = in_ch / 2;
        let out_a = spec.out_channels / 2;
        let pooled = ConvBnAct::simple(&mut b.scope("pooled"), split, out_a, 1, 1)?;
        let strided = ConvBnAct::simple(&mut b.scope("strided"), in_ch - split, spec.out_channels - out_a, 3, 2)?;
        Ok(Self {
            name,
            in_ch,
            split,
            pooled,
            strided,
        })
    }
}

impl<T: Scalar> Block<T> for ADown {
    fn name(&self) -> &str {
        &self.name
    }
    fn in_channels(&self) -> usize {
        self.in_ch
    }
    fn out_channels(&self) -> usize {
        self.pooled.out_ch() + self.strided.out_ch()
    }
    fn stride(&self) -> usize {
        2
    }
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (h, w) = tape.spatial(x);
        if h < 2 || w < 2 {
            return Err(Error::Degenerate(format!(
                "{}: cannot downsample a {h}x{w} feature map",
                self.name
            )));
        }
        if tape.channels(x) != self.in_ch {
            return Err(Error::config(
                &self.name,
                format!("input has {} channels but the block expects {}", tape.channels(x), self.in_ch),
            ));
        }
        let a = tape.slice_channels(x, 0, self.split)?;
        let b = tape.slice_channels(x, self.split, self.in_ch - self.split)?;
        let a = tape.avg_pool(a, 3, 2, 1);
        let a = self.pooled.forward(tape, a)?;
        let b = self.strided.forward(tape, b)?;
        tape.concat(&[a, b])
    }
    fn flops(&self, h: usize, w: usize) -> f64 {
        let (ho, wo) = (out_dim(h, 3, 2, 1), out_dim(w, 3, 2, 1));
        <ConvBnAct as Block<T>>::flops(&self.pooled, ho, wo) + <ConvBnAct as Block<T>>::flops(&self.strided, h, w)
    }
}

/// One 1x1 projection producing several widths at once.
#[derive(Clone, Debug)]
pub struct CbLinear {
    name: String,
    proj: Conv2d,
    widths: Vec<usize>,
}

impl CbLinear {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, widths: &[usize]) -> Result<Self> {
        let name = b.prefix().to_string();
        if widths.is_empty() {
            return Err(Error::config(&name, "CBLinear needs at least one output width"));
        }
        if widths.contains(&0) {
            return Err(Error::config(&name, "CBLinear widths must be positive"));
        }
        let proj = Conv2d::new(b, in_ch, widths.iter().sum(), 1, true);
        Ok(Self {
            name,
            proj,
            widths: widths.to_vec(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        if tape.channels(x) != self.proj.in_ch {
            return Err(Error::config(
                &self.name,
                format!("input has {} channels but the block expects {}", tape.channels(x), self.proj.in_ch),
            ));
        }
        let y = <Conv2d as Block<T>>::forward(&self.proj, tape, x)?;
        let mut out = Vec::with_capacity(self.widths.len());
        let mut start = 0;
        for &w in &self.widths {
            out.push(tape.slice_channels(y, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xi = tape.input(x.data.clone());
        self.forward(&mut tape, xi)?
            .into_iter()
            .map(|v| FeatureMap::new(tape.value(v).clone(), x.stride))
            .collect()
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        <Conv2d as Block<f64>>::flops(&self.proj, h, w)
    }
}

/// Resample every feature to the target's spatial size (nearest neighbour)
/// and add them all to the target.
pub fn cb_fuse_vars<T: Scalar>(tape: &mut Tape<T>, features: &[Var], target: Var) -> Result<Var> {
    let (h, w) = tape.spatial(target);
    let tc = tape.channels(target);
    let mut acc = target;
    for (i, &f) in features.iter().enumerate() {
        if tape.channels(f) != tc {
            return Err(Error::config(
                "cb_fuse",
                format!("feature {i} has {} channels, target has {tc}", tape.channels(f)),
            ));
        }
        let r = tape.resize_nearest(f, h, w);
        acc = tape.add(acc, r)?;
    }
    Ok(acc)
}

pub fn cb_fuse<T: Scalar>(features: &[FeatureMap<T>], target: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let t = tape.input(target.data.clone());
    let vars: Vec<Var> = features.iter().map(|f| tape.input(f.data.clone())).collect();
    let y = cb_fuse_vars(&mut tape, &vars, t)?;
    FeatureMap::new(tape.value(y).clone(), target.stride)
}
