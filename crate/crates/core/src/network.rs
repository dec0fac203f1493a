//! Backbone, PAN neck, detection heads and the auxiliary (PGI) branch.
//!
//! Layout of the graph built by [`Model::build`]:
//!
//! ```text
//! P1/2  ConvBnAct 3x3/2
//! P2/4  ConvBnAct 3x3/2 -> Go-ELAN
//! P3/8  ADown -> Go-ELAN ............................ tap P3
//! P4/16 ADown -> Go-ELAN ............................ tap P4
//! P5/32 ADown -> SPPELAN ............................ tap P5
//! neck  top-down:  up(P5)+P4 -> Go-ELAN (N4), up(N4)+P3 -> Go-ELAN (N3)
//!       bottom-up: ADown(N3)+N4 -> Go-ELAN (M4), ADown(M4)+P5 -> Go-ELAN (M5)
//! heads N3 (stride 8), M4 (16), M5 (32)
//! aux   CBLinear on P3/P4/P5 -> CBFuse per stride -> Go-ELAN -> aux heads
//! ```
//!
//! The auxiliary branch only consumes backbone taps, so inference never
//! touches it and [`Model::strip_auxiliary`] can drop it without changing
//! the main predictions.

use std::time::Instant;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{cb_fuse_vars, ADown, Block, BlockSpec, CbLinear, Conv2d, ConvBnAct, GoElan, Sppelan};
use crate::error::{Error, Result};
use crate::graph::{Mode, Tape, Var};
use crate::params::{Branch, Builder, ParamKind, ParamStore};
use crate::scalar::Scalar;

pub const HEAD_STRIDES: [usize; 3] = [8, 16, 32];
/// Channels per cell before the class logits: box (4) + objectness (1).
pub const BOX_CHANNELS: usize = 4;
pub const OBJ_CHANNEL: usize = 4;
pub const CLASS_OFFSET: usize = 5;
pub const DFL_BINS: usize = 16;
/// Prior objectness probability used to initialise the head bias.
const OBJ_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthPreset {
    Full,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub out: usize,
    pub paths: Vec<usize>,
}

impl StagePlan {
    fn new(out: usize, paths: &[usize]) -> Self {
        Self {
            out,
            paths: paths.to_vec(),
        }
    }

    fn spec(&self) -> BlockSpec {
        BlockSpec::go_elan(self.out, self.paths.clone())
    }

    fn divided(&self, d: usize) -> Self {
        Self {
            out: self.out / d,
            paths: self.paths.iter().map(|w| w / d).collect(),
        }
    }
}

/// Per-stage widths of the whole network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub p1: usize,
    pub p2: usize,
    pub elan2: StagePlan,
    pub down3: usize,
    pub elan3: StagePlan,
    pub down4: usize,
    pub elan4: StagePlan,
    pub down5: usize,
    pub sppelan_out: usize,
    pub sppelan_hidden: usize,
    pub pool_sizes: Vec<usize>,
    pub neck_td4: StagePlan,
    pub neck_td3: StagePlan,
    pub neck_bu4: StagePlan,
    pub neck_bu5: StagePlan,
    pub head_hidden: usize,
    pub aux3: Vec<usize>,
    pub aux4: Vec<usize>,
    pub aux5: Vec<usize>,
}

impl ChannelPlan {
    /// 512-wide P1/P2 downsampling; sized to the reported 50.9M-parameter,
    /// 237-GFLOP budget (auxiliary branch included).
    pub fn full() -> Self {
        Self {
            p1: 512,
            p2: 512,
            elan2: StagePlan::new(128, &[32, 32]),
            down3: 256,
            elan3: StagePlan::new(256, &[128, 128]),
            down4: 512,
            elan4: StagePlan::new(512, &[256, 256]),
            down5: 1024,
            sppelan_out: 1024,
            sppelan_hidden: 512,
            pool_sizes: vec![5, 5, 5],
            neck_td4: StagePlan::new(512, &[256, 256]),
            neck_td3: StagePlan::new(256, &[64, 64]),
            neck_bu4: StagePlan::new(512, &[256, 256]),
            neck_bu5: StagePlan::new(1024, &[512, 512]),
            head_hidden: 128,
            aux3: vec![64, 64],
            aux4: vec![256, 256],
            aux5: vec![512, 512],
        }
    }

    /// Full topology with every width divided by 16. Pool windows shrink to
    /// the largest odd size that fits the stride-32 map of `input_size`.
    pub fn toy(input_size: usize) -> Self {
        let f = Self::full();
        let d = 16;
        let p5 = (input_size / 32).max(1);
        let pool = if p5 >= 5 { 5 } else if p5 % 2 == 1 { p5 } else { p5 - 1 };
        Self {
            p1: f.p1 / d,
            p2: f.p2 / d,
            elan2: f.elan2.divided(d),
            down3: f.down3 / d,
            elan3: f.elan3.divided(d),
            down4: f.down4 / d,
            elan4: f.elan4.divided(d),
            down5: f.down5 / d,
            sppelan_out: f.sppelan_out / d,
            sppelan_hidden: f.sppelan_hidden / d,
            pool_sizes: vec![pool.max(1); 3],
            neck_td4: f.neck_td4.divided(d),
            neck_td3: f.neck_td3.divided(d),
            neck_bu4: f.neck_bu4.divided(d),
            neck_bu5: f.neck_bu5.divided(d),
            head_hidden: f.head_hidden / d,
            aux3: f.aux3.iter().map(|w| w / d).collect(),
            aux4: f.aux4.iter().map(|w| w / d).collect(),
            aux5: f.aux5.iter().map(|w| w / d).collect(),
        }
    }
}

/// Loss weights and constants; see [`crate::loss`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub box_weight: f64,
    pub cls_weight: f64,
    pub obj_weight: f64,
    pub dfl_weight: f64,
    pub dfl: bool,
    /// Deep-supervision weight of the auxiliary predictions at strides 8/16/32.
    pub aux_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            box_weight: 1.0,
            cls_weight: 1.0,
            obj_weight: 1.0,
            dfl_weight: 1.0,
            dfl: false,
            aux_weights: vec![0.25; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class_count: usize,
    pub input_size: usize,
    pub width_preset: WidthPreset,
    pub channel_plan: ChannelPlan,
    pub head_strides: Vec<usize>,
    pub aux_enabled: bool,
    /// Regularization coefficient of the optimized ELAN (0.01); the optimizer
    /// uses it only when `train.weight_decay_from_model` is set.
    pub reg_weight: f64,
    pub label_smoothing: f64,
    pub loss: LossConfig,
    pub nms_iou: f64,
    pub conf_thresh: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn full(class_count: usize) -> Self {
        Self::with_plan(class_count, 640, WidthPreset::Full, ChannelPlan::full())
    }

    pub fn toy(class_count: usize, input_size: usize) -> Self {
        Self::with_plan(class_count, input_size, WidthPreset::Toy, ChannelPlan::toy(input_size))
    }

    pub fn preset(preset: WidthPreset, class_count: usize, input_size: usize) -> Self {
        match preset {
            WidthPreset::Full => Self {
                input_size,
                ..Self::full(class_count)
            },
            WidthPreset::Toy => Self::toy(class_count, input_size),
        }
    }

    fn with_plan(class_count: usize, input_size: usize, width_preset: WidthPreset, channel_plan: ChannelPlan) -> Self {
        Self {
            class_count,
            input_size,
            width_preset,
            channel_plan,
            head_strides: HEAD_STRIDES.to_vec(),
            aux_enabled: true,
            reg_weight: 0.01,
            label_smoothing: 0.1,
            loss: LossConfig::default(),
            nms_iou: 0.45,
            conf_thresh: 0.25,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config("model config", m));
        if self.class_count == 0 {
            return bad("class_count must be at least 1".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} must lie in [0, 1)", self.label_smoothing));
        }
        if self.reg_weight < 0.0 {
            return bad("reg_weight must be non-negative".into());
        }
        if self.head_strides != HEAD_STRIDES {
            return bad(format!("head_strides must be {HEAD_STRIDES:?}"));
        }
        if self.loss.aux_weights.len() != HEAD_STRIDES.len() {
            return bad("loss.aux_weights needs one weight per head stride".into());
        }
        if !(self.loss.focal_alpha > 0.0 && self.loss.focal_alpha <= 1.0) || self.loss.focal_gamma < 0.0 {
            return bad("focal alpha must lie in (0, 1] and gamma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad("conf_thresh must lie in [0, 1] and nms_iou in (0, 1]".into());
        }
        let p5 = self.input_size / 32;
        let max_pool = self.channel_plan.pool_sizes.iter().copied().max().unwrap_or(1);
        if max_pool > p5 {
            return Err(Error::config(
                "backbone.sppelan",
                format!("pool window {max_pool} exceeds the {p5}x{p5} stride-32 map of a {} input", self.input_size),
            ));
        }
        Ok(())
    }

    /// Channels per cell of every head output.
    pub fn prediction_channels(&self) -> usize {
        CLASS_OFFSET + self.class_count + if self.loss.dfl { 4 * DFL_BINS } else { 0 }
    }

    pub fn dfl_bins(&self) -> usize {
        if self.loss.dfl {
            DFL_BINS
        } else {
            0
        }
    }
}

/// Head output of one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput<T> {
    pub stride: usize,
    /// `(batch, 5 + C [+ 4 * bins], H, W)`; channels are box (tx, ty, tw, th),
    /// objectness logit, class logits, then optional distance-bin logits.
    pub data: Array4<T>,
}

/// Raw head outputs, one entry per head stride (anchors per cell = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T> {
    pub scales: Vec<ScaleOutput<T>>,
    pub class_count: usize,
    pub dfl_bins: usize,
}

impl<T: Scalar> RawPrediction<T> {
    pub fn empty(class_count: usize, dfl_bins: usize) -> Self {
        Self {
            scales: Vec::new(),
            class_count,
            dfl_bins,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.scales.first().map_or(0, |s| s.data.dim().0)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.scales
            .iter()
            .zip(&other.scales)
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()).map(|(x, y)| (*x - *y).abs().f64()))
            .fold(0.0, f64::max)
    }
}

/// Two 3x3 Conv-BN-SiLU layers and a 1x1 prediction convolution.
#[derive(Clone, Debug)]
pub struct Head {
    stem: [ConvBnAct; 2],
    pred: Conv2d,
}

impl Head {
    fn new<T: Scalar>(b: &mut Builder<T>, in_ch: usize, hidden: usize, cfg: &ModelConfig) -> Result<Self> {
        let s0 = ConvBnAct::new(&mut b.scope("stem0"), in_ch, &BlockSpec::conv(hidden, 3, 1))?;
        let s1 = ConvBnAct::new(&mut b.scope("stem1"), hidden, &BlockSpec::conv(hidden, 3, 1))?;
        let pred = Conv2d::new(&mut b.scope("pred"), hidden, cfg.prediction_channels(), 1, true);
        Ok(Self { stem: [s0, s1], pred })
    }

    fn init_bias<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let Some(b) = self.pred.bias() {
            let bias = &mut store.param_mut(b).value;
            bias.fill(T::zero());
            bias.as_slice_mut().expect("contiguous bias")[OBJ_CHANNEL] = T::of((OBJ_PRIOR / (1.0 - OBJ_PRIOR)).ln());
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.stem[0].forward(tape, x)?;
        let h = self.stem[1].forward(tape, h)?;
        <Conv2d as Block<T>>::forward(&self.pred, tape, h)
    }

    fn flops(&self, h: usize, w: usize) -> f64 {
        <ConvBnAct as Block<f64>>::flops(&self.stem[0], h, w)
            + <ConvBnAct as Block<f64>>::flops(&self.stem[1], h, w)
            + <Conv2d as Block<f64>>::flops(&self.pred, h, w)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    p1: ConvBnAct,
    p2: ConvBnAct,
    elan2: GoElan,
    down3: ADown,
    elan3: GoElan,
    down4: ADown,
    elan4: GoElan,
    down5: ADown,
    sppelan: Sppelan,
}

#[derive(Clone, Debug)]
struct Neck {
    td4: GoElan,
    td3: GoElan,
    down3: ADown,
    bu4: GoElan,
    down4: ADown,
    bu5: GoElan,
}

#[derive(Clone, Debug)]
struct AuxBranch {
    tap3: CbLinear,
    tap4: CbLinear,
    tap5: CbLinear,
    elan3: GoElan,
    elan4: GoElan,
    elan5: GoElan,
    heads: Vec<Head>,
}

/// Backbone taps at strides 8/16/32.
struct Taps {
    p3: Var,
    p4: Var,
    p5: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    neck: Neck,
    heads: Vec<Head>,
    aux: Option<AuxBranch>,
}

/// A recorded forward pass, ready for [`Tape::backward`].
pub struct ForwardPass<'a, T: Scalar> {
    pub tape: Tape<'a, T>,
    pub main: Vec<Var>,
    pub aux: Vec<Var>,
}

impl<T: Scalar> ForwardPass<'_, T> {
    fn collect(&self, vars: &[Var], cfg: &ModelConfig) -> RawPrediction<T> {
        RawPrediction {
            scales: vars
                .iter()
                .zip(HEAD_STRIDES)
                .map(|(&v, stride)| ScaleOutput {
                    stride,
                    data: self.tape.value(v).clone(),
                })
                .collect(),
            class_count: cfg.class_count,
            dfl_bins: cfg.dfl_bins(),
        }
    }

    pub fn main_prediction(&self, cfg: &ModelConfig) -> RawPrediction<T> {
        self.collect(&self.main, cfg)
    }

    pub fn aux_prediction(&self, cfg: &ModelConfig) -> RawPrediction<T> {
        self.collect(&self.aux, cfg)
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = &config.channel_plan;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut root = Builder::new(&mut store, &mut rng);

        let backbone = {
            let mut b = root.scope("backbone");
            let p1 = ConvBnAct::new(&mut b.scope("p1"), 3, &BlockSpec::conv(plan.p1, 3, 2))?;
            let p2 = ConvBnAct::new(&mut b.scope("p2"), plan.p1, &BlockSpec::conv(plan.p2, 3, 2))?;
            let elan2 = GoElan::new(&mut b.scope("elan2"), plan.p2, &plan.elan2.spec())?;
            let down3 = ADown::new(&mut b.scope("down3"), plan.elan2.out, &BlockSpec::adown(plan.down3))?;
            let elan3 = GoElan::new(&mut b.scope("elan3"), plan.down3, &plan.elan3.spec())?;
            let down4 = ADown::new(&mut b.scope("down4"), plan.elan3.out, &BlockSpec::adown(plan.down4))?;
            let elan4 = GoElan::new(&mut b.scope("elan4"), plan.down4, &plan.elan4.spec())?;
            let down5 = ADown::new(&mut b.scope("down5"), plan.elan4.out, &BlockSpec::adown(plan.down5))?;
            let sppelan = Sppelan::new(
                &mut b.scope("sppelan"),
                plan.down5,
                &BlockSpec::sppelan(plan.sppelan_out, plan.sppelan_hidden, plan.pool_sizes.clone()),
            )?;
            Backbone {
                p1,
                p2,
                elan2,
                down3,
                elan3,
                down4,
                elan4,
                down5,
                sppelan,
            }
        };
        let (c3, c4, c5) = (plan.elan3.out, plan.elan4.out, plan.sppelan_out);

        let neck = {
            let mut b = root.scope("neck");
            let td4 = GoElan::new(&mut b.scope("td4"), c5 + c4, &plan.neck_td4.spec())?;
            let td3 = GoElan::new(&mut b.scope("td3"), plan.neck_td4.out + c3, &plan.neck_td3.spec())?;
            let n3 = plan.neck_td3.out;
            let down3 = ADown::new(&mut b.scope("down3"), n3, &BlockSpec::adown(n3))?;
            let bu4 = GoElan::new(&mut b.scope("bu4"), n3 + plan.neck_td4.out, &plan.neck_bu4.spec())?;
            let m4 = plan.neck_bu4.out;
            let down4 = ADown::new(&mut b.scope("down4"), m4, &BlockSpec::adown(m4))?;
            let bu5 = GoElan::new(&mut b.scope("bu5"), m4 + c5, &plan.neck_bu5.spec())?;
            Neck {
                td4,
                td3,
                down3,
                bu4,
                down4,
                bu5,
            }
        };
        let head_in = [plan.neck_td3.out, plan.neck_bu4.out, plan.neck_bu5.out];

        let heads = {
            let mut b = root.scope("head");
            head_in
                .iter()
                .zip(HEAD_STRIDES)
                .map(|(&c, s)| Head::new(&mut b.scope(&format!("s{s}")), c, plan.head_hidden, &config))
                .collect::<Result<Vec<_>>>()?
        };

        let aux = if config.aux_enabled {
            let mut ab = root.with_branch(Branch::Auxiliary);
            let mut b = ab.scope("aux");
            let [a3, a4, a5] = head_in;
            let tap3 = CbLinear::new(&mut b.scope("tap3"), c3, &[a3])?;
            let tap4 = CbLinear::new(&mut b.scope("tap4"), c4, &[a3, a4])?;
            let tap5 = CbLinear::new(&mut b.scope("tap5"), c5, &[a3, a4, a5])?;
            let elan3 = GoElan::new(&mut b.scope("elan3"), a3, &BlockSpec::go_elan(a3, plan.aux3.clone()))?;
            let elan4 = GoElan::new(&mut b.scope("elan4"), a4, &BlockSpec::go_elan(a4, plan.aux4.clone()))?;
            let elan5 = GoElan::new(&mut b.scope("elan5"), a5, &BlockSpec::go_elan(a5, plan.aux5.clone()))?;
            let heads = {
                let mut hb = b.scope("head");
                head_in
                    .iter()
                    .zip(HEAD_STRIDES)
                    .map(|(&c, s)| Head::new(&mut hb.scope(&format!("s{s}")), c, plan.head_hidden, &config))
                    .collect::<Result<Vec<_>>>()?
            };
            Some(AuxBranch {
                tap3,
                tap4,
                tap5,
                elan3,
                elan4,
                elan5,
                heads,
            })
        } else {
            None
        };

        let mut model = Self {
            config,
            store,
            backbone,
            neck,
            heads,
            aux,
        };
        for head in model.heads.iter().chain(model.aux.iter().flat_map(|a| a.heads.iter())) {
            head.init_bias(&mut model.store);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_input(&self, images: &Array4<T>) -> Result<()> {
        let s = self.config.input_size;
        let (b, c, h, w) = images.dim();
        if b == 0 || c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}) with B >= 1, got ({b}, {c}, {h}, {w})"
            )));
        }
        Ok(())
    }

    fn backbone(&self, tape: &mut Tape<T>, x: Var) -> Result<Taps> {
        let bb = &self.backbone;
        let x = bb.p1.forward(tape, x)?;
        let x = bb.p2.forward(tape, x)?;
        let x = bb.elan2.forward(tape, x)?;
        let x = bb.down3.forward(tape, x)?;
        let p3 = bb.elan3.forward(tape, x)?;
        let x = bb.down4.forward(tape, p3)?;
        let p4 = bb.elan4.forward(tape, x)?;
        let x = bb.down5.forward(tape, p4)?;
        let p5 = bb.sppelan.forward(tape, x)?;
        Ok(Taps { p3, p4, p5 })
    }

    fn neck_and_heads(&self, tape: &mut Tape<T>, taps: &Taps) -> Result<Vec<Var>> {
        let n = &self.neck;
        let (h4, w4) = tape.spatial(taps.p4);
        let up5 = tape.resize_nearest(taps.p5, h4, w4);
        let cat = tape.concat(&[up5, taps.p4])?;
        let n4 = n.td4.forward(tape, cat)?;
        let (h3, w3) = tape.spatial(taps.p3);
        let up4 = tape.resize_nearest(n4, h3, w3);
        let cat = tape.concat(&[up4, taps.p3])?;
        let n3 = n.td3.forward(tape, cat)?;
        let d3 = n.down3.forward(tape, n3)?;
        let cat = tape.concat(&[d3, n4])?;
        let m4 = n.bu4.forward(tape, cat)?;
        let d4 = n.down4.forward(tape, m4)?;
        let cat = tape.concat(&[d4, taps.p5])?;
        let m5 = n.bu5.forward(tape, cat)?;
        [n3, m4, m5]
            .iter()
            .zip(&self.heads)
            .map(|(&f, h)| h.forward(tape, f))
            .collect()
    }

    fn aux_heads(&self, aux: &AuxBranch, tape: &mut Tape<T>, taps: &Taps) -> Result<Vec<Var>> {
        let t3 = aux.tap3.forward(tape, taps.p3)?;
        let t4 = aux.tap4.forward(tape, taps.p4)?;
        let t5 = aux.tap5.forward(tape, taps.p5)?;
        let f3 = cb_fuse_vars(tape, &[t4[0], t5[0]], t3[0])?;
        let f4 = cb_fuse_vars(tape, &[t5[1]], t4[1])?;
        let f5 = cb_fuse_vars(tape, &[], t5[2])?;
        let g3 = aux.elan3.forward(tape, f3)?;
        let g4 = aux.elan4.forward(tape, f4)?;
        let g5 = aux.elan5.forward(tape, f5)?;
        [g3, g4, g5]
            .iter()
            .zip(&aux.heads)
            .map(|(&f, h)| h.forward(tape, f))
            .collect()
    }

    /// Record a forward pass. Auxiliary outputs are produced only when
    /// `with_aux` is set and the model has an auxiliary branch.
    pub fn forward_graph(&self, images: Array4<T>, mode: Mode, with_aux: bool) -> Result<ForwardPass<'_, T>> {
        self.check_input(&images)?;
        let mut tape = Tape::new(&self.store, mode);
        let x = tape.input(images);
        let taps = self.backbone(&mut tape, x)?;
        let main = self.neck_and_heads(&mut tape, &taps)?;
        let aux = match (&self.aux, with_aux) {
            (Some(a), true) => self.aux_heads(a, &mut tape, &taps)?,
            _ => Vec::new(),
        };
        Ok(ForwardPass { tape, main, aux })
    }

    /// Main and auxiliary predictions. The auxiliary set is empty when the
    /// branch is disabled.
    pub fn forward_train(&self, images: &Array4<T>, mode: Mode) -> Result<(RawPrediction<T>, RawPrediction<T>)> {
        let pass = self.forward_graph(images.clone(), mode, true)?;
        Ok((pass.main_prediction(&self.config), pass.aux_prediction(&self.config)))
    }

    /// Main-branch predictions with running normalization statistics.
    pub fn forward_infer(&self, images: &Array4<T>) -> Result<RawPrediction<T>> {
        let started = Instant::now();
        let pass = self.forward_graph(images.clone(), Mode::Eval, false)?;
        log::debug!(
            "inference on {} image(s) took {:.1} ms",
            images.dim().0,
            started.elapsed().as_secs_f64() * 1e3
        );
        Ok(pass.main_prediction(&self.config))
    }

    /// Copy of the model without the auxiliary branch. Main-branch weights
    /// and statistics are carried over by name, so inference is unchanged.
    pub fn strip_auxiliary(&self) -> Result<Self> {
        let mut config = self.config.clone();
        config.aux_enabled = false;
        let mut stripped = Self::build(config)?;
        stripped.copy_from(self)?;
        Ok(stripped)
    }

    /// Overwrite every parameter and buffer of `self` with the same-named
    /// tensor of `other`.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        for p in self.store.params_mut() {
            let src = other
                .store
                .param_id(&p.name)
                .map(|id| other.store.param(id))
                .ok_or_else(|| Error::Shape(format!("parameter {} missing from source model", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("parameter {} changed shape", p.name)));
            }
            p.value.assign(&src.value);
        }
        for b in self.store.buffers_mut() {
            let src = other
                .store
                .buffer_id(&b.name)
                .map(|id| other.store.buffer(id))
                .ok_or_else(|| Error::Shape(format!("buffer {} missing from source model", b.name)))?;
            b.value.assign(&src.value);
        }
        Ok(())
    }

    /// Spatial size of each head output for a square input of side `input_size`.
    pub fn head_shapes(&self, input_size: usize) -> Vec<(usize, usize)> {
        HEAD_STRIDES
            .iter()
            .map(|s| (input_size.div_ceil(*s), input_size.div_ceil(*s)))
            .collect()
    }

    /// Convolution FLOPs of one forward pass over every branch the model
    /// contains, counting a multiply-accumulate as two FLOPs. Normalization,
    /// activations, pooling and resampling are not counted.
    pub fn estimate_flops(&self, input_size: usize) -> f64 {
        let bb = &self.backbone;
        let mut total = 0.0;
        let mut side = input_size;
        let mut run = |blk: &dyn Block<T>, side: &mut usize| {
            total += blk.flops(*side, *side);
            *side = side.div_ceil(blk.stride());
        };
        run(&bb.p1, &mut side);
        run(&bb.p2, &mut side);
        run(&bb.elan2, &mut side);
        run(&bb.down3, &mut side);
        run(&bb.elan3, &mut side);
        let s3 = side;
        run(&bb.down4, &mut side);
        run(&bb.elan4, &mut side);
        let s4 = side;
        run(&bb.down5, &mut side);
        run(&bb.sppelan, &mut side);
        let s5 = side;
        let n = &self.neck;
        total += <GoElan as Block<T>>::flops(&n.td4, s4, s4)
            + <GoElan as Block<T>>::flops(&n.td3, s3, s3)
            + <ADown as Block<T>>::flops(&n.down3, s3, s3)
            + <GoElan as Block<T>>::flops(&n.bu4, s4, s4)
            + <ADown as Block<T>>::flops(&n.down4, s4, s4)
            + <GoElan as Block<T>>::flops(&n.bu5, s5, s5);
        let sides = [s3, s4, s5];
        total += self.heads.iter().zip(sides).map(|(h, s)| h.flops(s, s)).sum::<f64>();
        if let Some(a) = &self.aux {
            total += a.tap3.flops(s3, s3) + a.tap4.flops(s4, s4) + a.tap5.flops(s5, s5);
            total += <GoElan as Block<T>>::flops(&a.elan3, s3, s3)
                + <GoElan as Block<T>>::flops(&a.elan4, s4, s4)
                + <GoElan as Block<T>>::flops(&a.elan5, s5, s5);
            total += a.heads.iter().zip(sides).map(|(h, s)| h.flops(s, s)).sum::<f64>();
        }
        total
    }

    /// Trainable scalars of a single parameter kind (diagnostics).
    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.store
            .params()
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Single-precision model, the training default.
pub type Model32 = Model<f32>;
/// Double-precision model for gradient checks and bitwise determinism runs.
pub type Model64 = Model<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn toy(aux: bool) -> Model<f64> {
        let mut cfg = ModelConfig::toy(3, 64);
        cfg.aux_enabled = aux;
        Model::build(cfg).unwrap()
    }

    fn random_images(seed: u64, b: usize, s: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((b, 3, s, s), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn toy_forward_produces_three_scales() {
        let m = toy(true);
        let (main, aux) = m.forward_train(&random_images(0, 1, 64), Mode::Eval).unwrap();
        let dims: Vec<_> = main.scales.iter().map(|s| (s.data.dim().2, s.data.dim().3)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        assert!(main.scales.iter().all(|s| s.data.dim().1 == 5 + 3));
        assert_eq!(aux.scales.len(), 3);
        assert_eq!(m.head_shapes(64), dims);
    }

    #[test]
    fn aux_disabled_means_no_aux_output_and_fewer_params() {
        let with = toy(true);
        let without = toy(false);
        assert!(without.count_parameters() < with.count_parameters());
        assert_eq!(without.store().scalar_count_in(Branch::Auxiliary), 0);
        let (_, aux) = without.forward_train(&random_images(1, 1, 64), Mode::Eval).unwrap();
        assert!(aux.is_empty());
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let m = toy(false);
        let err = m.forward_infer(&random_images(0, 1, 96)).unwrap_err();
        assert!(matches!(err, Error::Shape(ref s) if s.contains("(B, 3, 64, 64)")));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::toy(3, 64);
        cfg.input_size = 100;
        assert!(Model::<f32>::build(cfg).is_err());
        let mut cfg = ModelConfig::toy(3, 64);
        cfg.class_count = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(3, 64);
        cfg.label_smoothing = 1.0;
        assert!(cfg.validate().is_err());
        // full-size pool windows do not fit a 64-pixel input
        let cfg = ModelConfig::preset(WidthPreset::Full, 10, 64);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn forward_is_deterministic_and_infer_matches_train_main() {
        let m = toy(true);
        let x = random_images(2, 2, 64);
        let (a, _) = m.forward_train(&x, Mode::Eval).unwrap();
        let (b, _) = m.forward_train(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let inf = m.forward_infer(&x).unwrap();
        assert!(inf.max_abs_diff(&a) <= 1e-6);
    }

    #[test]
    fn strip_keeps_inference_and_is_idempotent() {
        let mut m = toy(true);
        // move the running statistics away from their init so the copy matters
        for _ in 0..2 {
            let pass = m.forward_graph(random_images(9, 2, 64), Mode::Train, true).unwrap();
            let upd = pass.tape.norm_updates().to_vec();
            drop(pass);
            m.store_mut().apply_norm_updates(&upd);
        }
        let s = m.strip_auxiliary().unwrap();
        assert!(s.count_parameters() < m.count_parameters());
        assert!(!s.has_aux());
        let x = random_images(3, 2, 64);
        assert!(m.forward_infer(&x).unwrap().max_abs_diff(&s.forward_infer(&x).unwrap()) <= 1e-6);
        let ss = s.strip_auxiliary().unwrap();
        assert_eq!(ss.count_parameters(), s.count_parameters());
        assert_eq!(ss.forward_infer(&x).unwrap(), s.forward_infer(&x).unwrap());
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::new(&mut Builder::new(&mut store, &mut rng).scope("c"), 4, 8, 1, true);
        assert_eq!(store.scalar_count(), 4 * 8 + 8);
        assert_eq!(ParamStore::<f64>::new().scalar_count(), 0);
    }

    #[test]
    fn conv_flops_closed_form_and_area_scaling() {
        assert_eq!(crate::blocks::conv_flops(3, 16, 16, 32, 32), 2.0 * (3.0 * 3.0 * 16.0) * 16.0 * 32.0 * 32.0);
        let m = Model::<f32>::build(ModelConfig::toy(3, 128)).unwrap();
        let f1 = m.estimate_flops(128);
        let f2 = m.estimate_flops(256);
        assert!((f2 / f1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn parameter_count_is_invariant_under_forward() {
        let m = toy(true);
        let before = m.count_parameters();
        m.forward_train(&random_images(4, 1, 64), Mode::Train).unwrap();
        assert_eq!(m.count_parameters(), before);
    }

    #[test]
    fn toy_pools_fit_the_stride_32_map() {
        assert_eq!(ChannelPlan::toy(64).pool_sizes, vec![1, 1, 1]);
        assert_eq!(ChannelPlan::toy(96).pool_sizes, vec![3, 3, 3]);
        assert_eq!(ChannelPlan::toy(128).pool_sizes, vec![3, 3, 3]);
        assert_eq!(ChannelPlan::toy(160).pool_sizes, vec![5, 5, 5]);
    }
}
