//! Desk-scale detector on synthetic rectangle scenes.
//!
//! Three stride-2 3x3 convs take a 64x64 image to an 8x8 map, one attention
//! layer sits on every head level, the decoupled head predicts per anchor,
//! and assignment is re-run on the current predictions every step.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abota::{assign_scene, AssignmentResult, BBox, CellKey, GridLevel, GroundTruth, Prediction};
use crate::error::{Error, Result};
use crate::heads::{
    build_head, decode_predictions, head_forward_var, ConvParams, HeadParams, HeadSpec, HeadVariant, HeadVars,
    LayerGraph, LevelSpec,
};
use crate::lfsa::{lfsa_forward_var, LfsaParams, LfsaVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAX_OBJECTS: usize = 4;
const NOISE: f64 = 0.05;
const STRIPE: usize = 2;
const EPS: f64 = 1e-7;
/// Subtracted from every pixel before the backbone.
const INPUT_MEAN: f64 = 0.5;

/// A synthetic image with its ground truths. Class 0 rectangles are solid,
/// class 1 rectangles are horizontally striped.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
}

/// 64x64 scene with rectangle extents in `[8, 32]`.
pub fn gen_scene(seed: u64, n_objects: usize) -> Result<Scene> {
    gen_scene_sized(seed, n_objects, 64, 8, 32)
}

pub fn gen_scene_sized(seed: u64, n_objects: usize, size: usize, min_ext: usize, max_ext: usize) -> Result<Scene> {
    if n_objects > MAX_OBJECTS {
        return Err(Error::Contract(format!("at most {MAX_OBJECTS} objects per scene, asked for {n_objects}")));
    }
    if min_ext == 0 || min_ext > max_ext || max_ext > size {
        return Err(Error::Config(format!("extent range [{min_ext}, {max_ext}] does not fit a {size} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Tensor::zeros(&[1, size, size]);
    for v in image.data_mut() {
        *v = rng.gen_range(-NOISE..NOISE);
    }
    let mut gts = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let w = rng.gen_range(min_ext..=max_ext);
        let h = rng.gen_range(min_ext..=max_ext);
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let class_id = rng.gen_range(0..2);
        for y in y0..y0 + h {
            let on = class_id == 0 || ((y - y0) / STRIPE).is_multiple_of(2);
            for x in x0..x0 + w {
                image.set(&[0, y, x], if on { 1.0 } else { 0.0 });
            }
        }
        let bbox = BBox::new(x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0, w as f64, h as f64)?;
        gts.push(GroundTruth { bbox, class_id });
    }
    Ok(Scene { image, gts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { obj: 1.0, cls: 0.5, bbox: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub image_size: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    /// Anchor `(w, h)` lists for the deepest `anchors.len()` stages, shallowest first.
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub n_classes: usize,
    pub head_variant: HeadVariant,
    pub head_hidden: usize,
    pub head_convs_per_branch: usize,
    pub use_lfsa: bool,
    pub lambda: f64,
    pub anchor_t: f64,
    pub weights: LossWeights,
    pub min_extent: usize,
    pub max_extent: usize,
    /// Number of distinct scenes cycled through; 0 draws a fresh scene every step.
    pub scene_pool: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone_channels: vec![8, 16, 32],
            anchors: vec![vec![(12.0, 12.0), (24.0, 24.0)]],
            n_classes: 2,
            head_variant: HeadVariant::Edh,
            head_hidden: 16,
            head_convs_per_branch: 1,
            use_lfsa: true,
            lambda: crate::abota::DEFAULT_LAMBDA,
            anchor_t: crate::abota::DEFAULT_ANCHOR_T,
            weights: LossWeights::default(),
            min_extent: 8,
            max_extent: 32,
            scene_pool: 0,
            clip_norm: 1.0,
            lr: DEFAULT_LR,
            steps: 500,
            seed: 7,
        }
    }
}

pub const DEFAULT_LR: f64 = 0.5;

impl ToyConfig {
    /// Strides 8 and 16 over a 64x64 image.
    pub fn two_level() -> Self {
        Self {
            backbone_channels: vec![8, 16, 32, 32],
            anchors: vec![vec![(10.0, 10.0), (16.0, 16.0)], vec![(24.0, 24.0), (32.0, 32.0)]],
            ..Self::default()
        }
    }

    /// 16x16 image, one 2x2 level, one anchor. Small enough to
    /// finite-difference every parameter.
    pub fn miniature() -> Self {
        Self {
            image_size: 16,
            backbone_channels: vec![2, 3, 4],
            anchors: vec![vec![(8.0, 8.0)]],
            head_hidden: 4,
            min_extent: 5,
            max_extent: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.backbone_channels.len();
        if stages == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one stage of positive width".into()));
        }
        if self.anchors.is_empty() || self.anchors.len() > stages {
            return Err(Error::Config(format!("{} anchor levels for {stages} backbone stages", self.anchors.len())));
        }
        let n_anchors = self.anchors[0].len();
        if n_anchors == 0 || self.anchors.iter().any(|a| a.len() != n_anchors) {
            return Err(Error::Config("every level needs the same positive number of anchors".into()));
        }
        if self.anchors.iter().flatten().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::Config("anchor extents must be positive".into()));
        }
        if !self.image_size.is_multiple_of(1 << stages) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the backbone stride {}",
                self.image_size,
                1 << stages
            )));
        }
        if self.n_classes == 0 || self.head_hidden == 0 {
            return Err(Error::Config("classes and head width must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.anchor_t > 1.0) {
            return Err(Error::Config("lambda must be >= 0 and anchor_t > 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be finite and >= 0, got {}", self.clip_norm)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent || self.max_extent > self.image_size {
            return Err(Error::Config("object extent range does not fit the image".into()));
        }
        Ok(())
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            variant: self.head_variant,
            hidden_channels: self.head_hidden,
            convs_per_branch: self.head_convs_per_branch,
            n_anchors: self.anchors[0].len(),
            n_classes: self.n_classes,
        }
    }

    /// Head levels: the last `anchors.len()` backbone stages.
    pub fn level_specs(&self) -> Vec<LevelSpec> {
        let stages = self.backbone_channels.len();
        let first = stages - self.anchors.len();
        (first..stages)
            .map(|s| {
                let stride = 1 << (s + 1);
                let extent = self.image_size / stride;
                LevelSpec::new(self.backbone_channels[s], stride, extent, extent)
            })
            .collect()
    }

    pub fn grid_levels(&self) -> Vec<GridLevel> {
        self.level_specs()
            .iter()
            .zip(&self.anchors)
            .map(|(l, a)| GridLevel { rows: l.height, cols: l.width, stride: l.stride as f64, anchors: a.clone() })
            .collect()
    }

    pub fn scene(&self, seed: u64, n_objects: usize) -> Result<Scene> {
        gen_scene_sized(seed, n_objects, self.image_size, self.min_extent, self.max_extent)
    }
}

/// All trainable tensors of the toy detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub backbone: Vec<ConvParams>,
    pub lfsa: Vec<LfsaParams>,
    pub graph: LayerGraph,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct ToyVars {
    pub backbone: Vec<(Var, Var)>,
    pub lfsa: Vec<LfsaVars>,
    pub head: HeadVars,
}

impl ToyModel {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let mut backbone = Vec::new();
        for &cout in &config.backbone_channels {
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            backbone.push(ConvParams {
                weight: Tensor::uniform(&[cout, cin, 3, 3], -bound, bound, &mut rng),
                bias: Some(Tensor::zeros(&[cout])),
            });
            cin = cout;
        }
        let levels = config.level_specs();
        let lfsa = if config.use_lfsa {
            levels.iter().map(|l| LfsaParams::init(l.in_channels, &mut rng)).collect()
        } else {
            vec![]
        };
        let graph = build_head(&levels, &config.head_spec())?;
        let head = HeadParams::init(&graph, &mut rng);
        Ok(Self { config, backbone, lfsa, graph, head })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.backbone {
            out.push(&p.weight);
            out.extend(p.bias.as_ref());
        }
        for l in &self.lfsa {
            out.extend(l.tensors());
        }
        for p in &self.head.layers {
            out.push(&p.weight);
            out.extend(p.bias.as_ref());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.backbone {
            out.push(&mut p.weight);
            out.extend(p.bias.as_mut());
        }
        for l in &mut self.lfsa {
            out.extend(l.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    /// `(group, tensor count)` in [`Self::tensors`] order.
    pub fn groups(&self) -> Vec<(&'static str, usize)> {
        vec![("backbone", 2 * self.backbone.len()), ("lfsa", 11 * self.lfsa.len()), ("head", self.head.tensors_count())]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ToyVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        self.vars_from(&vars)
    }

    /// Maps leaves given in [`Self::tensors`] order onto the model layout.
    pub fn vars_from(&self, vars: &[Var]) -> ToyVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one var per model tensor");
        let backbone = self.backbone.iter().map(|_| (next(), next())).collect();
        let lfsa = self
            .lfsa
            .iter()
            .map(|_| LfsaVars {
                wq: next(),
                wk: next(),
                wv: next(),
                row_conv: next(),
                row_conv_bias: next(),
                col_conv: next(),
                col_conv_bias: next(),
                row_dw: next(),
                row_dw_bias: next(),
                col_dw: next(),
                col_dw_bias: next(),
            })
            .collect();
        let head =
            HeadVars { layers: self.head.layers.iter().map(|p| (next(), p.bias.as_ref().map(|_| next()))).collect() };
        ToyVars { backbone, lfsa, head }
    }

    /// Raw head output per level.
    pub fn forward_var(&self, tape: &mut Tape, image: Var, vars: &ToyVars) -> Result<Vec<Var>> {
        let mut x = tape.offset(image, -INPUT_MEAN)?;
        let mut stages = Vec::with_capacity(vars.backbone.len());
        for &(w, b) in &vars.backbone {
            x = tape.conv2d(x, w, Some(b), 2, 1, 1)?;
            x = tape.silu(x)?;
            stages.push(x);
        }
        let n_levels = self.config.anchors.len();
        let mut features = stages.split_off(stages.len() - n_levels);
        for (f, p) in features.iter_mut().zip(&vars.lfsa) {
            *f = lfsa_forward_var(tape, *f, p)?;
        }
        head_forward_var(tape, &self.graph, &features, &vars.head)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let vars = self.register(&mut tape);
        let raws = self.forward_var(&mut tape, x, &vars)?;
        Ok(raws.into_iter().map(|r| tape.value(r).clone()).collect())
    }

    /// Decoded predictions keyed by slot, ready for assignment.
    pub fn decode(&self, raws: &[Tensor]) -> Result<BTreeMap<CellKey, Prediction>> {
        let mut out = BTreeMap::new();
        for (level, (raw, grid)) in raws.iter().zip(self.config.grid_levels()).enumerate() {
            for cell in decode_predictions(raw, &grid.anchors, grid.stride)? {
                let key = CellKey { level, anchor: cell.anchor, row: cell.row, col: cell.col };
                out.insert(key, cell.prediction);
            }
        }
        Ok(out)
    }

    pub fn assign(&self, raws: &[Tensor], gts: &[GroundTruth]) -> Result<AssignmentResult> {
        let preds = self.decode(raws)?;
        assign_scene(gts, &preds, &self.config.grid_levels(), self.config.lambda, self.config.anchor_t)
    }
}

impl HeadParams {
    fn tensors_count(&self) -> usize {
        self.layers.iter().map(|p| 1 + usize::from(p.bias.is_some())).sum()
    }
}

/// Weighted loss terms recorded on a tape; `total` is their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub obj: Var,
    pub cls: Option<Var>,
    pub bbox: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossValues { obj: v(Some(self.obj)), cls: v(self.cls), bbox: v(self.bbox), total: v(Some(self.total)) }
    }
}

/// Raw channel offsets inside one anchor block.
const TX: usize = 0;
const OBJ: usize = 4;
const CLS: usize = 5;

/// Objectness BCE averaged over every slot, class BCE averaged over
/// positives and classes, and `1 - CIoU` averaged over positives.
pub fn loss_var(
    tape: &mut Tape,
    raws: &[Var],
    assignments: &AssignmentResult,
    gts: &[GroundTruth],
    levels: &[GridLevel],
    weights: LossWeights,
) -> Result<LossVars> {
    if raws.len() != levels.len() {
        return Err(Error::Config(format!("{} raw maps for {} levels", raws.len(), levels.len())));
    }
    let mut flats = Vec::with_capacity(raws.len());
    let mut slots = 0usize;
    for (raw, grid) in raws.iter().zip(levels) {
        let shape = tape.value(*raw).shape().to_vec();
        let a = grid.anchors.len();
        if shape.len() != 3 || shape[1] != grid.rows || shape[2] != grid.cols || a == 0 || !shape[0].is_multiple_of(a) {
            return Err(Error::Config(format!("raw map {shape:?} does not fit level {grid:?}")));
        }
        slots += a * grid.rows * grid.cols;
        let n = tape.value(*raw).len();
        flats.push(tape.reshape(*raw, &[n])?);
    }
    if slots == 0 {
        return Err(Error::Contract("loss over an empty grid".into()));
    }
    let per_anchor: Vec<usize> =
        raws.iter().zip(levels).map(|(r, g)| tape.value(*r).shape()[0] / g.anchors.len()).collect();
    if per_anchor.iter().any(|&p| p <= CLS || p != per_anchor[0]) {
        return Err(Error::Config(format!("raw channels per anchor {per_anchor:?} leave no classes")));
    }
    let n_classes = per_anchor[0] - CLS;
    let index = |level: usize, anchor: usize, ch: usize, row: usize, col: usize| {
        let g = &levels[level];
        ((anchor * per_anchor[level] + ch) * g.rows + row) * g.cols + col
    };

    // objectness over every slot
    let mut obj_sum: Option<Var> = None;
    for (level, grid) in levels.iter().enumerate() {
        let mut idx = Vec::new();
        let mut target = Vec::new();
        for anchor in 0..grid.anchors.len() {
            for row in 0..grid.rows {
                for col in 0..grid.cols {
                    idx.push(index(level, anchor, OBJ, row, col));
                    let positive = assignments.get(&CellKey { level, anchor, row, col }).is_some();
                    target.push(if positive { 1.0 } else { 0.0 });
                }
            }
        }
        let n = idx.len();
        let logits = tape.gather(flats[level], idx)?;
        let bce = tape.bce_with_logits(logits, Tensor::new(&[n], target)?)?;
        let s = tape.sum(bce)?;
        obj_sum = Some(match obj_sum {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let obj = tape.scale(obj_sum.expect("at least one level"), weights.obj / slots as f64)?;

    let positives = &assignments.assignments;
    let (cls, bbox) = if positives.is_empty() {
        (None, None)
    } else {
        let p = positives.len();
        // classification
        let target: Vec<f64> = positives
            .iter()
            .flat_map(|a| (0..n_classes).map(move |c| if c == gts[a.gt_index].class_id { 1.0 } else { 0.0 }))
            .collect();
        let cls_logits = gather_levels(tape, &flats, positives, |a| {
            (0..n_classes).map(|c| index(a.key.level, a.key.anchor, CLS + c, a.key.row, a.key.col)).collect()
        })?;
        let bce = tape.bce_with_logits(cls_logits, Tensor::new(&[p * n_classes], target)?)?;
        let cls_sum = tape.sum(bce)?;
        let cls = tape.scale(cls_sum, weights.cls / (p * n_classes) as f64)?;

        // box regression
        let t: Vec<Var> = (0..4)
            .map(|c| {
                gather_levels(tape, &flats, positives, |a| {
                    vec![index(a.key.level, a.key.anchor, TX + c, a.key.row, a.key.col)]
                })
            })
            .collect::<Result<_>>()?;
        let col_off: Vec<f64> = positives.iter().map(|a| a.key.col as f64 - 0.5).collect();
        let row_off: Vec<f64> = positives.iter().map(|a| a.key.row as f64 - 0.5).collect();
        let strides: Vec<f64> = positives.iter().map(|a| levels[a.key.level].stride).collect();
        let anchor_w: Vec<f64> = positives.iter().map(|a| levels[a.key.level].anchors[a.key.anchor].0).collect();
        let anchor_h: Vec<f64> = positives.iter().map(|a| levels[a.key.level].anchors[a.key.anchor].1).collect();
        let targets: Vec<BBox> = positives.iter().map(|a| gts[a.gt_index].bbox).collect();

        let konst = |tape: &mut Tape, v: Vec<f64>| -> Result<Var> { Ok(tape.leaf(Tensor::new(&[p], v)?)) };
        let center = |tape: &mut Tape, t: Var, off: Vec<f64>| -> Result<Var> {
            let s = tape.sigmoid(t)?;
            let s = tape.scale(s, 2.0)?;
            let off = konst(tape, off)?;
            let c = tape.add(s, off)?;
            let st = konst(tape, strides.clone())?;
            tape.mul(c, st)
        };
        let extent = |tape: &mut Tape, t: Var, anchor: Vec<f64>| -> Result<Var> {
            let s = tape.sigmoid(t)?;
            let s = tape.scale(s, 2.0)?;
            let s = tape.square(s)?;
            let a = konst(tape, anchor)?;
            tape.mul(s, a)
        };
        let px = center(tape, t[0], col_off)?;
        let py = center(tape, t[1], row_off)?;
        let pw = extent(tape, t[2], anchor_w)?;
        let ph = extent(tape, t[3], anchor_h)?;
        let ciou = ciou_var(tape, px, py, pw, ph, &targets)?;
        let ciou_sum = tape.sum(ciou)?;
        // mean(1 - ciou) = 1 - sum/p
        let neg = tape.scale(ciou_sum, -1.0 / p as f64)?;
        let reg = tape.offset(neg, 1.0)?;
        let bbox = tape.scale(reg, weights.bbox)?;
        (Some(cls), Some(bbox))
    };

    let mut total = obj;
    for part in [cls, bbox].into_iter().flatten() {
        total = tape.add(total, part)?;
    }
    Ok(LossVars { obj, cls, bbox, total })
}

/// Gathers per-positive indices from each level's flattened map, keeping
/// the order of `positives`.
fn gather_levels(
    tape: &mut Tape,
    flats: &[Var],
    positives: &[crate::abota::Assignment],
    indices: impl Fn(&crate::abota::Assignment) -> Vec<usize>,
) -> Result<Var> {
    if flats.len() == 1 {
        let idx = positives.iter().flat_map(&indices).collect();
        return tape.gather(flats[0], idx);
    }
    // Concatenate all levels, then index with level offsets.
    let mut offsets = Vec::with_capacity(flats.len());
    let mut total = 0;
    for &f in flats {
        offsets.push(total);
        total += tape.value(f).len();
    }
    let reshaped: Vec<Var> = flats
        .iter()
        .map(|&f| {
            let n = tape.value(f).len();
            tape.reshape(f, &[n, 1, 1])
        })
        .collect::<Result<_>>()?;
    let joined = tape.concat_channels(&reshaped)?;
    let joined = tape.reshape(joined, &[total])?;
    let idx = positives
        .iter()
        .flat_map(|a| {
            let off = offsets[a.key.level];
            indices(a).into_iter().map(move |i| i + off)
        })
        .collect();
    tape.gather(joined, idx)
}

/// Differentiable CIoU between predicted boxes (center/extent vectors) and
/// constant targets.
fn ciou_var(tape: &mut Tape, px: Var, py: Var, pw: Var, ph: Var, targets: &[BBox]) -> Result<Var> {
    let p = targets.len();
    let konst = |tape: &mut Tape, f: &dyn Fn(&BBox) -> f64| -> Result<Var> {
        Ok(tape.leaf(Tensor::new(&[p], targets.iter().map(f).collect())?))
    };
    let gx1 = konst(tape, &|b| b.corners().0)?;
    let gy1 = konst(tape, &|b| b.corners().1)?;
    let gx2 = konst(tape, &|b| b.corners().2)?;
    let gy2 = konst(tape, &|b| b.corners().3)?;
    let gcx = konst(tape, &|b| b.cx())?;
    let gcy = konst(tape, &|b| b.cy())?;
    let garea = konst(tape, &|b| b.w() * b.h())?;

    let half_w = tape.scale(pw, 0.5)?;
    let half_h = tape.scale(ph, 0.5)?;
    let px1 = tape.sub(px, half_w)?;
    let px2 = tape.add(px, half_w)?;
    let py1 = tape.sub(py, half_h)?;
    let py2 = tape.add(py, half_h)?;

    let ix2 = tape.minimum(px2, gx2)?;
    let ix1 = tape.maximum(px1, gx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(pw, ph)?;
    let union = tape.add(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let union = tape.offset(union, EPS)?;
    let iou = tape.div(inter, union)?;

    let cx2 = tape.maximum(px2, gx2)?;
    let cx1 = tape.minimum(px1, gx1)?;
    let cw = tape.sub(cx2, cx1)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let ch = tape.sub(cy2, cy1)?;
    let cw2 = tape.square(cw)?;
    let ch2 = tape.square(ch)?;
    let c2 = tape.add(cw2, ch2)?;
    let c2 = tape.offset(c2, EPS)?;
    let dx = tape.sub(px, gcx)?;
    let dy = tape.sub(py, gcy)?;
    let dx2 = tape.square(dx)?;
    let dy2 = tape.square(dy)?;
    let rho2 = tape.add(dx2, dy2)?;
    let dist = tape.div(rho2, c2)?;

    let gratio = konst(tape, &|b| (b.w() / b.h()).atan())?;
    let pratio = tape.div(pw, ph)?;
    let pratio = tape.atan(pratio)?;
    let diff = tape.sub(gratio, pratio)?;
    let diff2 = tape.square(diff)?;
    let v = tape.scale(diff2, 4.0 / (PI * PI))?;
    let denom = tape.sub(v, iou)?;
    let denom = tape.offset(denom, 1.0 + EPS)?;
    let alpha = tape.div(v, denom)?;
    let av = tape.mul(alpha, v)?;

    let out = tape.sub(iou, dist)?;
    tape.sub(out, av)
}

/// Loss of `model` on `scene` with a fixed assignment, plus everything
/// needed to differentiate it.
pub struct StepGraph {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub loss: LossVars,
    pub assignments: AssignmentResult,
}

pub fn build_step(model: &ToyModel, scene: &Scene) -> Result<StepGraph> {
    let raws = model.forward(&scene.image)?;
    let assignments = model.assign(&raws, &scene.gts)?;
    let mut tape = Tape::new();
    let x = tape.leaf(scene.image.clone());
    let params: Vec<Var> = model.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
    let vars = model.vars_from(&params);
    let raws = model.forward_var(&mut tape, x, &vars)?;
    let loss = loss_var(&mut tape, &raws, &assignments, &scene.gts, &model.config.grid_levels(), model.config.weights)?;
    Ok(StepGraph { tape, params, loss, assignments })
}

/// Seeds and object counts of the training scenes, in order.
pub fn scene_stream(config: &ToyConfig, seed: u64, steps: usize) -> Vec<(u64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let pool = if config.scene_pool == 0 { steps } else { config.scene_pool.min(steps) };
    let distinct: Vec<(u64, usize)> = (0..pool).map(|_| (rng.gen(), rng.gen_range(1..=MAX_OBJECTS))).collect();
    (0..steps).map(|i| distinct[i % pool.max(1)]).collect()
}

/// Plain gradient descent; returns the loss recorded at every step before
/// that step's update.
pub fn train(config: &ToyConfig, steps: usize, lr: f64, seed: u64) -> Result<(Vec<f64>, ToyModel)> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut model = ToyModel::new(config.clone(), seed)?;
    let mut curve = Vec::with_capacity(steps);
    for (step, (scene_seed, n)) in scene_stream(config, seed, steps).into_iter().enumerate() {
        let scene = config.scene(scene_seed, n)?;
        let graph = build_step(&model, &scene).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;
        let loss = graph.tape.value(graph.loss.total).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss is {loss}")));
        }
        curve.push(loss);
        if lr == 0.0 {
            continue;
        }
        let grads = graph.tape.backward(graph.loss.total, &Tensor::scalar(1.0))?;
        let norm = graph.params.iter().map(|&v| grads.wrt(v).dot(grads.wrt(v))).sum::<Result<f64>>()?.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("step {step}: gradient norm is {norm}")));
        }
        let step_size =
            if config.clip_norm > 0.0 && norm > config.clip_norm { lr * config.clip_norm / norm } else { lr };
        for (t, &v) in model.tensors_mut().into_iter().zip(&graph.params) {
            for (w, g) in t.data_mut().iter_mut().zip(grads.wrt(v).data()) {
                *w -= step_size * g;
            }
        }
    }
    Ok((curve, model))
}

/// `step,loss` lines with a header; shortest round-trip float formatting.
pub fn format_curve(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Means of the first and last `window` entries.
pub fn window_means(curve: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(curve.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&curve[..w]), mean(&curve[curve.len() - w..]))
}
