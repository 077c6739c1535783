//! Decoupled detection heads as declarative layer graphs.
//!
//! Per level the decoupled head (DH) runs a 1x1 stem to 256 channels, then
//! a classification and a regression branch of two 3x3 convs each. The
//! efficient head (EDH) halves the stem width to 128 and keeps one 3x3 conv
//! per branch. Both finish with 1x1 prediction convs; objectness hangs off
//! the regression branch.
//!
//! Raw level output is `[A*(5+n), H, W]`, laid out per anchor as
//! `[tx, ty, tw, th, obj, cls_0 .. cls_{n-1}]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abota::{BBox, Prediction};
use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One feature level entering the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub in_channels: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelSpec {
    pub fn new(in_channels: usize, stride: usize, height: usize, width: usize) -> Self {
        Self { in_channels, stride, height, width }
    }

    /// P3/P4/P5 of a 640x640 large model: 256/512/1024 channels at 80/40/20.
    pub fn yolov5l() -> Vec<Self> {
        vec![Self::new(256, 8, 80, 80), Self::new(512, 16, 40, 40), Self::new(1024, 32, 20, 20)]
    }

    pub fn image_extent(&self) -> (usize, usize) {
        (self.stride * self.height, self.stride * self.width)
    }
}

/// Checks positivity and that every level covers the same image.
pub fn validate_levels(levels: &[LevelSpec]) -> Result<()> {
    for (i, l) in levels.iter().enumerate() {
        if l.in_channels == 0 || l.stride == 0 || l.height == 0 || l.width == 0 {
            return Err(Error::Config(format!("level {i} has a non-positive extent: {l:?}")));
        }
        if l.image_extent() != levels[0].image_extent() {
            return Err(Error::Config(format!(
                "level {i} covers {:?} pixels but level 0 covers {:?}",
                l.image_extent(),
                levels[0].image_extent()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Dh,
    Edh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub variant: HeadVariant,
    pub hidden_channels: usize,
    pub convs_per_branch: usize,
    pub n_anchors: usize,
    pub n_classes: usize,
}

pub const DH_HIDDEN: usize = 256;

impl HeadSpec {
    pub fn dh_default(n_anchors: usize, n_classes: usize) -> Self {
        Self { variant: HeadVariant::Dh, hidden_channels: DH_HIDDEN, convs_per_branch: 2, n_anchors, n_classes }
    }

    /// Half the DH width and one 3x3 conv fewer per branch.
    pub fn edh_default(n_anchors: usize, n_classes: usize) -> Self {
        let dh = Self::dh_default(n_anchors, n_classes);
        Self {
            variant: HeadVariant::Edh,
            hidden_channels: dh.hidden_channels / 2,
            convs_per_branch: dh.convs_per_branch - 1,
            ..dh
        }
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.n_anchors == 0 || self.n_classes == 0 {
            return Err(Error::Config(format!("head spec has a zero extent: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Stem,
    ClsConv(usize),
    RegConv(usize),
    ClsPred,
    RegPred,
    ObjPred,
    /// Single 1x1 prediction conv of a coupled head.
    CoupledPred,
    Other,
}

/// Stride-1, extent-preserving convolution descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub level: usize,
    pub role: LayerRole,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub bias: bool,
    pub hout: usize,
    pub wout: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layers: Vec<ConvLayer>,
}

/// Layer indices of one level of a decoupled head.
#[derive(Debug, Clone)]
struct LevelLayout {
    stem: usize,
    cls: Vec<usize>,
    reg: Vec<usize>,
    cls_pred: usize,
    reg_pred: usize,
    obj_pred: usize,
}

impl LayerGraph {
    pub fn n_levels(&self) -> usize {
        self.layers.iter().map(|l| l.level + 1).max().unwrap_or(0)
    }

    fn layout(&self, level: usize) -> Result<LevelLayout> {
        let find = |role: LayerRole| {
            self.layers
                .iter()
                .position(|l| l.level == level && l.role == role)
                .ok_or_else(|| Error::Config(format!("level {level} has no {role:?} layer")))
        };
        let branch = |mk: fn(usize) -> LayerRole| {
            (0..)
                .map_while(|i| self.layers.iter().position(|l| l.level == level && l.role == mk(i)))
                .collect::<Vec<_>>()
        };
        Ok(LevelLayout {
            stem: find(LayerRole::Stem)?,
            cls: branch(LayerRole::ClsConv),
            reg: branch(LayerRole::RegConv),
            cls_pred: find(LayerRole::ClsPred)?,
            reg_pred: find(LayerRole::RegPred)?,
            obj_pred: find(LayerRole::ObjPred)?,
        })
    }

    /// `(n_anchors, n_classes)` read off the prediction convs of level 0.
    pub fn head_layout(&self) -> Result<(usize, usize)> {
        let lay = self.layout(0)?;
        let anchors = self.layers[lay.obj_pred].cout;
        let classes = self.layers[lay.cls_pred].cout / anchors.max(1);
        Ok((anchors, classes))
    }

    /// Symbolic shape propagation: groups divide channels, each branch
    /// chains from the stem, prediction widths agree with the anchor count.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if l.kernel % 2 == 0 || l.kernel == 0 || l.hout == 0 || l.wout == 0 || l.cout == 0 {
                return Err(Error::Config(format!("layer {} has invalid extents", l.name)));
            }
            if l.groups == 0 || l.cin % l.groups != 0 || l.cout % l.groups != 0 {
                return Err(Error::Config(format!("layer {}: groups do not divide channels", l.name)));
            }
        }
        let is_head = self.layers.iter().any(|l| l.role == LayerRole::Stem);
        if !is_head {
            return Ok(());
        }
        let (anchors, classes) = self.head_layout()?;
        for level in 0..self.n_levels() {
            let lay = self.layout(level)?;
            let l = |i: usize| &self.layers[i];
            let stem = l(lay.stem);
            let extents_match = |i: usize| l(i).hout == stem.hout && l(i).wout == stem.wout;
            for (branch, pred_ids) in [(&lay.cls, vec![lay.cls_pred]), (&lay.reg, vec![lay.reg_pred, lay.obj_pred])] {
                let mut width = stem.cout;
                for &i in branch.iter() {
                    if l(i).cin != width || !extents_match(i) {
                        return Err(Error::Config(format!(
                            "layer {} expects {} channels but receives {width}",
                            l(i).name,
                            l(i).cin
                        )));
                    }
                    width = l(i).cout;
                }
                for p in pred_ids {
                    if l(p).cin != width || !extents_match(p) {
                        return Err(Error::Config(format!(
                            "prediction layer {} expects {} channels but receives {width}",
                            l(p).name,
                            l(p).cin
                        )));
                    }
                }
            }
            let want = [(lay.cls_pred, anchors * classes), (lay.reg_pred, anchors * 4), (lay.obj_pred, anchors)];
            for (i, cout) in want {
                if l(i).cout != cout {
                    return Err(Error::Config(format!(
                        "prediction layer {} outputs {} channels, expected {cout}",
                        l(i).name,
                        l(i).cout
                    )));
                }
            }
        }
        Ok(())
    }
}

fn conv_layer(
    level: usize,
    name: &str,
    role: LayerRole,
    kernel: usize,
    cin: usize,
    cout: usize,
    spec: &LevelSpec,
) -> ConvLayer {
    ConvLayer {
        name: format!("p{level}.{name}"),
        level,
        role,
        kernel,
        cin,
        cout,
        groups: 1,
        bias: true,
        hout: spec.height,
        wout: spec.width,
    }
}

/// Builds a head graph for either variant.
pub fn build_head(levels: &[LevelSpec], spec: &HeadSpec) -> Result<LayerGraph> {
    spec.validate()?;
    validate_levels(levels)?;
    let hid = spec.hidden_channels;
    let (a, n) = (spec.n_anchors, spec.n_classes);
    let mut layers = Vec::new();
    for (li, lv) in levels.iter().enumerate() {
        layers.push(conv_layer(li, "stem", LayerRole::Stem, 1, lv.in_channels, hid, lv));
        for i in 0..spec.convs_per_branch {
            layers.push(conv_layer(li, &format!("cls{i}"), LayerRole::ClsConv(i), 3, hid, hid, lv));
        }
        for i in 0..spec.convs_per_branch {
            layers.push(conv_layer(li, &format!("reg{i}"), LayerRole::RegConv(i), 3, hid, hid, lv));
        }
        layers.push(conv_layer(li, "cls_pred", LayerRole::ClsPred, 1, hid, a * n, lv));
        layers.push(conv_layer(li, "reg_pred", LayerRole::RegPred, 1, hid, a * 4, lv));
        layers.push(conv_layer(li, "obj_pred", LayerRole::ObjPred, 1, hid, a, lv));
    }
    let graph = LayerGraph { layers };
    graph.validate()?;
    Ok(graph)
}

pub fn build_decoupled_head(levels: &[LevelSpec], spec: &HeadSpec) -> Result<LayerGraph> {
    if spec.variant != HeadVariant::Dh {
        return Err(Error::Config("build_decoupled_head needs a DH spec".into()));
    }
    build_head(levels, spec)
}

pub fn build_efficient_head(levels: &[LevelSpec], spec: &HeadSpec) -> Result<LayerGraph> {
    if spec.variant != HeadVariant::Edh {
        return Err(Error::Config("build_efficient_head needs an EDH spec".into()));
    }
    build_head(levels, spec)
}

/// One 1x1 conv per level straight to `A*(5+n)` outputs.
pub fn build_coupled_head(levels: &[LevelSpec], n_anchors: usize, n_classes: usize) -> Result<LayerGraph> {
    validate_levels(levels)?;
    let layers = levels
        .iter()
        .enumerate()
        .map(|(li, lv)| {
            conv_layer(li, "pred", LayerRole::CoupledPred, 1, lv.in_channels, n_anchors * (5 + n_classes), lv)
        })
        .collect();
    Ok(LayerGraph { layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Weights for every layer of a [`LayerGraph`], in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<ConvParams>,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub layers: Vec<(Var, Option<Var>)>,
}

impl HeadVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b)| std::iter::once(*w).chain(*b)).collect()
    }
}

impl HeadParams {
    pub fn zeros(graph: &LayerGraph) -> Self {
        Self::with(graph, Tensor::zeros, Tensor::zeros)
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(graph: &LayerGraph, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(graph.layers.len());
        for l in &graph.layers {
            let fan_in = (l.kernel * l.kernel * l.cin / l.groups) as f64;
            let bound = 1.0 / fan_in.sqrt();
            layers.push(ConvParams {
                weight: Tensor::uniform(&[l.cout, l.cin / l.groups, l.kernel, l.kernel], -bound, bound, rng),
                bias: l.bias.then(|| Tensor::zeros(&[l.cout])),
            });
        }
        Self { layers }
    }

    fn with(graph: &LayerGraph, w: impl Fn(&[usize]) -> Tensor, b: impl Fn(&[usize]) -> Tensor) -> Self {
        let layers = graph
            .layers
            .iter()
            .map(|l| ConvParams {
                weight: w(&[l.cout, l.cin / l.groups, l.kernel, l.kernel]),
                bias: l.bias.then(|| b(&[l.cout])),
            })
            .collect();
        Self { layers }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|p| std::iter::once(&mut p.weight).chain(p.bias.as_mut())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|p| p.weight.len() + p.bias.as_ref().map_or(0, Tensor::len)).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            layers: self
                .layers
                .iter()
                .map(|p| (tape.leaf(p.weight.clone()), p.bias.as_ref().map(|b| tape.leaf(b.clone()))))
                .collect(),
        }
    }
}

fn conv_var(tape: &mut Tape, graph: &LayerGraph, vars: &HeadVars, idx: usize, x: Var) -> Result<Var> {
    let l = &graph.layers[idx];
    let (w, b) = vars.layers[idx];
    tape.conv2d(x, w, b, 1, l.kernel / 2, l.groups)
}

/// Records the head on `tape`; returns one raw prediction map per level.
pub fn head_forward_var(tape: &mut Tape, graph: &LayerGraph, features: &[Var], vars: &HeadVars) -> Result<Vec<Var>> {
    if vars.layers.len() != graph.layers.len() {
        return Err(Error::Config(format!("{} parameter sets for {} layers", vars.layers.len(), graph.layers.len())));
    }
    if features.len() != graph.n_levels() {
        return dim_err(format!("{} feature maps for {} head levels", features.len(), graph.n_levels()));
    }
    let (anchors, classes) = graph.head_layout()?;
    let mut outputs = Vec::with_capacity(features.len());
    for (level, &x) in features.iter().enumerate() {
        let lay = graph.layout(level)?;
        let stem_layer = &graph.layers[lay.stem];
        let fs = tape.value(x).shape();
        if fs != [stem_layer.cin, stem_layer.hout, stem_layer.wout] {
            return dim_err(format!(
                "level {level} feature {fs:?} does not match [{}, {}, {}]",
                stem_layer.cin, stem_layer.hout, stem_layer.wout
            ));
        }
        let stem = conv_var(tape, graph, vars, lay.stem, x)?;
        let stem = tape.silu(stem)?;
        let mut cls = stem;
        for &i in &lay.cls {
            cls = conv_var(tape, graph, vars, i, cls)?;
            cls = tape.silu(cls)?;
        }
        let mut reg = stem;
        for &i in &lay.reg {
            reg = conv_var(tape, graph, vars, i, reg)?;
            reg = tape.silu(reg)?;
        }
        let cls = conv_var(tape, graph, vars, lay.cls_pred, cls)?;
        let boxes = conv_var(tape, graph, vars, lay.reg_pred, reg)?;
        let obj = conv_var(tape, graph, vars, lay.obj_pred, reg)?;

        let mut parts = Vec::with_capacity(3 * anchors);
        for a in 0..anchors {
            parts.push(tape.slice_channels(boxes, 4 * a, 4)?);
            parts.push(tape.slice_channels(obj, a, 1)?);
            parts.push(tape.slice_channels(cls, classes * a, classes)?);
        }
        outputs.push(tape.concat_channels(&parts)?);
    }
    Ok(outputs)
}

pub fn head_forward(graph: &LayerGraph, features: &[Tensor], params: &HeadParams) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = features.iter().map(|f| tape.leaf(f.clone())).collect();
    let vars = params.register(&mut tape);
    let outs = head_forward_var(&mut tape, graph, &xs, &vars)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Floor on decoded extents so saturated logits still give a valid box.
pub const MIN_DECODED_EXTENT: f64 = 1e-9;

/// A decoded prediction and the grid slot it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedCell {
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub prediction: Prediction,
}

/// Decodes one raw level map into image-space boxes.
///
/// `center = (2 sigmoid(t) - 0.5 + cell) * stride`,
/// `size = (2 sigmoid(t))^2 * anchor`.
pub fn decode_predictions(raw: &Tensor, anchors: &[(f64, f64)], stride: f64) -> Result<Vec<DecodedCell>> {
    let &[channels, h, w] = raw.shape() else {
        return dim_err(format!("raw predictions must be [C,H,W], got {:?}", raw.shape()));
    };
    let a = anchors.len();
    if a == 0 || channels % a != 0 || channels / a < 6 {
        return Err(Error::Config(format!("{channels} raw channels do not fit {a} anchors")));
    }
    let per = channels / a;
    let mut out = Vec::with_capacity(a * h * w);
    for (ai, &(aw, ah)) in anchors.iter().enumerate() {
        for row in 0..h {
            for col in 0..w {
                let t = |k: usize| raw.at(&[ai * per + k, row, col]);
                let cx = (2.0 * sigmoid(t(0)) - 0.5 + col as f64) * stride;
                let cy = (2.0 * sigmoid(t(1)) - 0.5 + row as f64) * stride;
                let bw = ((2.0 * sigmoid(t(2))).powi(2) * aw).max(MIN_DECODED_EXTENT);
                let bh = ((2.0 * sigmoid(t(3))).powi(2) * ah).max(MIN_DECODED_EXTENT);
                let prediction = Prediction {
                    bbox: BBox::new(cx, cy, bw, bh)?,
                    objectness: sigmoid(t(4)),
                    class_probs: (5..per).map(|k| sigmoid(t(k))).collect(),
                };
                out.push(DecodedCell { anchor: ai, row, col, prediction });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_level() -> Vec<LevelSpec> {
        vec![LevelSpec::new(256, 8, 80, 80)]
    }

    fn shapes(g: &LayerGraph) -> Vec<(usize, usize, usize)> {
        g.layers.iter().map(|l| (l.kernel, l.cin, l.cout)).collect()
    }

    #[test]
    fn dh_structure() {
        let g = build_decoupled_head(&one_level(), &HeadSpec::dh_default(3, 80)).unwrap();
        assert_eq!(g.layers.len(), 8);
        assert_eq!(
            shapes(&g),
            vec![
                (1, 256, 256),
                (3, 256, 256),
                (3, 256, 256),
                (3, 256, 256),
                (3, 256, 256),
                (1, 256, 240),
                (1, 256, 12),
                (1, 256, 3)
            ]
        );
    }

    #[test]
    fn edh_structure() {
        let g = build_efficient_head(&one_level(), &HeadSpec::edh_default(3, 80)).unwrap();
        assert_eq!(g.layers.len(), 8 - 2);
        assert_eq!(
            shapes(&g),
            vec![(1, 256, 128), (3, 128, 128), (3, 128, 128), (1, 128, 240), (1, 128, 12), (1, 128, 3)]
        );
        let spec = HeadSpec::edh_default(3, 80);
        let dh = HeadSpec::dh_default(3, 80);
        assert_eq!(spec.hidden_channels * 2, dh.hidden_channels);
        assert_eq!(spec.convs_per_branch + 1, dh.convs_per_branch);
    }

    #[test]
    fn zero_levels_and_bad_config() {
        assert!(build_decoupled_head(&[], &HeadSpec::dh_default(3, 80)).unwrap().layers.is_empty());
        assert!(build_efficient_head(&[], &HeadSpec::edh_default(3, 80)).unwrap().layers.is_empty());
        assert!(build_decoupled_head(&one_level(), &HeadSpec::edh_default(3, 80)).is_err());
        let bad = [LevelSpec::new(0, 8, 80, 80)];
        assert!(matches!(build_head(&bad, &HeadSpec::dh_default(3, 80)), Err(Error::Config(_))));
        let mismatched = [LevelSpec::new(8, 8, 80, 80), LevelSpec::new(8, 16, 20, 20)];
        assert!(build_head(&mismatched, &HeadSpec::dh_default(3, 80)).is_err());
    }

    #[test]
    fn validation_catches_broken_chain() {
        let mut g = build_head(&one_level(), &HeadSpec::edh_default(3, 80)).unwrap();
        g.layers[1].cin = 64;
        assert!(g.validate().is_err());
        let mut g = build_head(&one_level(), &HeadSpec::edh_default(3, 80)).unwrap();
        g.layers[4].cout = 13;
        assert!(g.validate().is_err());
    }

    #[test]
    fn forward_layout_and_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let levels = [LevelSpec::new(6, 8, 4, 5), LevelSpec::new(6, 16, 2, 3)];
        // the second level is deliberately inconsistent in image extent
        assert!(build_head(&levels, &HeadSpec::edh_default(3, 80)).is_err());
        let levels = [LevelSpec::new(6, 8, 4, 6), LevelSpec::new(6, 16, 2, 3)];
        let mut spec = HeadSpec::edh_default(3, 80);
        spec.hidden_channels = 4;
        let g = build_head(&levels, &spec).unwrap();
        let p = HeadParams::init(&g, &mut rng);
        let feats: Vec<_> =
            levels.iter().map(|l| Tensor::uniform(&[l.in_channels, l.height, l.width], -1.0, 1.0, &mut rng)).collect();
        let outs = head_forward(&g, &feats, &p).unwrap();
        assert_eq!(outs[0].shape(), &[255, 4, 6]);
        assert_eq!(outs[1].shape(), &[255, 2, 3]);
        assert!(head_forward(&g, &feats[..1], &p).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let levels = [LevelSpec::new(3, 8, 2, 2)];
        let mut spec = HeadSpec::dh_default(2, 3);
        spec.hidden_channels = 4;
        let g = build_head(&levels, &spec).unwrap();
        let out = head_forward(&g, &[Tensor::ones(&[3, 2, 2])], &HeadParams::zeros(&g)).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
        let cells = decode_predictions(&out[0], &[(10.0, 10.0), (20.0, 5.0)], 8.0).unwrap();
        assert!(cells.iter().all(|c| c.prediction.objectness == 0.5));
    }

    #[test]
    fn decode_zero_logits() {
        let raw = Tensor::zeros(&[7, 2, 2]);
        let cells = decode_predictions(&raw, &[(10.0, 10.0)], 8.0).unwrap();
        let p = &cells[0].prediction;
        assert_eq!((cells[0].row, cells[0].col), (0, 0));
        assert_eq!((p.bbox.cx(), p.bbox.cy(), p.bbox.w(), p.bbox.h()), (4.0, 4.0, 10.0, 10.0));
        assert_eq!(p.class_probs, vec![0.5, 0.5]);
        assert!(decode_predictions(&raw, &[(1.0, 1.0), (2.0, 2.0)], 8.0).is_err());
    }

    #[test]
    fn decode_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Tensor::uniform(&[7, 3, 3], -30.0, 30.0, &mut rng);
        for c in decode_predictions(&raw, &[(10.0, 6.0)], 8.0).unwrap() {
            let dx = c.prediction.bbox.cx() - c.col as f64 * 8.0;
            assert!((-4.0..=12.0).contains(&dx));
            assert!(c.prediction.bbox.w() <= 40.0 && c.prediction.bbox.h() <= 24.0);
        }
    }
}
