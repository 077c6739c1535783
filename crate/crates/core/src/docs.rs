//! Machine-readable documents: scene input, assignment output and the head
//! cost report. Field order is fixed so identical inputs serialize to
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::abota::{
    assign_scene, BBox, CellKey, GridLevel, GroundTruth, Prediction, TopEntry, DEFAULT_ANCHOR_T, DEFAULT_LAMBDA,
};
use crate::cost::{compare_heads, lfsa_report, CostReport, CONVENTION};
use crate::error::{Error, Result};
use crate::heads::{HeadSpec, LevelSpec};
use crate::lfsa::{full_attention_macs, lfsa_attention_macs};

/// Reference `dFLOPs(EDH) / dFLOPs(DH)` as a GFLOP-delta quotient.
pub const REFERENCE_RATIO: &str = "5.8/34.7";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDoc {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxDoc {
    fn to_bbox(self, what: &str) -> Result<BBox> {
        BBox::new(self.cx, self.cy, self.w, self.h).map_err(|e| Error::Input(format!("{what}: {e}")))
    }
}

impl From<BBox> for BoxDoc {
    fn from(b: BBox) -> Self {
        Self { cx: b.cx(), cy: b.cy(), w: b.w(), h: b.h() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtDoc {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionDoc {
    pub level: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    #[serde(rename = "box")]
    pub bbox: BoxDoc,
    pub class_probs: Vec<f64>,
    pub objectness: f64,
}

/// A single-level assignment problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub gts: Vec<GtDoc>,
    pub anchors: Vec<(f64, f64)>,
    pub grid: GridDoc,
    #[serde(default)]
    pub predictions: Vec<PredictionDoc>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_anchor_t")]
    pub anchor_t: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_anchor_t() -> f64 {
    DEFAULT_ANCHOR_T
}

/// Validated contents of a [`SceneDoc`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProblem {
    pub gts: Vec<GroundTruth>,
    pub predictions: BTreeMap<CellKey, Prediction>,
    pub levels: Vec<GridLevel>,
    pub lambda: f64,
    pub anchor_t: f64,
}

/// Parse failures carry the line and column of the offending token.
pub fn parse_scene(text: &str) -> Result<SceneDoc> {
    serde_json::from_str(text).map_err(|e| Error::Input(format!("parse error: {e}")))
}

impl SceneDoc {
    pub fn problem(&self) -> Result<SceneProblem> {
        let g = self.grid;
        if g.rows == 0 || g.cols == 0 || !(g.stride > 0.0 && g.stride.is_finite()) {
            return Err(Error::Input(format!("grid {g:?} must have positive extents and stride")));
        }
        if self.anchors.is_empty() {
            return Err(Error::Input("scene needs at least one anchor".into()));
        }
        let levels = vec![GridLevel { rows: g.rows, cols: g.cols, stride: g.stride, anchors: self.anchors.clone() }];
        let gts = self
            .gts
            .iter()
            .enumerate()
            .map(|(i, gt)| {
                let bbox = BoxDoc { cx: gt.cx, cy: gt.cy, w: gt.w, h: gt.h }.to_bbox(&format!("gts[{i}]"))?;
                Ok(GroundTruth { bbox, class_id: gt.class })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut predictions = BTreeMap::new();
        for (i, p) in self.predictions.iter().enumerate() {
            if p.level != 0 || p.anchor >= self.anchors.len() || p.row >= g.rows || p.col >= g.cols {
                return Err(Error::Input(format!(
                    "predictions[{i}] slot ({}, {}, {}, {}) is outside the grid",
                    p.level, p.anchor, p.row, p.col
                )));
            }
            let key = CellKey { level: p.level, anchor: p.anchor, row: p.row, col: p.col };
            let pred = Prediction {
                bbox: p.bbox.to_bbox(&format!("predictions[{i}].box"))?,
                class_probs: p.class_probs.clone(),
                objectness: p.objectness,
            };
            if predictions.insert(key, pred).is_some() {
                return Err(Error::Input(format!("predictions[{i}] repeats slot {key:?}")));
            }
        }
        Ok(SceneProblem { gts, predictions, levels, lambda: self.lambda, anchor_t: self.anchor_t })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentEntry {
    pub level: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub gt_index: usize,
    pub cost: Option<f64>,
    pub top2: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentDoc {
    pub assignments: Vec<AssignmentEntry>,
}

/// Runs assignment on a scene; `lambda` overrides the document's value.
pub fn assign_document(scene: &SceneDoc, lambda: Option<f64>) -> Result<AssignmentDoc> {
    let p = scene.problem()?;
    let lambda = lambda.unwrap_or(p.lambda);
    let result = assign_scene(&p.gts, &p.predictions, &p.levels, lambda, p.anchor_t)?;
    let assignments = result
        .assignments
        .into_iter()
        .map(|a| AssignmentEntry {
            level: a.key.level,
            anchor: a.key.anchor,
            row: a.key.row,
            col: a.key.col,
            gt_index: a.gt_index,
            cost: a.cost,
            top2: a.top2,
        })
        .collect();
    Ok(AssignmentDoc { assignments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantDoc {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub delta_params: i64,
    pub delta_flops: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfsaInsertionDoc {
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub attention_macs: u64,
    pub full_attention_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub variant: String,
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReportDoc {
    pub convention: String,
    pub variants: Vec<VariantDoc>,
    /// Absent when the decoupled head adds no FLOPs.
    pub edh_dh_flops_ratio: Option<f64>,
    pub edh_dh_params_ratio: Option<f64>,
    pub reference: String,
    pub lfsa: Vec<LfsaInsertionDoc>,
    pub layers: Vec<LayerDoc>,
}

pub fn cost_report(levels: &[LevelSpec], dh: &HeadSpec, edh: &HeadSpec) -> Result<CostReportDoc> {
    let cmp = compare_heads(levels, dh, edh)?;
    let base = cmp.baseline.total;
    let named: [(&str, &CostReport); 3] = [("baseline", &cmp.baseline), ("dh", &cmp.dh), ("edh", &cmp.edh)];
    let variants = named
        .iter()
        .map(|(name, r)| {
            let d = r.total.delta(&base);
            VariantDoc {
                name: name.to_string(),
                params: r.total.params,
                macs: r.total.macs,
                flops: r.total.flops,
                delta_params: d.params,
                delta_flops: d.flops,
            }
        })
        .collect();
    let layers = named
        .iter()
        .flat_map(|(variant, r)| {
            r.layers.iter().map(move |l| LayerDoc {
                variant: variant.to_string(),
                name: l.name.clone(),
                params: l.cost.params,
                macs: l.cost.macs,
                flops: l.cost.flops,
            })
        })
        .collect();
    let lfsa = levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let total = lfsa_report(l.in_channels, l.height, l.width)?.total;
            let (c, h, w) = (l.in_channels as u64, l.height as u64, l.width as u64);
            Ok(LfsaInsertionDoc {
                level: i,
                channels: l.in_channels,
                height: l.height,
                width: l.width,
                params: total.params,
                macs: total.macs,
                flops: total.flops,
                attention_macs: lfsa_attention_macs(c, h, w),
                full_attention_macs: full_attention_macs(c, h, w),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostReportDoc {
        convention: CONVENTION.to_string(),
        variants,
        edh_dh_flops_ratio: cmp.flops_delta_ratio(),
        edh_dh_params_ratio: cmp.params_delta_ratio(),
        reference: REFERENCE_RATIO.to_string(),
        lfsa,
        layers,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(doc: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc).map_err(|e| Error::Contract(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn ratio_text(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"))
}

pub fn render_cost_table(doc: &CostReportDoc) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "convention: {}", doc.convention);
    let _ = writeln!(s, "{:<24} {:>14} {:>16} {:>16}", "layer", "params", "macs", "flops");
    for l in &doc.layers {
        let _ =
            writeln!(s, "{:<24} {:>14} {:>16} {:>16}", format!("{}.{}", l.variant, l.name), l.params, l.macs, l.flops);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<10} {:>14} {:>16} {:>16} {:>14} {:>16}",
        "variant", "params", "macs", "flops", "d_params", "d_flops"
    );
    for v in &doc.variants {
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>16} {:>16} {:>14} {:>16}",
            v.name, v.params, v.macs, v.flops, v.delta_params, v.delta_flops
        );
    }
    let _ =
        writeln!(s, "edh/dh flops delta ratio: {} (reference {})", ratio_text(doc.edh_dh_flops_ratio), doc.reference);
    let _ = writeln!(s, "edh/dh params delta ratio: {}", ratio_text(doc.edh_dh_params_ratio));
    if !doc.lfsa.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>12} {:>16} {:>16} {:>18}",
            "lfsa", "C", "HxW", "params", "macs", "attn_macs", "full_attn_macs"
        );
        for l in &doc.lfsa {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>9} {:>12} {:>16} {:>16} {:>18}",
                l.level,
                l.channels,
                format!("{}x{}", l.height, l.width),
                l.params,
                l.macs,
                l.attention_macs,
                l.full_attention_macs
            );
        }
    }
    s
}
