//! Anchor-based label assignment with CIoU top-2 conflict resolution.
//!
//! YOLOv5-style matching lets several ground truths land on the same
//! `(level, anchor, row, col)` slot. For such a slot with prediction `p`,
//! the two ground truths with the largest `CIoU(g, p)` are kept and the one
//! with the smallest `L_cls + lambda * (1 - CIoU)` wins; the others are
//! dropped for that slot. Ties go to the lowest ground-truth index.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 3.0;
pub const DEFAULT_ANCHOR_T: f64 = 4.0;

/// Axis-aligned box, center/extent form, pixels. Extents are positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.cx, r.cy, r.w, r.h)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Input(format!("box ({cx}, {cy}, {w}, {h}) is not finite")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Input(format!("box ({cx}, {cy}, {w}, {h}) has a non-positive extent")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    /// Area from the corners, so that a box intersected with itself gives
    /// back exactly its own area.
    fn corner_area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.corner_area() + b.corner_area() - inter)
}

/// Complete IoU: `IoU - rho^2/c^2 - alpha*v`.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    let iou = iou(a, b);
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let rho2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    let v = 4.0 / (PI * PI) * ((b.w / b.h).atan() - (a.w / a.h).atan()).powi(2);
    let denom = (1.0 - iou) + v;
    let alpha_v = if denom > 0.0 { v / denom * v } else { 0.0 };
    iou - rho2 / c2 - alpha_v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Decoded prediction of one grid slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub objectness: f64,
}

/// One detection level: grid extents, stride and anchor priors `(w, h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub anchors: Vec<(f64, f64)>,
}

/// A grid slot, ordered by level, anchor, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub level: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchCandidate {
    pub key: CellKey,
    /// Ascending, duplicate free, non-empty.
    pub gt_indices: Vec<usize>,
}

impl MatchCandidate {
    pub fn is_conflict(&self) -> bool {
        self.gt_indices.len() > 1
    }
}

/// Cells responsible for a center at grid coordinate `(gx, gy)`: its own
/// cell plus the nearer horizontal and vertical neighbours, when inside.
fn responsible_cells(gx: f64, gy: f64, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let (col, row) = (gx.floor() as usize, gy.floor() as usize);
    let mut cells = vec![(row, col)];
    let (fx, fy) = (gx.fract(), gy.fract());
    let (ix, iy) = (cols as f64 - gx, rows as f64 - gy);
    if fx < 0.5 && gx > 1.0 {
        cells.push((row, col - 1));
    }
    if fy < 0.5 && gy > 1.0 {
        cells.push((row - 1, col));
    }
    if ix.fract() < 0.5 && ix > 1.0 {
        cells.push((row, col + 1));
    }
    if iy.fract() < 0.5 && iy > 1.0 {
        cells.push((row + 1, col));
    }
    cells
}

/// YOLOv5 matching: shape ratio below `anchor_t` against the anchor, and
/// the slot is the center cell or one of its two nearest neighbours.
pub fn match_candidates(gts: &[GroundTruth], levels: &[GridLevel], anchor_t: f64) -> Result<Vec<MatchCandidate>> {
    if !(anchor_t > 1.0) {
        return Err(Error::Config(format!("anchor_t must exceed 1, got {anchor_t}")));
    }
    let mut slots: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (li, level) in levels.iter().enumerate() {
        if level.rows == 0 || level.cols == 0 || !(level.stride > 0.0) {
            return Err(Error::Config(format!("level {li} has an empty grid")));
        }
        let (img_w, img_h) = (level.cols as f64 * level.stride, level.rows as f64 * level.stride);
        for (gi, gt) in gts.iter().enumerate() {
            let b = gt.bbox;
            if !(0.0..img_w).contains(&b.cx) || !(0.0..img_h).contains(&b.cy) {
                return Err(Error::Input(format!(
                    "ground truth {gi} center ({}, {}) lies outside the {img_w}x{img_h} image",
                    b.cx, b.cy
                )));
            }
            let cells = responsible_cells(b.cx / level.stride, b.cy / level.stride, level.rows, level.cols);
            for (ai, &(aw, ah)) in level.anchors.iter().enumerate() {
                let (rw, rh) = (b.w / aw, b.h / ah);
                let worst = rw.max(1.0 / rw).max(rh).max(1.0 / rh);
                if worst >= anchor_t {
                    continue;
                }
                for &(row, col) in &cells {
                    slots.entry(CellKey { level: li, anchor: ai, row, col }).or_default().push(gi);
                }
            }
        }
    }
    Ok(slots.into_iter().map(|(key, gt_indices)| MatchCandidate { key, gt_indices }).collect())
}

/// `-ln` clamped the same way as common BCE implementations.
fn neg_log(p: f64) -> f64 {
    -(p.ln().max(-100.0))
}

/// Sum over classes of binary cross-entropy against the one-hot class.
pub fn classification_loss(class_id: usize, probs: &[f64]) -> Result<f64> {
    if class_id >= probs.len() {
        return Err(Error::Input(format!("class {class_id} out of range for {} class probabilities", probs.len())));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Input(format!("class probability {p} outside [0, 1]")));
    }
    Ok(probs.iter().enumerate().map(|(c, &p)| if c == class_id { neg_log(p) } else { neg_log(1.0 - p) }).sum())
}

/// `L_cls + lambda * (1 - CIoU(gt, pred))`.
pub fn assignment_cost(gt: &GroundTruth, pred: &Prediction, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be non-negative, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&pred.objectness) {
        return Err(Error::Input(format!("objectness {} outside [0, 1]", pred.objectness)));
    }
    let cls = classification_loss(gt.class_id, &pred.class_probs)?;
    Ok(cls + lambda * (1.0 - ciou(&gt.bbox, &pred.bbox)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub gt_index: usize,
    pub ciou: f64,
    pub cost: f64,
}

/// Resolved owner of one slot. `top2` is empty and `cost` is `None` only
/// for unconflicted slots passed through without a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub key: CellKey,
    pub gt_index: usize,
    pub cost: Option<f64>,
    pub top2: Vec<TopEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// Sorted by key.
    pub assignments: Vec<Assignment>,
}

impl AssignmentResult {
    pub fn get(&self, key: &CellKey) -> Option<&Assignment> {
        self.assignments.binary_search_by(|a| a.key.cmp(key)).ok().map(|i| &self.assignments[i])
    }
}

/// Keeps the two largest CIoUs, then the minimum cost among them.
pub fn abota_resolve(
    candidate: &MatchCandidate,
    gts: &[GroundTruth],
    pred: &Prediction,
    lambda: f64,
) -> Result<Assignment> {
    if candidate.gt_indices.is_empty() {
        return Err(Error::Contract(format!("candidate {:?} has no ground truths", candidate.key)));
    }
    let mut scored = Vec::with_capacity(candidate.gt_indices.len());
    for &gi in &candidate.gt_indices {
        let gt = gts.get(gi).ok_or_else(|| Error::Input(format!("ground truth index {gi} out of range")))?;
        scored.push((gi, ciou(&gt.bbox, &pred.bbox)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(2);

    let mut top2 = Vec::with_capacity(2);
    for (gi, c) in scored {
        let cost = assignment_cost(&gts[gi], pred, lambda)?;
        top2.push(TopEntry { gt_index: gi, ciou: c, cost });
    }
    let best = top2
        .iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.gt_index.cmp(&b.gt_index)))
        .copied()
        .expect("at least one entry");
    Ok(Assignment { key: candidate.key, gt_index: best.gt_index, cost: Some(best.cost), top2 })
}

/// Matching followed by conflict resolution for every slot.
///
/// Conflicted slots need a prediction. Unconflicted slots keep their single
/// ground truth; their cost is filled in when a prediction is available.
pub fn assign_scene(
    gts: &[GroundTruth],
    predictions: &BTreeMap<CellKey, Prediction>,
    levels: &[GridLevel],
    lambda: f64,
    anchor_t: f64,
) -> Result<AssignmentResult> {
    let candidates = match_candidates(gts, levels, anchor_t)?;
    let mut assignments = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let assignment = match (predictions.get(&cand.key), cand.is_conflict()) {
            (Some(pred), _) => abota_resolve(cand, gts, pred, lambda)?,
            (None, false) => Assignment { key: cand.key, gt_index: cand.gt_indices[0], cost: None, top2: vec![] },
            (None, true) => {
                return Err(Error::Input(format!(
                    "slot {:?} matches ground truths {:?} but has no prediction",
                    cand.key, cand.gt_indices
                )))
            }
        };
        assignments.push(assignment);
    }
    Ok(AssignmentResult { assignments })
}
