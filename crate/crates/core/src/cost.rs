//! Exact parameter / MAC / FLOP accounting.
//!
//! Convention: one MAC is one multiply-accumulate and FLOPs = 2 x MACs.
//! Softmax, scaling and elementwise additions are not counted.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{ConvLayer, HeadSpec, LayerGraph, LayerRole, LevelSpec};
use crate::lfsa::{lfsa_attention_macs, DW_KERNEL};

pub const CONVENTION: &str = "flops=2*macs";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

impl LayerCost {
    pub fn new(params: u64, macs: u64) -> Self {
        Self { params, macs, flops: 2 * macs }
    }

    /// Signed difference `self - base`.
    pub fn delta(&self, base: &LayerCost) -> CostDelta {
        CostDelta {
            params: self.params as i64 - base.params as i64,
            macs: self.macs as i64 - base.macs as i64,
            flops: self.flops as i64 - base.flops as i64,
        }
    }
}

impl Add for LayerCost {
    type Output = LayerCost;

    fn add(self, rhs: LayerCost) -> LayerCost {
        LayerCost::new(self.params + rhs.params, self.macs + rhs.macs)
    }
}

impl std::iter::Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(iter: I) -> LayerCost {
        iter.fold(LayerCost::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDelta {
    pub params: i64,
    pub macs: i64,
    pub flops: i64,
}

/// Cost of a `k x k` convolution producing a `hout x wout` map.
pub fn conv_cost(
    k: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    hout: usize,
    wout: usize,
    bias: bool,
) -> Result<LayerCost> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "groups {groups} must divide input channels {cin} and output channels {cout}"
        )));
    }
    let (k, cin, cout, groups) = (k as u64, cin as u64, cout as u64, groups as u64);
    let weights = k * k * (cin / groups) * cout;
    let params = weights + if bias { cout } else { 0 };
    Ok(LayerCost::new(params, weights * hout as u64 * wout as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostEntry {
    pub name: String,
    pub cost: LayerCost,
}

/// Per-layer breakdown plus totals. `total` is always the sum of `layers`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCostEntry>,
    pub total: LayerCost,
}

impl CostReport {
    pub fn from_entries(layers: Vec<LayerCostEntry>) -> Self {
        let total = layers.iter().map(|e| e.cost).sum();
        Self { layers, total }
    }

    /// Adds an entry that is not a convolution (e.g. attention matmuls).
    pub fn push(&mut self, name: impl Into<String>, cost: LayerCost) {
        self.layers.push(LayerCostEntry { name: name.into(), cost });
        self.total = self.total + cost;
    }
}

pub fn layer_cost(layer: &ConvLayer) -> Result<LayerCost> {
    conv_cost(layer.kernel, layer.cin, layer.cout, layer.groups, layer.hout, layer.wout, layer.bias)
}

pub fn graph_cost(graph: &LayerGraph) -> Result<CostReport> {
    let layers = graph
        .layers
        .iter()
        .map(|l| Ok(LayerCostEntry { name: l.name.clone(), cost: layer_cost(l)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_entries(layers))
}

/// The convolutions of one attention layer at `[C,H,W]` as a graph.
pub fn lfsa_layer_graph(c: usize, h: usize, w: usize) -> LayerGraph {
    let conv = |name: &str, kernel, groups, bias| ConvLayer {
        name: name.to_string(),
        level: 0,
        role: LayerRole::Other,
        kernel,
        cin: c,
        cout: c,
        groups,
        bias,
        hout: h,
        wout: w,
    };
    LayerGraph {
        layers: vec![
            conv("q", 1, 1, false),
            conv("k", 1, 1, false),
            conv("v", 1, 1, false),
            conv("row_conv", 1, 1, true),
            conv("col_conv", 1, 1, true),
            conv("row_dw", DW_KERNEL, c, true),
            conv("col_dw", DW_KERNEL, c, true),
        ],
    }
}

/// Convolution graph cost plus the row/column attention matmuls.
pub fn lfsa_report(c: usize, h: usize, w: usize) -> Result<CostReport> {
    let mut report = graph_cost(&lfsa_layer_graph(c, h, w))?;
    report.push("attention", LayerCost::new(0, lfsa_attention_macs(c as u64, h as u64, w as u64)));
    Ok(report)
}

/// Coupled head, decoupled head and efficient head over the same levels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadComparison {
    pub baseline: CostReport,
    pub dh: CostReport,
    pub edh: CostReport,
}

impl HeadComparison {
    pub fn dh_delta(&self) -> CostDelta {
        self.dh.total.delta(&self.baseline.total)
    }

    pub fn edh_delta(&self) -> CostDelta {
        self.edh.total.delta(&self.baseline.total)
    }

    /// `dFLOPs(EDH) / dFLOPs(DH)` over the coupled baseline, `None` when the
    /// decoupled head adds nothing.
    pub fn flops_delta_ratio(&self) -> Option<f64> {
        let dh = self.dh_delta().flops;
        (dh != 0).then(|| self.edh_delta().flops as f64 / dh as f64)
    }

    pub fn params_delta_ratio(&self) -> Option<f64> {
        let dh = self.dh_delta().params;
        (dh != 0).then(|| self.edh_delta().params as f64 / dh as f64)
    }
}

pub fn compare_heads(levels: &[LevelSpec], dh_spec: &HeadSpec, edh_spec: &HeadSpec) -> Result<HeadComparison> {
    let baseline = crate::heads::build_coupled_head(levels, dh_spec.n_anchors, dh_spec.n_classes)?;
    Ok(HeadComparison {
        baseline: graph_cost(&baseline)?,
        dh: graph_cost(&crate::heads::build_head(levels, dh_spec)?)?,
        edh: graph_cost(&crate::heads::build_head(levels, edh_spec)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{build_coupled_head, build_decoupled_head, build_efficient_head, HeadVariant};

    /// Counts weights and output positions by enumeration.
    fn enumerate(k: usize, cin: usize, cout: usize, g: usize, h: usize, w: usize, bias: bool) -> (u64, u64) {
        let mut params = 0u64;
        for _co in 0..cout {
            for _ci in 0..cin / g {
                for _ in 0..k * k {
                    params += 1;
                }
            }
            if bias {
                params += 1;
            }
        }
        let mut macs = 0u64;
        for _co in 0..cout {
            for _y in 0..h {
                for _x in 0..w {
                    macs += (k * k * (cin / g)) as u64;
                }
            }
        }
        (params, macs)
    }

    #[test]
    fn conv_cost_examples() {
        let c = conv_cost(1, 4, 4, 1, 2, 2, true).unwrap();
        assert_eq!((c.params, c.macs, c.flops), (20, 64, 128));
        assert_eq!((c.params, c.macs), enumerate(1, 4, 4, 1, 2, 2, true));
        let c = conv_cost(3, 8, 8, 8, 4, 4, true).unwrap();
        assert_eq!((c.params, c.macs), (80, 1152));
        assert_eq!((c.params, c.macs), enumerate(3, 8, 8, 8, 4, 4, true));
        assert!(matches!(conv_cost(3, 6, 8, 4, 4, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn empty_and_single_layer_graphs() {
        assert_eq!(graph_cost(&LayerGraph::default()).unwrap().total, LayerCost::default());
        let g = lfsa_layer_graph(4, 3, 3);
        let single = LayerGraph { layers: vec![g.layers[5].clone()] };
        let r = graph_cost(&single).unwrap();
        assert_eq!(r.total, layer_cost(&g.layers[5]).unwrap());
    }

    #[test]
    fn lfsa_report_agrees_with_closed_form() {
        for (c, h, w) in [(1, 1, 1), (2, 2, 3), (8, 5, 7), (256, 80, 80)] {
            assert_eq!(lfsa_report(c, h, w).unwrap().total, crate::lfsa::lfsa_cost(c, h, w));
        }
    }

    #[test]
    fn additivity_over_concatenation() {
        let a = lfsa_layer_graph(3, 4, 5);
        let b = build_coupled_head(&[LevelSpec::new(16, 8, 4, 4)], 3, 2).unwrap();
        let mut both = a.clone();
        both.layers.extend(b.layers.clone());
        let sum = graph_cost(&a).unwrap().total + graph_cost(&b).unwrap().total;
        assert_eq!(graph_cost(&both).unwrap().total, sum);
    }

    #[test]
    fn identical_specs_give_unit_ratio() {
        let levels = [LevelSpec::new(64, 8, 10, 10)];
        let dh = HeadSpec::dh_default(3, 80);
        let mut same = dh.clone();
        same.variant = HeadVariant::Edh;
        let cmp = compare_heads(&levels, &dh, &same).unwrap();
        assert_eq!(cmp.flops_delta_ratio(), Some(1.0));
        assert_eq!(cmp.params_delta_ratio(), Some(1.0));
    }

    #[test]
    fn edh_is_cheaper_for_every_level_mix() {
        let levels = LevelSpec::yolov5l();
        let dh = graph_cost(&build_decoupled_head(&levels, &HeadSpec::dh_default(3, 80)).unwrap()).unwrap();
        let edh = graph_cost(&build_efficient_head(&levels, &HeadSpec::edh_default(3, 80)).unwrap()).unwrap();
        assert!(edh.total.params < dh.total.params);
        assert!(edh.total.macs < dh.total.macs);
    }
}
