//! Row/column self-attention, decoupled detection heads with a cost model,
//! and CIoU-ranked conflict resolution for anchor label assignment, on top
//! of a small f64 tensor library with reverse-mode differentiation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abota;
pub mod cost;
pub mod docs;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod kernels;
pub mod lfsa;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use abota::{
    abota_resolve, assign_scene, assignment_cost, ciou, iou, match_candidates, Assignment, AssignmentResult, BBox,
    CellKey, GridLevel, GroundTruth, MatchCandidate, Prediction, TopEntry,
};
pub use cost::{compare_heads, conv_cost, CostReport, HeadComparison, LayerCost};
pub use error::{Error, Result};
pub use heads::{
    build_coupled_head, build_decoupled_head, build_efficient_head, HeadSpec, HeadVariant, LayerGraph, LevelSpec,
};
pub use lfsa::{col_attention, lfsa_cost, lfsa_forward, lfsa_oracle, row_attention, LfsaParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
