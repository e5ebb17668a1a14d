//! Muon at three granularities (full matrix, head-wise, head-grouped) and the
//! one-step descent comparison between them.
//!
//! All numerical code is generic over [`Scalar`], implemented for `f32` and
//! `f64`. The `*64` / `*32` aliases below are the concrete types most callers
//! want.

pub mod criterion;
pub mod error;
pub mod grouping;
pub mod matcore;
pub mod matrix;
pub mod optimizer;
pub mod scalar;

pub use criterion::{
    aligned_closed_form, aligned_instance, criterion_holds, descent_bounds, practical_norm_cost,
    AlignedInstance, CriterionParams, CriterionReport,
};
pub use error::{Error, Result};
pub use grouping::{
    build_groups, heads_to_rows, merge_rows, split_rows, transfer_lr, GroupingRule, HeadGrouping,
    RowPartition,
};
pub use matcore::{
    compact_svd, exact_polar, frobenius_inner, newton_schulz, nuclear_norm, numerical_rank,
    NewtonSchulzConfig, RankPolicy, SvdResult, Whitening,
};
pub use matrix::Matrix;
pub use optimizer::{
    adaptive_step, group_muon_step, muon_step_full, muon_step_partitioned, whiten_by_partition,
    AdaptiveState, Granularity, MuonState,
};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type SvdResult64 = SvdResult<f64>;
pub type MuonState64 = MuonState<f64>;
pub type MuonState32 = MuonState<f32>;
pub type AdaptiveState64 = AdaptiveState<f64>;
pub type AlignedInstance64 = AlignedInstance<f64>;
