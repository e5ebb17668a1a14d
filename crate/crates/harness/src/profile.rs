//! Rank-ratio and norm-gap diagnostics over row partitions.

use groupmuon_core::{numerical_rank, whiten_by_partition, Matrix64, RankPolicy, RowPartition, Whitening};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub step: u64,
    pub parameter_id: String,
    /// Numerical rank over the row dimension.
    pub full_rank_ratio: f64,
    /// Per group, rank over the group's row count.
    pub group_rank_ratios: Vec<f64>,
    /// Σ rank(G_i) / rank(G); 0 when G is zero.
    pub sum_group_rank_over_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGapRecord {
    pub step: u64,
    pub parameter_id: String,
    pub full_update_sq_fro: f64,
    pub grouped_update_sq_fro: f64,
    pub gap: f64,
}

fn check_partition(m: &Matrix64, partition: &RowPartition) -> Result<()> {
    if partition.num_rows() != m.rows() {
        return Err(HarnessError::Core(groupmuon_core::Error::InvalidPartition(format!(
            "partition covers {} rows, matrix has {}",
            partition.num_rows(),
            m.rows()
        ))));
    }
    Ok(())
}

pub fn profile_ranks(m: &Matrix64, partition: &RowPartition, policy: RankPolicy) -> Result<RankProfile> {
    check_partition(m, partition)?;
    let full = numerical_rank(m, policy)?;
    let mut ratios = Vec::with_capacity(partition.num_groups());
    let mut sum = 0;
    for rows in partition.groups() {
        let r = numerical_rank(&m.select_rows(rows)?, policy)?;
        sum += r;
        ratios.push(r as f64 / rows.len() as f64);
    }
    Ok(RankProfile {
        step: 0,
        parameter_id: String::new(),
        full_rank_ratio: full as f64 / m.rows() as f64,
        group_rank_ratios: ratios,
        sum_group_rank_over_full: if full == 0 { 0.0 } else { sum as f64 / full as f64 },
    })
}

/// Whitens `momentum` whole and per group with the same operator.
pub fn profile_norm_gap(momentum: &Matrix64, partition: &RowPartition, whitening: &Whitening) -> Result<NormGapRecord> {
    check_partition(momentum, partition)?;
    let full = whitening.apply(momentum)?.frobenius_norm_sq();
    let grouped = if partition.num_groups() == 1 {
        full
    } else {
        whiten_by_partition(momentum, partition, whitening)?.frobenius_norm_sq()
    };
    Ok(NormGapRecord {
        step: 0,
        parameter_id: String::new(),
        full_update_sq_fro: full,
        grouped_update_sq_fro: grouped,
        gap: grouped - full,
    })
}

/// Merges a rank profile and a norm gap for one parameter into a metrics row.
pub fn profile_record(ranks: &RankProfile, gap: &NormGapRecord) -> MetricsRecord {
    let mut r = MetricsRecord::profile(ranks.step, &ranks.parameter_id);
    r.full_rank_ratio = Some(ranks.full_rank_ratio);
    r.sum_group_rank_over_full = Some(ranks.sum_group_rank_over_full);
    r.full_update_sq_fro = Some(gap.full_update_sq_fro);
    r.grouped_update_sq_fro = Some(gap.grouped_update_sq_fro);
    r.gap = Some(gap.gap);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::gaussian;
    use groupmuon_core::{aligned_instance, NewtonSchulzConfig};

    #[test]
    fn gaussian_is_full_row_rank() {
        let p = profile_ranks(&gaussian(12, 64, 5), &RowPartition::contiguous(&[3; 4]).unwrap(), RankPolicy::Relative(1e-10)).unwrap();
        assert_eq!(p.full_rank_ratio, 1.0);
        assert!(p.group_rank_ratios.iter().all(|&r| r == 1.0));
        assert_eq!(p.sum_group_rank_over_full, 1.0);
    }

    #[test]
    fn aligned_rank_one() {
        let (inst, g) = aligned_instance::<f64>(4, &[1.0, 2.0, -1.0, 0.5], &[3; 4], 10, 1).unwrap();
        let p = profile_ranks(&g, &inst.partition(), RankPolicy::Relative(1e-10)).unwrap();
        assert_eq!(p.full_rank_ratio, 1.0 / 12.0);
        assert_eq!(p.sum_group_rank_over_full, 4.0);
    }

    #[test]
    fn zero_matrix_ratios_are_zero() {
        let p = profile_ranks(&Matrix64::zeros(6, 4), &RowPartition::contiguous(&[2; 3]).unwrap(), RankPolicy::default()).unwrap();
        assert_eq!(p.full_rank_ratio, 0.0);
        assert_eq!(p.sum_group_rank_over_full, 0.0);
        assert!(p.group_rank_ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn single_partition_gap_is_zero() {
        let w = Whitening::NewtonSchulz(NewtonSchulzConfig::default());
        let r = profile_norm_gap(&gaussian(8, 16, 2), &RowPartition::single(8).unwrap(), &w).unwrap();
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn exact_polar_gap_is_rank_gap() {
        let m = gaussian(12, 30, 8);
        let r = profile_norm_gap(&m, &RowPartition::contiguous(&[4; 3]).unwrap(), &Whitening::ExactPolar).unwrap();
        assert!((r.full_update_sq_fro - 12.0).abs() < 1e-6);
        assert!((r.grouped_update_sq_fro - 12.0).abs() < 1e-6);
        assert!(r.gap.abs() < 1e-6);
        // rank-deficient: one rank-1 matrix split in three
        let m = gaussian(12, 1, 3).matmul(&gaussian(1, 30, 4)).unwrap();
        let r = profile_norm_gap(&m, &RowPartition::contiguous(&[4; 3]).unwrap(), &Whitening::ExactPolar).unwrap();
        assert!((r.gap - 2.0).abs() < 1e-6, "{}", r.gap);
    }

    #[test]
    fn mismatched_partition() {
        let err = profile_ranks(&gaussian(5, 5, 0), &RowPartition::single(4).unwrap(), RankPolicy::default());
        assert!(err.is_err());
    }
}
