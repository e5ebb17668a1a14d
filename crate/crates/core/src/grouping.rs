//! Head partitions (adjacent, interval, random), their row-level expansion,
//! and the shape-aware learning-rate transfer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingRule {
    /// Consecutive heads share a group.
    Adjacent,
    /// Group `j` is `{j, j+K, …}` with stride `K = H/g`.
    Interval,
    /// Seeded uniform permutation chunked into runs of `g`.
    ///
    /// With `resample_each_step` the permutation is drawn from ChaCha8 stream
    /// `step` of `seed`; otherwise stream 0 is used for every step.
    Random { seed: u64, resample_each_step: bool },
}

impl GroupingRule {
    pub fn name(&self) -> &'static str {
        match self {
            GroupingRule::Adjacent => "adjacent",
            GroupingRule::Interval => "interval",
            GroupingRule::Random { .. } => "random",
        }
    }

    pub fn resamples(&self) -> bool {
        matches!(self, GroupingRule::Random { resample_each_step: true, .. })
    }
}

/// Partition of `num_heads` heads into groups of `group_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadGrouping {
    num_heads: usize,
    group_size: usize,
    rule: GroupingRule,
    groups: Vec<Vec<usize>>,
}

impl HeadGrouping {
    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn rule(&self) -> GroupingRule {
        self.rule
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Chunks `permutation` into consecutive runs of `group_size`.
    pub fn from_permutation(permutation: &[usize], group_size: usize, rule: GroupingRule) -> Result<Self> {
        let num_heads = permutation.len();
        check_sizes(num_heads, group_size)?;
        let mut seen = vec![false; num_heads];
        for &h in permutation {
            if h >= num_heads || std::mem::replace(&mut seen[h], true) {
                return Err(Error::InvalidConfiguration(format!(
                    "{permutation:?} is not a permutation of 0..{num_heads}"
                )));
            }
        }
        let groups = permutation.chunks(group_size).map(<[usize]>::to_vec).collect();
        Ok(Self { num_heads, group_size, rule, groups })
    }

    /// Rows of a stacked `num_heads · head_dim` projection owned by each group.
    pub fn row_partition(&self, head_dim: usize) -> RowPartition {
        heads_to_rows(self, head_dim)
    }
}

fn check_sizes(num_heads: usize, group_size: usize) -> Result<()> {
    if num_heads == 0 || group_size == 0 {
        return Err(Error::InvalidConfiguration(format!(
            "num_heads ({num_heads}) and group_size ({group_size}) must be positive"
        )));
    }
    if num_heads % group_size != 0 {
        return Err(Error::InvalidConfiguration(format!(
            "group_size {group_size} does not divide num_heads {num_heads}"
        )));
    }
    Ok(())
}

pub fn build_groups(num_heads: usize, group_size: usize, rule: GroupingRule, step: u64) -> Result<HeadGrouping> {
    check_sizes(num_heads, group_size)?;
    let num_groups = num_heads / group_size;
    let groups: Vec<Vec<usize>> = if group_size == num_heads {
        // every rule collapses to the single full partition
        vec![(0..num_heads).collect()]
    } else {
        match rule {
            GroupingRule::Adjacent => (0..num_groups)
                .map(|j| (j * group_size..(j + 1) * group_size).collect())
                .collect(),
            GroupingRule::Interval => (0..num_groups)
                .map(|j| (0..group_size).map(|t| j + t * num_groups).collect())
                .collect(),
            GroupingRule::Random { seed, resample_each_step } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(if resample_each_step { step } else { 0 });
                let mut perm: Vec<usize> = (0..num_heads).collect();
                perm.shuffle(&mut rng);
                return HeadGrouping::from_permutation(&perm, group_size, rule);
            }
        }
    };
    Ok(HeadGrouping { num_heads, group_size, rule, groups })
}

/// Row groups over a matrix. Each row appears in exactly one group; the order
/// of rows inside a group is preserved by split/merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    groups: Vec<Vec<usize>>,
    num_rows: usize,
}

impl RowPartition {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::InvalidPartition("partition has an empty group".into()));
        }
        let num_rows: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; num_rows];
        for &r in groups.iter().flatten() {
            if r >= num_rows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidPartition(format!(
                    "groups do not cover rows 0..{num_rows} exactly once (offending row {r})"
                )));
            }
        }
        Ok(Self { groups, num_rows })
    }

    /// Consecutive blocks of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        Self::new(groups)
    }

    pub fn single(num_rows: usize) -> Result<Self> {
        Self::contiguous(&[num_rows])
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

pub fn heads_to_rows(grouping: &HeadGrouping, head_dim: usize) -> RowPartition {
    assert!(head_dim > 0, "head_dim must be positive");
    let groups = grouping
        .groups
        .iter()
        .map(|g| g.iter().flat_map(|&h| h * head_dim..(h + 1) * head_dim).collect())
        .collect();
    RowPartition { groups, num_rows: grouping.num_heads * head_dim }
}

pub fn split_rows<T: Scalar>(m: &Matrix<T>, partition: &RowPartition) -> Result<Vec<Matrix<T>>> {
    if partition.num_rows != m.rows() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} rows but matrix has {}",
            partition.num_rows,
            m.rows()
        )));
    }
    partition.groups.iter().map(|g| m.select_rows(g)).collect()
}

pub fn merge_rows<T: Scalar>(blocks: &[Matrix<T>], partition: &RowPartition) -> Result<Matrix<T>> {
    if blocks.len() != partition.groups.len() {
        return Err(Error::InvalidPartition(format!(
            "{} blocks for {} groups",
            blocks.len(),
            partition.groups.len()
        )));
    }
    let cols = blocks[0].cols();
    let mut out = Matrix::zeros(partition.num_rows, cols);
    for (i, (block, rows)) in blocks.iter().zip(&partition.groups).enumerate() {
        if block.rows() != rows.len() || block.cols() != cols {
            return Err(Error::InvalidPartition(format!(
                "block {i} is {}x{}, expected {}x{cols}",
                block.rows(),
                block.cols(),
                rows.len()
            )));
        }
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(block.row(k));
        }
    }
    Ok(out)
}

/// `base_lr · sqrt(max(group dims) / max(full dims))`.
pub fn transfer_lr(base_lr: f64, full_shape: (usize, usize), group_shape: (usize, usize)) -> f64 {
    let full = full_shape.0.max(full_shape.1) as f64;
    let group = group_shape.0.max(group_shape.1) as f64;
    base_lr * (group / full).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(h: usize, g: usize, rule: GroupingRule) -> Vec<Vec<usize>> {
        build_groups(h, g, rule, 0).unwrap().groups
    }

    #[test]
    fn worked_examples() {
        assert_eq!(
            groups(12, 3, GroupingRule::Adjacent),
            vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9, 10, 11]]
        );
        assert_eq!(
            groups(12, 3, GroupingRule::Interval),
            vec![vec![0, 4, 8], vec![1, 5, 9], vec![2, 6, 10], vec![3, 7, 11]]
        );
        assert_eq!(
            groups(12, 6, GroupingRule::Interval),
            vec![vec![0, 2, 4, 6, 8, 10], vec![1, 3, 5, 7, 9, 11]]
        );
        let rule = GroupingRule::Random { seed: 0, resample_each_step: true };
        let g = HeadGrouping::from_permutation(&[7, 2, 10, 0, 5, 9, 1, 4, 11, 3, 6, 8], 3, rule).unwrap();
        assert_eq!(g.groups(), &[vec![7, 2, 10], vec![0, 5, 9], vec![1, 4, 11], vec![3, 6, 8]]);
    }

    #[test]
    fn indivisible_group_size_rejected() {
        let err = build_groups(12, 5, GroupingRule::Adjacent, 0).unwrap_err();
        assert!(err.to_string().contains("does not divide"));
        assert!(HeadGrouping::from_permutation(&[0, 0, 1, 2], 2, GroupingRule::Adjacent).is_err());
    }

    #[test]
    fn full_group_collapses_for_every_rule() {
        for rule in [
            GroupingRule::Adjacent,
            GroupingRule::Interval,
            GroupingRule::Random { seed: 9, resample_each_step: true },
        ] {
            assert_eq!(groups(12, 12, rule), vec![(0..12).collect::<Vec<_>>()]);
        }
    }

    #[test]
    fn random_resampling_contract() {
        let fixed = GroupingRule::Random { seed: 3, resample_each_step: false };
        let a = build_groups(12, 3, fixed, 0).unwrap();
        for step in 1..5 {
            assert_eq!(build_groups(12, 3, fixed, step).unwrap(), a);
        }
        let live = GroupingRule::Random { seed: 3, resample_each_step: true };
        let draws: Vec<_> = (0..6).map(|s| build_groups(12, 3, live, s).unwrap().groups).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
        assert_eq!(build_groups(12, 3, live, 4).unwrap().groups, draws[4]);
    }

    #[test]
    fn head_rows() {
        let adj = build_groups(4, 2, GroupingRule::Adjacent, 0).unwrap();
        assert_eq!(heads_to_rows(&adj, 2).groups(), &[vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let int = build_groups(4, 2, GroupingRule::Interval, 0).unwrap();
        assert_eq!(heads_to_rows(&int, 2).groups(), &[vec![0, 1, 4, 5], vec![2, 3, 6, 7]]);
        let all = build_groups(4, 4, GroupingRule::Adjacent, 0).unwrap();
        assert_eq!(heads_to_rows(&all, 3), RowPartition::single(12).unwrap());
    }

    #[test]
    fn split_merge_examples() {
        let eye = Matrix::<f64>::identity(4);
        let p = RowPartition::contiguous(&[2, 2]).unwrap();
        let blocks = split_rows(&eye, &p).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.shape() == (2, 4)));
        assert_eq!(merge_rows(&blocks, &p).unwrap(), eye);

        let m = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let swap = RowPartition::new(vec![vec![1, 0]]).unwrap();
        let blocks = split_rows(&m, &swap).unwrap();
        assert_eq!(blocks[0].row(0), m.row(1));
        assert_eq!(merge_rows(&blocks, &swap).unwrap(), m);

        let whole = split_rows(&m, &RowPartition::single(2).unwrap()).unwrap();
        assert_eq!(whole, vec![m.clone()]);
    }

    #[test]
    fn partition_errors() {
        assert!(RowPartition::new(vec![vec![0, 1], vec![1]]).is_err());
        assert!(RowPartition::new(vec![vec![0, 2]]).is_err());
        let m = Matrix::<f64>::identity(3);
        assert!(split_rows(&m, &RowPartition::single(4).unwrap()).is_err());
        let p = RowPartition::contiguous(&[1, 2]).unwrap();
        let bad = vec![Matrix::<f64>::zeros(1, 3), Matrix::zeros(1, 3)];
        assert!(matches!(merge_rows(&bad, &p), Err(Error::InvalidPartition(_))));
    }

    #[test]
    fn lr_transfer_values() {
        assert_eq!(transfer_lr(0.02, (96, 96), (96, 96)), 0.02);
        assert_eq!(transfer_lr(0.02, (768, 768), (64, 768)), 0.02);
        assert_eq!(transfer_lr(0.02, (768, 768), (384, 768)), 0.02);
        // wide group of a tall matrix: sqrt(384 / 768)
        assert!((transfer_lr(1.0, (768, 384), (384, 384)) - 0.5f64.sqrt()).abs() < 1e-15);
    }
}
