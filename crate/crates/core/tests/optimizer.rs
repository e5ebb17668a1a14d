mod common;

use common::*;
use groupmuon_core::{
    build_groups, exact_polar, group_muon_step, muon_step_full, muon_step_partitioned, newton_schulz,
    numerical_rank, split_rows, whiten_by_partition, GroupingRule, Matrix64, MuonState, NewtonSchulzConfig,
    RankPolicy, RowPartition, Whitening,
};
use proptest::prelude::*;

#[test]
fn degenerate_partition_equivalence_over_draws() {
    for draw in 0..50u64 {
        let heads = [1usize, 2, 3, 4, 6][draw as usize % 5];
        let rows = heads * (1 + draw as usize % 3);
        let cols = 3 + draw as usize % 7;
        let mu = 0.9 * (draw % 4) as f64 / 3.0;
        let mut full = MuonState::new((rows, cols), mu, 0.05, Whitening::default()).unwrap();
        full.momentum = gaussian(rows, cols, 1000 + draw);
        let rule = if draw % 2 == 0 {
            GroupingRule::Adjacent
        } else {
            GroupingRule::Random { seed: draw, resample_each_step: true }
        };
        let mut grouped = full.clone().with_grouping(build_groups(heads, heads, rule, 0).unwrap()).unwrap();
        let w = gaussian(rows, cols, 2000 + draw);
        let g = gaussian(rows, cols, 3000 + draw);
        let a = muon_step_full(&w, &g, &mut full).unwrap();
        let b = group_muon_step(&w, &g, &mut grouped, draw).unwrap();
        assert_eq!(a, b, "draw {draw}");
        assert_eq!(full.momentum, grouped.momentum);
    }
}

#[test]
fn block_diagonal_orthogonal_rows_match_full_polar() {
    // G = diag-blocks(G1, G2) on disjoint column ranges: per-block polar
    // equals the corresponding blocks of the full polar.
    let g1 = gaussian(4, 8, 1);
    let g2 = gaussian(4, 8, 2);
    let g = Matrix64::from_fn(8, 16, |i, j| match (i < 4, j < 8) {
        (true, true) => g1[(i, j)],
        (false, false) => g2[(i - 4, j - 8)],
        _ => 0.0,
    });
    let grouping = build_groups(2, 1, GroupingRule::Adjacent, 0).unwrap();
    let mut st = MuonState::new((8, 16), 0.0, 1.0, Whitening::ExactPolar)
        .unwrap()
        .with_grouping(grouping)
        .unwrap();
    let out = group_muon_step(&Matrix64::zeros(8, 16), &g, &mut st, 0).unwrap();
    let full = exact_polar(&g).unwrap();
    assert!(out.add(&full).unwrap().max_abs() < 1e-10);
}

#[test]
fn head_wise_newton_schulz_blocks() {
    let heads = 6;
    let head_dim = 4;
    let grouping = build_groups(heads, 1, GroupingRule::Interval, 0).unwrap();
    let cfg = NewtonSchulzConfig::default();
    let mut st = MuonState::new((heads * head_dim, 20), 0.0, 1.0, Whitening::NewtonSchulz(cfg))
        .unwrap()
        .with_grouping(grouping)
        .unwrap();
    let g = gaussian(heads * head_dim, 20, 3);
    let out = group_muon_step(&Matrix64::zeros(heads * head_dim, 20), &g, &mut st, 0).unwrap();
    for h in 0..heads {
        let rows: Vec<usize> = (h * head_dim..(h + 1) * head_dim).collect();
        let direct = newton_schulz(&g.select_rows(&rows).unwrap(), &cfg).unwrap();
        assert_eq!(out.select_rows(&rows).unwrap(), direct.scale(-1.0));
    }
}

#[test]
fn one_step_descent_on_unit_quadratic() {
    // L(W) = ½‖W‖², β = 1: realized decrease ≥ η‖G‖_* − η² rank/2
    let w = gaussian(6, 9, 4);
    let eta = 0.3;
    let mut st = MuonState::new((6, 9), 0.0, eta, Whitening::ExactPolar).unwrap();
    let next = muon_step_full(&w, &w, &mut st).unwrap();
    let realized = 0.5 * w.frobenius_norm_sq() - 0.5 * next.frobenius_norm_sq();
    let nuclear: f64 = oracle_singular_values(&w).iter().sum();
    let bound = eta * nuclear - eta * eta * 6.0 / 2.0;
    assert!(realized >= bound - 1e-8, "{realized} < {bound}");
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..4, 2usize..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn momentum_update_commutes_with_split((heads, hd, cols) in dims(), mu in 0.0f64..0.99, seed in any::<u64>()) {
        let rows = heads * hd;
        let m0 = gaussian(rows, cols, seed);
        let g = gaussian(rows, cols, seed ^ 7);
        let p = build_groups(heads, 1, GroupingRule::Adjacent, 0).unwrap().row_partition(hd);
        let mut st = MuonState::new((rows, cols), mu, 0.1, Whitening::ExactPolar).unwrap();
        st.momentum = m0.clone();
        st.accumulate(&g).unwrap();
        let after_full = split_rows(&st.momentum, &p).unwrap();
        let blockwise: Vec<Matrix64> = split_rows(&m0, &p).unwrap().iter().zip(split_rows(&g, &p).unwrap())
            .map(|(m, gb)| Matrix64::from_fn(m.rows(), m.cols(), |i, j| mu * m[(i, j)] + gb[(i, j)]))
            .collect();
        prop_assert_eq!(after_full, blockwise);
    }

    #[test]
    fn whitening_is_local_to_groups((heads, hd, cols) in dims(), seed in any::<u64>(), group_size_idx in 0usize..3) {
        let heads = heads * 2;
        let gs = [1, 2, heads][group_size_idx];
        let rows = heads * hd;
        let grouping = build_groups(heads, gs, GroupingRule::Interval, 0).unwrap();
        let target = grouping.groups()[0].clone();
        let p = grouping.row_partition(hd);
        let mut st_a = MuonState::new((rows, cols), 0.5, 0.1, Whitening::default()).unwrap()
            .with_grouping(grouping.clone()).unwrap();
        st_a.momentum = gaussian(rows, cols, seed ^ 3);
        let mut st_b = st_a.clone();
        let g = gaussian(rows, cols, seed);
        // perturb every row outside group 0
        let owned: Vec<usize> = p.groups()[0].clone();
        let mut g2 = g.clone();
        for r in 0..rows {
            if !owned.contains(&r) {
                for x in g2.row_mut(r) { *x += 3.0; }
            }
        }
        let w = gaussian(rows, cols, seed ^ 5);
        let a = group_muon_step(&w, &g, &mut st_a, 0).unwrap();
        let b = group_muon_step(&w, &g2, &mut st_b, 0).unwrap();
        prop_assert_eq!(a.select_rows(&owned).unwrap(), b.select_rows(&owned).unwrap());
        prop_assert!(target.len() == gs);
    }

    #[test]
    fn grouped_update_norm_is_sum_of_ranks(heads in 1usize..6, hd in 1usize..5, cols in 1usize..12, seed in any::<u64>()) {
        let rows = heads * hd;
        let m = gaussian(rows, cols, seed);
        let p = build_groups(heads, 1, GroupingRule::Adjacent, 0).unwrap().row_partition(hd);
        let o = whiten_by_partition(&m, &p, &Whitening::ExactPolar).unwrap();
        let rank_sum: usize = split_rows(&m, &p).unwrap().iter()
            .map(|b| numerical_rank(b, RankPolicy::default()).unwrap()).sum();
        prop_assert!((o.frobenius_norm_sq() - rank_sum as f64).abs() < 1e-6);
    }

    #[test]
    fn partitioned_step_with_one_block_matches_full(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut a = MuonState::new((rows, cols), 0.9, 0.1, Whitening::default()).unwrap();
        a.momentum = gaussian(rows, cols, seed ^ 1);
        let mut b = a.clone();
        let w = gaussian(rows, cols, seed ^ 2);
        let g = gaussian(rows, cols, seed ^ 3);
        let x = muon_step_full(&w, &g, &mut a).unwrap();
        let y = muon_step_partitioned(&w, &g, &mut b, &RowPartition::single(rows).unwrap()).unwrap();
        prop_assert_eq!(x, y);
    }
}
