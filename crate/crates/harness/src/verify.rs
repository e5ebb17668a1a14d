//! The property battery behind `group-muon verify`.

use std::collections::BTreeMap;

use groupmuon_core::{
    aligned_closed_form, aligned_instance, build_groups, criterion_holds, descent_bounds, exact_polar,
    frobenius_inner, group_muon_step, muon_step_full, nuclear_norm, numerical_rank, split_rows,
    whiten_by_partition, CriterionParams, CriterionReport, GroupingRule, Matrix64, MuonState64,
    NewtonSchulzConfig, RankPolicy, RowPartition, Whitening,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::VerifySection;
use crate::error::Result;
use crate::quadratic::{bound_holds, verify_one_step, QuadraticProblem};
use crate::random::gaussian_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub status: Status,
    pub checks: usize,
    pub failures: usize,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Suite {
    name: &'static str,
    checks: usize,
    failures: usize,
    measured: BTreeMap<String, f64>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, checks: 0, failures: 0, measured: BTreeMap::new() }
    }

    fn check(&mut self, ok: bool) {
        self.checks += 1;
        self.failures += usize::from(!ok);
    }

    fn max(&mut self, key: &str, v: f64) {
        let e = self.measured.entry(key.to_string()).or_insert(f64::NEG_INFINITY);
        *e = e.max(v);
    }

    fn set(&mut self, key: &str, v: f64) {
        self.measured.insert(key.to_string(), v);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            status: if self.failures == 0 && self.checks > 0 { Status::Pass } else { Status::Fail },
            checks: self.checks,
            failures: self.failures,
            measured: self.measured,
        }
    }
}

const SHAPES: [(usize, usize); 10] =
    [(2, 2), (3, 7), (7, 3), (8, 8), (16, 4), (12, 64), (32, 32), (24, 96), (64, 64), (64, 256)];

/// A random matrix from `SHAPES`; every third draw is rank-deficient.
fn draw(rng: &mut ChaCha8Rng, i: usize) -> Matrix64 {
    let (r, c) = SHAPES[i % SHAPES.len()];
    if i % 3 == 2 && r.min(c) > 1 {
        let k = rng.random_range(1..r.min(c));
        let a = gaussian_from(r, k, rng);
        a.matmul(&gaussian_from(k, c, rng)).expect("inner dims agree")
    } else {
        gaussian_from(r, c, rng)
    }
}

/// Contiguous partition of `rows` into 1..=rows random pieces.
fn random_partition(rng: &mut ChaCha8Rng, rows: usize) -> RowPartition {
    let pieces = rng.random_range(1..=rows.min(6));
    let mut cuts: Vec<usize> = (1..rows).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(pieces - 1).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(pieces);
    let mut last = 0;
    for c in cuts.into_iter().chain([rows]) {
        sizes.push(c - last);
        last = c;
    }
    RowPartition::contiguous(&sizes).expect("positive sizes")
}

pub fn polar_identities(draws: usize, seed: u64) -> Result<SuiteResult> {
    let mut s = Suite::new("polar_identities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..draws {
        let g = draw(&mut rng, i);
        let p = exact_polar(&g)?;
        let nuc = nuclear_norm(&g)?;
        let rel = (frobenius_inner(&g, &p)? - nuc).abs() / nuc;
        let rank = numerical_rank(&g, RankPolicy::MachineEpsilon)? as f64;
        let abs = (p.frobenius_norm_sq() - rank).abs();
        s.check(rel <= 1e-8 && abs <= 1e-6);
        s.max("max_inner_rel_err", rel);
        s.max("max_norm_rank_abs_err", abs);
    }
    Ok(s.finish())
}

pub fn subadditivity(draws: usize, seed: u64, reports: &mut Vec<CriterionReport>) -> Result<SuiteResult> {
    let mut s = Suite::new("subadditivity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CriterionParams::new(1.0, 0.1)?;
    for i in 0..draws {
        let g = draw(&mut rng, i);
        let p = random_partition(&mut rng, g.rows());
        let r = descent_bounds(&g, &p, &params)?;
        let slack = r.gain / r.full_nuclear.max(f64::MIN_POSITIVE);
        s.check(r.gain >= -1e-8 * r.full_nuclear);
        s.max("max_relative_violation", -slack);
        reports.push(r);
    }
    // blocks on disjoint columns: the nuclear norm splits exactly
    let b1 = gaussian_from(3, 5, &mut rng);
    let b2 = gaussian_from(4, 6, &mut rng);
    let g = Matrix64::from_fn(7, 11, |i, j| match (i < 3, j < 5) {
        (true, true) => b1[(i, j)],
        (false, false) => b2[(i - 3, j - 5)],
        _ => 0.0,
    });
    let r = descent_bounds(&g, &RowPartition::contiguous(&[3, 4])?, &params)?;
    s.check(r.gain.abs() < 1e-6 * r.full_nuclear);
    s.set("orthogonal_blocks_gain", r.gain);
    reports.push(r);
    Ok(s.finish())
}

pub fn bound_validity(draws: usize, seed: u64, reports: &mut Vec<CriterionReport>) -> Result<SuiteResult> {
    let mut s = Suite::new("bound_validity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for i in 0..draws.max(100) {
        let beta = [0.5, 1.0, 4.0][i % 3];
        let eta = [0.01, 0.1, 0.5][(i / 3) % 3];
        let (rows, cols) = SHAPES[i % 8];
        let target = gaussian_from(rows, cols, &mut rng);
        let w0 = gaussian_from(rows, cols, &mut rng);
        let problem = QuadraticProblem::new(target, beta)?;
        let full = RowPartition::single(rows)?;
        let grouped = random_partition(&mut rng, rows);
        for p in [&full, &grouped] {
            let (realized, bound) = verify_one_step(&problem, &w0, eta, p)?;
            s.check(bound_holds(realized, bound));
            worst = worst.min((realized - bound) / (1.0 + bound.abs()));
        }
        reports.push(descent_bounds(&problem.gradient(&w0)?, &grouped, &CriterionParams::new(beta, eta)?)?);
    }
    s.set("min_normalized_slack", worst);
    Ok(s.finish())
}

pub fn criterion_equivalence(reports: &[CriterionReport]) -> SuiteResult {
    let mut s = Suite::new("criterion_equivalence");
    let mut favored = 0;
    for r in reports {
        s.check(criterion_holds(r) == (r.d_grp > r.d_all) && r.grouping_favored == criterion_holds(r));
        favored += usize::from(criterion_holds(r));
    }
    s.set("reports", reports.len() as f64);
    s.set("grouping_favored", favored as f64);
    s.finish()
}

pub fn aligned_closed_forms(seed: u64) -> Result<SuiteResult> {
    let mut s = Suite::new("aligned_closed_forms");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CriterionParams::new(1.0, 1.0)?;
    for k in [1usize, 2, 4, 8] {
        for rep in 0..5 {
            let strengths: Vec<f64> = (0..k)
                .map(|_| {
                    let a: f64 = rng.random_range(0.1..3.0);
                    if rng.random_bool(0.5) { a } else { -a }
                })
                .collect();
            let rows: Vec<usize> = (0..k).map(|_| rng.random_range(1..5)).collect();
            let (inst, g) = aligned_instance(k, &strengths, &rows, 16, seed ^ (k * 31 + rep) as u64)?;
            let r = descent_bounds(&g, &inst.partition(), &params)?;
            let (gain, gap) = aligned_closed_form(&strengths);
            s.check((r.gain - gain).abs() <= 1e-8 && r.rank_gap() == gap as i64);
            s.max("max_gain_err", (r.gain - gain).abs());
        }
        let a = 1.5;
        let (inst, g) = aligned_instance(k, &vec![a; k], &vec![2; k], 16, seed)?;
        let r = descent_bounds(&g, &inst.partition(), &params)?;
        let expected = a * (k as f64 - (k as f64).sqrt());
        s.check((r.gain - expected).abs() <= 1e-8);
        s.max("max_gain_err", (r.gain - expected).abs());
    }
    let (inst, g) = aligned_instance(4, &[1.0; 4], &[2; 4], 16, seed)?;
    let r = descent_bounds(&g, &inst.partition(), &params)?;
    s.check((r.gain - 2.0).abs() <= 1e-8 && r.rank_gap() == 3);
    s.set("k4_a1_gain", r.gain);
    s.set("k4_a1_rank_gap", r.rank_gap() as f64);
    Ok(s.finish())
}

pub fn grouping_golden() -> Result<SuiteResult> {
    let mut s = Suite::new("grouping_golden");
    let h = 12;
    for g in [1, 2, 3, 4, 6, 12] {
        let adjacent: Vec<Vec<usize>> = (0..h / g).map(|j| (j * g..(j + 1) * g).collect()).collect();
        let stride = h / g;
        let interval: Vec<Vec<usize>> = (0..stride).map(|j| (0..g).map(|t| j + t * stride).collect()).collect();
        s.check(build_groups(h, g, GroupingRule::Adjacent, 0)?.groups() == adjacent.as_slice());
        s.check(build_groups(h, g, GroupingRule::Interval, 0)?.groups() == interval.as_slice());
    }
    let g3 = build_groups(h, 3, GroupingRule::Interval, 0)?;
    s.check(g3.groups() == [vec![0, 4, 8], vec![1, 5, 9], vec![2, 6, 10], vec![3, 7, 11]]);
    let g6 = build_groups(h, 6, GroupingRule::Interval, 0)?;
    s.check(g6.groups() == [vec![0, 2, 4, 6, 8, 10], vec![1, 3, 5, 7, 9, 11]]);
    Ok(s.finish())
}

pub fn degenerate_equivalence(seed: u64) -> Result<SuiteResult> {
    let mut s = Suite::new("degenerate_equivalence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = 4;
    let rules = [GroupingRule::Adjacent, GroupingRule::Interval, GroupingRule::Random { seed, resample_each_step: true }];
    for i in 0..50 {
        let (rows, cols) = (heads * rng.random_range(1..5), rng.random_range(2..20));
        let w = gaussian_from(rows, cols, &mut rng);
        let m0 = gaussian_from(rows, cols, &mut rng);
        let g = gaussian_from(rows, cols, &mut rng);
        let whitening = if i % 2 == 0 { Whitening::NewtonSchulz(NewtonSchulzConfig::default()) } else { Whitening::ExactPolar };
        let mut full = MuonState64::new((rows, cols), 0.95, 0.02, whitening)?;
        full.momentum = m0.clone();
        let mut grouped = MuonState64::new((rows, cols), 0.95, 0.02, whitening)?
            .with_grouping(build_groups(heads, heads, rules[i % 3], 0)?)?;
        grouped.momentum = m0;
        let a = muon_step_full(&w, &g, &mut full)?;
        let b = group_muon_step(&w, &g, &mut grouped, i as u64)?;
        s.check(a == b && full.momentum == grouped.momentum);
    }
    Ok(s.finish())
}

pub fn norm_gap(seed: u64) -> Result<SuiteResult> {
    let mut s = Suite::new("norm_gap");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = RowPartition::contiguous(&[8; 12])?;
    let ns = Whitening::NewtonSchulz(NewtonSchulzConfig::default());
    let draws = 20;
    let mut positive = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..draws {
        let m = gaussian_from(96, 96, &mut rng);
        let full = ns.apply(&m)?.frobenius_norm_sq();
        let grouped = whiten_by_partition(&m, &heads, &ns)?.frobenius_norm_sq();
        positive += usize::from(grouped > full);
        min_gap = min_gap.min(grouped - full);
    }
    let fraction = positive as f64 / draws as f64;
    s.check(fraction >= 0.9);
    s.set("positive_fraction", fraction);
    s.set("min_gap", min_gap);
    // exact polar: the gap is the rank gap
    for rank in [96usize, 5] {
        let m = if rank == 96 {
            gaussian_from(96, 96, &mut rng)
        } else {
            gaussian_from(96, rank, &mut rng).matmul(&gaussian_from(rank, 96, &mut rng))?
        };
        let full = exact_polar(&m)?.frobenius_norm_sq();
        let grouped = whiten_by_partition(&m, &heads, &Whitening::ExactPolar)?.frobenius_norm_sq();
        let r = numerical_rank(&m, RankPolicy::MachineEpsilon)?;
        let rs: usize = split_rows(&m, &heads)?
            .iter()
            .map(|b| numerical_rank(b, RankPolicy::MachineEpsilon))
            .sum::<std::result::Result<usize, _>>()?;
        let err = ((grouped - full) - (rs as f64 - r as f64)).abs();
        s.check(err <= 1e-6);
        s.max("exact_polar_gap_err", err);
    }
    Ok(s.finish())
}

/// Runs every suite.
pub fn run_battery(settings: &VerifySection) -> Result<VerifyReport> {
    let mut reports = Vec::new();
    let seed = settings.seed;
    let mut suites = vec![
        polar_identities(settings.draws, seed)?,
        subadditivity(settings.draws, seed.wrapping_add(1), &mut reports)?,
        bound_validity(settings.draws, seed.wrapping_add(2), &mut reports)?,
    ];
    suites.push(criterion_equivalence(&reports));
    suites.push(aligned_closed_forms(seed.wrapping_add(3))?);
    suites.push(grouping_golden()?);
    suites.push(degenerate_equivalence(seed.wrapping_add(4))?);
    suites.push(norm_gap(seed.wrapping_add(5))?);
    let passed = suites.iter().all(|s| s.status == Status::Pass);
    Ok(VerifyReport { passed, suites })
}
