//! Brute-force ground truth for desk-scale instances.
//!
//! Only per-type copy counts matter for an integral SPLC allocation (the
//! prefix form is optimal for each count), so the optimum is found by
//! enumerating, type by type, every count vector `(c_1, .., c_n)` with
//! `sum_a c_a <= k_i`.

use std::collections::BTreeMap;

use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance, NswValue, Triplet, EPS_NUM};

pub const DEFAULT_LIMIT: f64 = 1e7;

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub allocation: Allocation,
    pub counts: Vec<Vec<usize>>,
    pub value: NswValue,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, t| acc * (n - t) as f64 / (t + 1) as f64)
}

/// Number of count vectors visited by [`solve_exact`].
pub fn search_space(inst: &Instance) -> f64 {
    inst.supplies().iter().map(|&k| binomial(k + inst.n(), inst.n())).product()
}

/// Count vectors of length `n` with sum at most `k`, in lexicographic order.
fn count_vectors(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            rec(prefix, n, left - c, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), n, k, &mut out);
    out
}

fn log_product(util: &[f64]) -> f64 {
    if util.iter().any(|&v| v <= 0.0) {
        f64::NEG_INFINITY
    } else {
        util.iter().map(|v| v.ln()).sum()
    }
}

/// Maximizes `prod_a u_a(x)` over integral allocations by enumeration.
///
/// Ties keep the first maximizer in lexicographic order of per-type count vectors.
pub fn solve_exact(inst: &Instance, limit: f64) -> Result<ExactSolution> {
    let size = search_space(inst);
    if size > limit {
        return Err(NswError::SearchSpaceTooLarge { size, limit });
    }
    let n = inst.n();
    let per_type: Vec<Vec<Vec<usize>>> =
        inst.supplies().iter().map(|&k| count_vectors(n, k)).collect();

    struct Search<'a> {
        inst: &'a Instance,
        per_type: &'a [Vec<Vec<usize>>],
        choice: Vec<usize>,
        best_choice: Option<Vec<usize>>,
        best: f64,
    }

    impl Search<'_> {
        fn run(&mut self, i: usize, util: &mut [f64]) {
            if i == self.per_type.len() {
                let v = log_product(util);
                if self.best_choice.is_none() || v > self.best {
                    self.best = v;
                    self.best_choice = Some(self.choice.clone());
                }
                return;
            }
            for (idx, cv) in self.per_type[i].iter().enumerate() {
                for (a, &c) in cv.iter().enumerate() {
                    util[a] += self.inst.prefix_utility(a, i, c);
                }
                self.choice.push(idx);
                self.run(i + 1, util);
                self.choice.pop();
                for (a, &c) in cv.iter().enumerate() {
                    util[a] -= self.inst.prefix_utility(a, i, c);
                }
            }
        }
    }

    let mut search = Search {
        inst,
        per_type: &per_type,
        choice: Vec::with_capacity(inst.m()),
        best_choice: None,
        best: f64::NEG_INFINITY,
    };
    search.run(0, &mut vec![0.0; n]);
    let choice = search.best_choice.expect("at least one allocation exists");
    let counts: Vec<Vec<usize>> = (0..n)
        .map(|a| (0..inst.m()).map(|i| per_type[i][choice[i]][a]).collect())
        .collect();
    let allocation = Allocation::from_counts(inst, &counts)?;
    let util: Vec<f64> = (0..n).map(|a| inst.utility_of_counts(a, &counts[a])).collect();
    Ok(ExactSolution { allocation, counts, value: NswValue::from_utilities(&util) })
}

/// One categorical draw for a single item type: a triplet or the slack outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Draw {
    Triplet(Triplet, f64),
    Slack(f64),
}

impl Draw {
    fn prob(&self) -> f64 {
        match *self {
            Draw::Triplet(_, p) | Draw::Slack(p) => p,
        }
    }
}

/// Support of one draw for type `i`; triplets in `force` are kept even with zero mass.
fn draw_support(inst: &Instance, x: &Allocation, i: usize, force: &[Triplet]) -> Result<Vec<Draw>> {
    let k = inst.supply(i) as f64;
    let mut support = Vec::new();
    let mut total = 0.0;
    for a in 0..inst.n() {
        for j in 0..inst.supply(i) {
            let t = Triplet::new(a, i, j);
            let v = x.get(t);
            total += v;
            if v > 0.0 || force.contains(&t) {
                support.push(Draw::Triplet(t, v / k));
            }
        }
    }
    if total > k + 1e-6 {
        return Err(NswError::Sampling(format!("type {i} allocates {total} > k = {k}")));
    }
    let slack = 1.0 - total / k;
    if slack > EPS_NUM {
        support.push(Draw::Slack(slack));
    }
    Ok(support)
}

/// Visits every length-`draws` sequence over `support` with its probability.
fn for_each_sequence(support: &[Draw], draws: usize, mut f: impl FnMut(&[usize], f64)) {
    let mut idx = vec![0usize; draws];
    if support.is_empty() {
        return;
    }
    loop {
        let p: f64 = idx.iter().map(|&s| support[s].prob()).product();
        f(&idx, p);
        let mut pos = draws;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < support.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn outcome_count(inst: &Instance, supports: &[Vec<Draw>]) -> f64 {
    supports
        .iter()
        .enumerate()
        .map(|(i, s)| (s.len() as f64).powi(inst.supply(i) as i32))
        .product()
}

/// Exact `E[prod_a u_a]` of the independent-sampling rounding applied to `x`.
///
/// Every sequence of draws is enumerated; a draw of `(a, i, j)` gives agent
/// `a` one more copy of type `i`, credited by prefix marginals.
pub fn exact_expected_welfare(inst: &Instance, x: &Allocation, limit: f64) -> Result<f64> {
    x.check_feasible(inst)?;
    let n = inst.n();
    let supports: Vec<Vec<Draw>> =
        (0..inst.m()).map(|i| draw_support(inst, x, i, &[])).collect::<Result<_>>()?;
    let size = outcome_count(inst, &supports);
    if size > limit {
        return Err(NswError::SearchSpaceTooLarge { size, limit });
    }
    // Per type: distribution over agent copy-count vectors.
    let dists: Vec<Vec<(Vec<usize>, f64)>> = supports
        .iter()
        .enumerate()
        .map(|(i, support)| {
            let mut dist: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for_each_sequence(support, inst.supply(i), |seq, p| {
                let mut counts = vec![0usize; n];
                for &s in seq {
                    if let Draw::Triplet(t, _) = support[s] {
                        counts[t.agent] += 1;
                    }
                }
                *dist.entry(counts).or_insert(0.0) += p;
            });
            dist.into_iter().collect()
        })
        .collect();

    fn rec(inst: &Instance, dists: &[Vec<(Vec<usize>, f64)>], i: usize, counts: &mut Vec<Vec<usize>>, p: f64) -> f64 {
        if i == dists.len() {
            return p * (0..inst.n()).map(|a| inst.utility_of_counts(a, &counts[a])).product::<f64>();
        }
        let mut total = 0.0;
        for (cv, q) in &dists[i] {
            for (a, &c) in cv.iter().enumerate() {
                counts[a][i] = c;
            }
            total += rec(inst, dists, i + 1, counts, p * q);
        }
        total
    }
    let mut counts = vec![vec![0usize; inst.m()]; n];
    Ok(rec(inst, &dists, 0, &mut counts, 1.0))
}

/// Exact `P[every triplet of S is sampled at least once]` by enumerating draw sequences.
pub fn exact_inclusion_probability(inst: &Instance, x: &Allocation, set: &[Triplet], limit: f64) -> Result<f64> {
    x.check_feasible(inst)?;
    for &t in set {
        inst.check_triplet(t)?;
    }
    let supports: Vec<Vec<Draw>> =
        (0..inst.m()).map(|i| draw_support(inst, x, i, set)).collect::<Result<_>>()?;
    let size = outcome_count(inst, &supports);
    if size > limit {
        return Err(NswError::SearchSpaceTooLarge { size, limit });
    }
    let mut prob = 1.0;
    for (i, support) in supports.iter().enumerate() {
        let wanted: Vec<usize> = support
            .iter()
            .enumerate()
            .filter_map(|(s, d)| match d {
                Draw::Triplet(t, _) if set.contains(t) => Some(s),
                _ => None,
            })
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let mut p_type = 0.0;
        for_each_sequence(support, inst.supply(i), |seq, p| {
            if wanted.iter().all(|w| seq.contains(w)) {
                p_type += p;
            }
        });
        prob *= p_type;
    }
    Ok(prob)
}
