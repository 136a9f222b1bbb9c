//! Independent-sampling rounding of a fractional allocation.
//!
//! For every type `i`, `k_i` independent draws pick triplet `(a, i, j)` with
//! probability `x_aij / k_i` (and nothing with the leftover probability); each
//! draw hands agent `a` one more copy of `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance, Triplet, EPS_NUM};

/// The draws of one rounding run: `draws[i]` has exactly `k_i` entries,
/// `None` standing for the unassigned leftover outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub draws: Vec<Vec<Option<Triplet>>>,
}

impl SampleOutcome {
    /// Copies of each type received by each agent.
    pub fn counts(&self, n: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; self.draws.len()]; n];
        for (i, d) in self.draws.iter().enumerate() {
            for t in d.iter().flatten() {
                counts[t.agent][i] += 1;
            }
        }
        counts
    }
}

/// Cumulative draw table for one type.
struct Table {
    triplets: Vec<Triplet>,
    cumulative: Vec<f64>,
}

fn tables(inst: &Instance, x: &Allocation) -> Result<Vec<Table>> {
    x.check_feasible(inst)?;
    (0..inst.m())
        .map(|i| {
            let k = inst.supply(i) as f64;
            let mut triplets = Vec::new();
            let mut cumulative = Vec::new();
            let mut acc = 0.0;
            for a in 0..inst.n() {
                for j in 0..inst.supply(i) {
                    let v = x.x[a][i][j];
                    if v > 0.0 {
                        acc += v / k;
                        triplets.push(Triplet::new(a, i, j));
                        cumulative.push(acc);
                    }
                }
            }
            if acc > 1.0 + EPS_NUM {
                return Err(NswError::Sampling(format!("draw probabilities of type {i} sum to {acc} > 1")));
            }
            Ok(Table { triplets, cumulative })
        })
        .collect()
}

fn draw_once(tables: &[Table], inst: &Instance, rng: &mut ChaCha8Rng) -> SampleOutcome {
    let draws = tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (0..inst.supply(i))
                .map(|_| {
                    let r: f64 = rng.gen();
                    let pos = t.cumulative.partition_point(|&c| c <= r);
                    t.triplets.get(pos).copied()
                })
                .collect()
        })
        .collect();
    SampleOutcome { draws }
}

/// Random stream of trial `trial`; trial 0 is the stream of [`randomized_round`].
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// One rounding run; copies are credited in prefix order.
pub fn randomized_round(inst: &Instance, x: &Allocation, seed: u64) -> Result<(Allocation, SampleOutcome)> {
    let t = tables(inst, x)?;
    let outcome = draw_once(&t, inst, &mut trial_rng(seed, 0));
    let alloc = Allocation::from_counts(inst, &outcome.counts(inst.n()))?;
    Ok((alloc, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    /// Sampled allocation with the largest product (earliest trial on ties).
    pub best: Allocation,
    pub best_product: f64,
}

/// Monte-Carlo estimate of the expected Nash product of [`randomized_round`].
///
/// Trial `t` uses its own stream of `seed`, so the result does not depend on
/// the number of worker threads.
pub fn estimate_expected_welfare(inst: &Instance, x: &Allocation, trials: usize, seed: u64) -> Result<WelfareEstimate> {
    if trials == 0 {
        return Err(NswError::Sampling("at least one trial is required".into()));
    }
    let t = tables(inst, x)?;
    let n = inst.n();
    let products: Vec<(f64, Vec<Vec<usize>>)> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let counts = draw_once(&t, inst, &mut trial_rng(seed, trial)).counts(n);
            let product = (0..n).map(|a| inst.utility_of_counts(a, &counts[a])).product();
            (product, counts)
        })
        .collect();
    let mean = products.iter().map(|p| p.0).sum::<f64>() / trials as f64;
    let std_error = if trials > 1 {
        let var = products.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    let (best_product, counts) = products
        .into_iter()
        .reduce(|best, cur| if cur.0 > best.0 { cur } else { best })
        .expect("trials > 0");
    Ok(WelfareEstimate { mean, std_error, trials, best: Allocation::from_counts(inst, &counts)?, best_product })
}

/// Checks `|S| = n`, distinct in-range triplets and at most `k_i` per type.
fn check_family_member(inst: &Instance, set: &[Triplet]) -> Result<Vec<usize>> {
    if set.len() != inst.n() {
        return Err(NswError::Sampling(format!("set has {} triplets, expected {}", set.len(), inst.n())));
    }
    let mut per_type = vec![0usize; inst.m()];
    for (s, &t) in set.iter().enumerate() {
        inst.check_triplet(t)?;
        if set[..s].contains(&t) {
            return Err(NswError::Sampling(format!("triplet {t:?} repeated")));
        }
        per_type[t.item] += 1;
    }
    if let Some(i) = (0..inst.m()).find(|&i| per_type[i] > inst.supply(i)) {
        return Err(NswError::Sampling(format!("set holds {} triplets of type {i} > k = {}", per_type[i], inst.supply(i))));
    }
    Ok(per_type)
}

/// Lower bound `prod_S x_aij / k_i * prod_i e^(-e_i) k_i! / (k_i - e_i)!` on the
/// probability that every triplet of `set` is drawn.
pub fn sampling_lower_bound(inst: &Instance, x: &Allocation, set: &[Triplet]) -> Result<f64> {
    x.check_feasible(inst)?;
    let per_type = check_family_member(inst, set)?;
    let draws: f64 = set.iter().map(|&t| x.get(t) / inst.supply(t.item) as f64).product();
    let orderings: f64 = per_type
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let k = inst.supply(i);
            (-(e as f64)).exp() * ((k - e + 1)..=k).map(|v| v as f64).product::<f64>()
        })
        .product();
    Ok(draws * orderings)
}
