//! Rounding a spending-restricted equilibrium to an integral allocation.
//!
//! After normalizing valuations so every bang-per-buck equals 1, the product
//! of `p_i^{k_i}` over high-price types (`p_i > 1`) bounds the optimal Nash
//! welfare from above. The spending graph of the equilibrium is turned into
//! a forest and rounded tree by tree, keeping within a factor 2 of that bound.

pub mod assignment;
pub mod graph;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use graph::{break_cycles, build_spending_graph, pack_units, ItemUnit, Share, SpendingEdge, SpendingGraph};

use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance, EPS_NUM};
use crate::market::SpendingRecord;

/// Divides every marginal of agent `a` by `b_a`.
pub fn normalize(inst: &Instance, b: &[f64]) -> Result<Instance> {
    if let Some(a) = b.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(NswError::InvalidMarketState(format!("bang-per-buck of agent {a} is {}", b[a])));
    }
    let scale: Vec<f64> = b.iter().map(|v| 1.0 / v).collect();
    inst.scaled(&scale)
}

/// Types with `p_i > 1 + ε`.
pub fn high_price_set(p: &[f64]) -> Vec<usize> {
    (0..p.len()).filter(|&i| p[i] > 1.0 + EPS_NUM).collect()
}

/// `prod_{i in H(p)} p_i^{k_i}`, kept in log form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub log: f64,
}

impl UpperBound {
    pub fn product(&self) -> f64 {
        self.log.exp()
    }

    /// The bound on the geometric mean for `n` agents.
    pub fn geometric(&self, n: usize) -> f64 {
        (self.log / n as f64).exp()
    }
}

pub fn upper_bound(p: &[f64], k: &[usize]) -> UpperBound {
    let log = high_price_set(p).into_iter().map(|i| k[i] as f64 * p[i].ln()).sum();
    UpperBound { log }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundingResult {
    pub allocation: Allocation,
    pub counts: Vec<Vec<usize>>,
    /// Set when some agent ends with zero utility.
    pub zero_utility: bool,
}

const RESCUE_BONUS: f64 = 1e6;

/// Rounds a spending forest to an integral allocation.
///
/// Each tree is rooted at its lowest-index agent. Leaf units and units of
/// types with `p_i <= 1/2` go to their parent agent. Every other unit is
/// matched to a distinct agent among its parent and children, maximizing the
/// sum of log utilities (first rescuing as many zero-utility agents as possible).
pub fn round(inst: &Instance, p: &[f64], forest: &SpendingGraph) -> Result<RoundingResult> {
    if !forest.is_forest() {
        return Err(NswError::InvalidSpendingGraph("rounding needs a forest".into()));
    }
    let na = forest.agents;
    let nu = forest.units.len();
    let mut unit_adj: Vec<Vec<usize>> = vec![Vec::new(); nu];
    let mut agent_adj: Vec<Vec<usize>> = vec![Vec::new(); na];
    for e in &forest.edges {
        unit_adj[e.unit].push(e.agent);
        agent_adj[e.agent].push(e.unit);
    }

    let mut unit_parent: Vec<Option<usize>> = vec![None; nu];
    let mut agent_seen = vec![false; na];
    for root in 0..na {
        if agent_seen[root] {
            continue;
        }
        agent_seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &u in &agent_adj[a] {
                if unit_parent[u].is_some() {
                    continue;
                }
                unit_parent[u] = Some(a);
                for &c in &unit_adj[u] {
                    if !agent_seen[c] {
                        agent_seen[c] = true;
                        queue.push_back(c);
                    }
                }
            }
        }
    }

    let mut counts = vec![vec![0usize; inst.m()]; na];
    let mut remaining = Vec::new();
    for u in 0..nu {
        let Some(parent) = unit_parent[u] else { continue };
        let unit = &forest.units[u];
        let is_leaf = unit_adj[u].len() == 1;
        if is_leaf || unit.superior.is_some() || p[unit.item] <= 0.5 + EPS_NUM {
            let owner = unit.superior.unwrap_or(parent);
            counts[owner][unit.item] += 1;
        } else {
            remaining.push(u);
        }
    }

    if !remaining.is_empty() {
        let score: Vec<Vec<Option<f64>>> = remaining
            .iter()
            .map(|&u| {
                let i = forest.units[u].item;
                (0..na)
                    .map(|a| unit_adj[u].contains(&a).then(|| gain(inst, &counts[a], a, i)))
                    .collect()
            })
            .collect();
        let assign = assignment::max_weight_assignment(&score).unwrap_or_else(|| {
            remaining.iter().map(|&u| unit_parent[u].expect("rooted unit")).collect()
        });
        for (&u, &a) in remaining.iter().zip(&assign) {
            counts[a][forest.units[u].item] += 1;
        }
    }

    let allocation = Allocation::from_counts(inst, &counts)?;
    let zero_utility = (0..na).any(|a| inst.utility_of_counts(a, &counts[a]) <= 0.0);
    Ok(RoundingResult { allocation, counts, zero_utility })
}

/// Score of giving one more copy of type `i` to agent `a`.
fn gain(inst: &Instance, counts: &[usize], a: usize, i: usize) -> f64 {
    let base = inst.utility_of_counts(a, counts);
    let marg = if counts[i] < inst.supply(i) { inst.u(a, i, counts[i]) } else { 0.0 };
    if base <= 0.0 {
        if marg > 0.0 {
            RESCUE_BONUS + marg.ln()
        } else {
            0.0
        }
    } else {
        ((base + marg) / base).ln()
    }
}

/// A linear instance with one single-copy type per unit of an equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReduction {
    pub instance: Instance,
    /// Price of each unit: its common valuation.
    pub prices: Vec<f64>,
    /// `(type, unit index)` of each new type.
    pub units: Vec<(usize, usize)>,
    /// The original allocation expressed on units.
    pub allocation: Allocation,
}

/// Builds the linear instance in which each superior unit is valued `p_i + q_aij`
/// by its owner and each active unit `p_i` by every agent sharing it.
pub fn to_linear_instance(
    inst: &Instance,
    p: &[f64],
    x: &Allocation,
    spending: &SpendingRecord,
) -> Result<LinearReduction> {
    let units = pack_units(inst, p, x, spending)?;
    if units.is_empty() {
        return Err(NswError::InvalidSpendingGraph("equilibrium allocates nothing".into()));
    }
    let n = inst.n();
    let mut u = vec![Vec::with_capacity(units.len()); n];
    let mut xs = vec![Vec::with_capacity(units.len()); n];
    let mut prices = Vec::with_capacity(units.len());
    for unit in &units {
        let value = match unit.superior {
            Some(_) => unit.spending(),
            None => unit.price,
        };
        prices.push(value);
        for a in 0..n {
            let frac: f64 = unit.shares.iter().filter(|s| s.agent == a).map(|s| s.fraction).sum();
            u[a].push(vec![if frac > 0.0 { value } else { 0.0 }]);
            xs[a].push(vec![frac]);
        }
    }
    let instance = Instance::new(vec![1; units.len()], u)?;
    let mut allocation = Allocation { x: xs, integral: false };
    allocation.refresh_integral();
    Ok(LinearReduction { instance, prices, units: units.iter().map(|u| (u.item, u.index)).collect(), allocation })
}
