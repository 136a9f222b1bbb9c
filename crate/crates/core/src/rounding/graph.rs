//! Item units and the bipartite agent/unit spending graph.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance, Triplet, EPS_NUM};
use crate::market::SpendingRecord;

/// One agent's part of a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub agent: usize,
    pub fraction: f64,
    /// Money the agent spends on this part (base plus extra).
    pub spend: f64,
}

/// One copy of an item type, built from the fractional allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemUnit {
    pub item: usize,
    /// Position among the units of `item`.
    pub index: usize,
    pub price: f64,
    /// Owner of a superior unit; such a unit has exactly one share with fraction 1.
    pub superior: Option<usize>,
    pub shares: Vec<Share>,
}

impl ItemUnit {
    pub fn fraction(&self) -> f64 {
        self.shares.iter().map(|s| s.fraction).sum()
    }

    pub fn base_spending(&self) -> f64 {
        self.fraction() * self.price
    }

    pub fn spending(&self) -> f64 {
        self.shares.iter().map(|s| s.spend).sum()
    }
}

/// Whether triplet `t` is bought as a superior item.
fn is_superior(x: &Allocation, spending: &SpendingRecord, t: Triplet) -> bool {
    spending.extra[t.agent][t.item][t.copy] > 0.0 && x.get(t) >= 1.0 - EPS_NUM
}

/// Partitions the allocation of each type into units.
///
/// Superior triplets become dedicated units. The remaining shares are packed
/// with agents in ascending order into units holding at most `min(1, 1/p_i)`
/// of an item each, so every full unit receives base spending `min(1, p_i)`.
pub fn pack_units(inst: &Instance, p: &[f64], x: &Allocation, spending: &SpendingRecord) -> Result<Vec<ItemUnit>> {
    let mut units = Vec::new();
    for i in 0..inst.m() {
        let mut of_type: Vec<ItemUnit> = Vec::new();
        for a in 0..inst.n() {
            for j in 0..inst.supply(i) {
                let t = Triplet::new(a, i, j);
                if is_superior(x, spending, t) {
                    of_type.push(ItemUnit {
                        item: i,
                        index: of_type.len(),
                        price: p[i],
                        superior: Some(a),
                        shares: vec![Share {
                            agent: a,
                            fraction: 1.0,
                            spend: p[i] + spending.extra[a][i][j],
                        }],
                    });
                }
            }
        }
        let cap = if p[i] > 1.0 { 1.0 / p[i] } else { 1.0 };
        let mut open: Option<ItemUnit> = None;
        for a in 0..inst.n() {
            let mut left: f64 = (0..inst.supply(i))
                .map(|j| Triplet::new(a, i, j))
                .filter(|&t| !is_superior(x, spending, t))
                .map(|t| x.get(t))
                .sum();
            while left > EPS_NUM * cap {
                let unit = open.get_or_insert_with(|| ItemUnit {
                    item: i,
                    index: of_type.len(),
                    price: p[i],
                    superior: None,
                    shares: Vec::new(),
                });
                let room = cap - unit.fraction();
                let take = if left <= room + EPS_NUM * cap { left } else { room };
                unit.shares.push(Share { agent: a, fraction: take, spend: take * p[i] });
                left -= take;
                if cap - unit.fraction() <= EPS_NUM * cap {
                    of_type.push(open.take().expect("open unit"));
                }
            }
        }
        if let Some(unit) = open {
            of_type.push(unit);
        }
        if of_type.len() > inst.supply(i) {
            return Err(NswError::InvalidSpendingGraph(format!(
                "type {i} needs {} units but has supply {}",
                of_type.len(),
                inst.supply(i)
            )));
        }
        units.extend(of_type);
    }
    Ok(units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendingEdge {
    pub agent: usize,
    /// Index into [`SpendingGraph::units`].
    pub unit: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendingGraph {
    pub agents: usize,
    pub units: Vec<ItemUnit>,
    pub edges: Vec<SpendingEdge>,
}

impl SpendingGraph {
    pub fn agent_totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.agents];
        for e in &self.edges {
            t[e.agent] += e.weight;
        }
        t
    }

    pub fn unit_totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.units.len()];
        for e in &self.edges {
            t[e.unit] += e.weight;
        }
        t
    }

    /// Whether the graph has no cycle.
    pub fn is_forest(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.agents + self.units.len()).collect();
        fn find(p: &mut [usize], mut v: usize) -> usize {
            while p[v] != v {
                p[v] = p[p[v]];
                v = p[v];
            }
            v
        }
        for e in &self.edges {
            let (r1, r2) = (find(&mut parent, e.agent), find(&mut parent, self.agents + e.unit));
            if r1 == r2 {
                return false;
            }
            parent[r1] = r2;
        }
        true
    }
}

/// One edge per (agent, unit) share with the money the agent spends on it.
pub fn build_spending_graph(
    inst: &Instance,
    p: &[f64],
    x: &Allocation,
    spending: &SpendingRecord,
) -> Result<SpendingGraph> {
    let units = pack_units(inst, p, x, spending)?;
    let mut edges = Vec::new();
    for (u, unit) in units.iter().enumerate() {
        let mut merged: Vec<SpendingEdge> = Vec::new();
        for s in &unit.shares {
            match merged.iter_mut().find(|e| e.agent == s.agent) {
                Some(e) => e.weight += s.spend,
                None => merged.push(SpendingEdge { agent: s.agent, unit: u, weight: s.spend }),
            }
        }
        edges.extend(merged.into_iter().filter(|e| e.weight > 0.0));
    }
    Ok(SpendingGraph { agents: inst.n(), units, edges })
}

/// Removes cycles by shifting money around them until an edge empties.
///
/// Exactly one emptied edge is deleted per cycle; ties keep the others at weight 0.
///
/// Every agent and unit on a cycle gains on one edge what it loses on the
/// other, so all node totals are unchanged.
pub fn break_cycles(g: &SpendingGraph) -> SpendingGraph {
    let na = g.agents;
    let nodes = na + g.units.len();
    let mut forest: Vec<SpendingEdge> = Vec::new();
    for e in &g.edges {
        let mut new_edge = e.clone();
        loop {
            let Some(path) = forest_path(&forest, nodes, na, new_edge.agent, na + new_edge.unit) else {
                forest.push(new_edge);
                break;
            };
            // Cycle: new edge (+), then path edges from the unit back to the agent alternating (-, +, ...).
            let mut cut = path[0];
            for (k, &fe) in path.iter().enumerate() {
                if k % 2 == 0 && forest[fe].weight < forest[cut].weight {
                    cut = fe;
                }
            }
            let delta = forest[cut].weight;
            new_edge.weight += delta;
            for (k, &fe) in path.iter().enumerate() {
                if k % 2 == 0 {
                    forest[fe].weight = (forest[fe].weight - delta).max(0.0);
                } else {
                    forest[fe].weight += delta;
                }
            }
            forest.remove(cut);
        }
    }
    forest.sort_by_key(|e| (e.unit, e.agent));
    SpendingGraph { agents: g.agents, units: g.units.clone(), edges: forest }
}

/// Edge indices of the forest path from the unit node `to` back to agent `from`, if connected.
fn forest_path(forest: &[SpendingEdge], nodes: usize, na: usize, from: usize, to: usize) -> Option<Vec<usize>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
    for (k, e) in forest.iter().enumerate() {
        adj[e.agent].push((na + e.unit, k));
        adj[na + e.unit].push((e.agent, k));
    }
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
    let mut seen = vec![false; nodes];
    seen[to] = true;
    let mut queue = VecDeque::from([to]);
    while let Some(v) = queue.pop_front() {
        if v == from {
            let mut path = Vec::new();
            let mut cur = from;
            while cur != to {
                let (p, k) = prev[cur].expect("bfs parent");
                path.push(k);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for &(w, k) in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                prev[w] = Some((v, k));
                queue.push_back(w);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(agents: usize, units: usize, edges: &[(usize, usize, f64)]) -> SpendingGraph {
        SpendingGraph {
            agents,
            units: (0..units)
                .map(|t| ItemUnit { item: 0, index: t, price: 1.0, superior: None, shares: vec![] })
                .collect(),
            edges: edges.iter().map(|&(a, u, w)| SpendingEdge { agent: a, unit: u, weight: w }).collect(),
        }
    }

    #[test]
    fn packing_splits_across_units() {
        let inst = Instance::new(vec![2], vec![vec![vec![1.0, 1.0]]; 3]).unwrap();
        let mut x = Allocation::zeros(&inst);
        x.set(Triplet::new(0, 0, 0), 0.6);
        x.set(Triplet::new(1, 0, 0), 0.6);
        x.set(Triplet::new(2, 0, 0), 0.8);
        let s = SpendingRecord::zeros(&inst);
        let units = pack_units(&inst, &[1.0], &x, &s).unwrap();
        assert_eq!(units.len(), 2);
        let fr = |u: &ItemUnit| u.shares.iter().map(|s| (s.agent, s.fraction)).collect::<Vec<_>>();
        let close = |a: &[(usize, f64)], b: &[(usize, f64)]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() < 1e-12)
        };
        assert!(close(&fr(&units[0]), &[(0, 0.6), (1, 0.4)]));
        assert!(close(&fr(&units[1]), &[(1, 0.2), (2, 0.8)]));
    }

    #[test]
    fn two_halves_share_one_unit() {
        let inst = Instance::new(vec![1], vec![vec![vec![1.0]]; 2]).unwrap();
        let mut x = Allocation::zeros(&inst);
        x.set(Triplet::new(0, 0, 0), 0.5);
        x.set(Triplet::new(1, 0, 0), 0.5);
        let g = build_spending_graph(&inst, &[0.8], &x, &SpendingRecord::zeros(&inst)).unwrap();
        assert_eq!(g.units.len(), 1);
        assert_eq!(g.edges.len(), 2);
        assert!(g.edges.iter().all(|e| (e.weight - 0.4).abs() < 1e-15));
    }

    #[test]
    fn too_many_units_rejected() {
        let inst = Instance::new(vec![1], vec![vec![vec![1.0]]; 2]).unwrap();
        let mut x = Allocation::zeros(&inst);
        x.set(Triplet::new(0, 0, 0), 0.5);
        x.set(Triplet::new(1, 0, 0), 0.5);
        // At price 4 a unit holds only a quarter of an item.
        assert!(pack_units(&inst, &[4.0], &x, &SpendingRecord::zeros(&inst)).is_err());
    }

    #[test]
    fn forest_is_unchanged() {
        let g = graph(2, 2, &[(0, 0, 0.5), (1, 0, 0.5), (1, 1, 0.5)]);
        let f = break_cycles(&g);
        assert_eq!(f.edges.len(), 3);
        assert_eq!(f.agent_totals(), g.agent_totals());
    }

    #[test]
    fn four_cycle_loses_one_edge() {
        let g = graph(2, 2, &[(0, 0, 0.5), (1, 0, 0.5), (1, 1, 0.5), (0, 1, 0.5)]);
        assert!(!g.is_forest());
        let f = break_cycles(&g);
        assert!(f.is_forest());
        assert_eq!(f.edges.len(), 3);
        for (x, y) in f.agent_totals().iter().zip(g.agent_totals()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in f.unit_totals().iter().zip(g.unit_totals()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn break_cycles_conserves_totals(
            edges in proptest::collection::btree_map((0usize..4, 0usize..4), 0.01f64..1.0, 1..16)
        ) {
            let list: Vec<(usize, usize, f64)> = edges.into_iter().map(|((a, u), w)| (a, u, w)).collect();
            let g = graph(4, 4, &list);
            let f = break_cycles(&g);
            proptest::prop_assert!(f.is_forest());
            for (x, y) in f.agent_totals().iter().zip(g.agent_totals()) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in f.unit_totals().iter().zip(g.unit_totals()) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
            proptest::prop_assert!(f.edges.iter().all(|e| e.weight >= -1e-12));
        }
    }
}
