//! The network `N(p, b)`: source -> agents -> item types -> sink.
//!
//! Sink edges carry a lower bound (the minimum base spending a type must
//! receive in a Δ-allocation). A feasible flow meeting the lower bounds is
//! found first and then augmented to a maximum flow; augmenting paths never
//! traverse a sink edge backwards, so the lower bounds stay satisfied.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};

/// Residual amounts at or below this are treated as zero.
pub const FLOW_EPS: f64 = 1e-12;

/// Residual capacity that makes an edge usable when extracting the min cut.
pub const CUT_EPS: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveEdge {
    pub agent: usize,
    pub item: usize,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNetwork {
    /// Capacity of `(s, a)`: `1 - e_a`.
    pub agent_capacity: Vec<f64>,
    /// Capacity of `(i, t)`: `(k_i - l_i) c(p_i, Δ)`.
    pub type_capacity: Vec<f64>,
    /// Lower bound on `(i, t)`: `(k_i - l_i) min(1, p_i)`.
    pub type_lower: Vec<f64>,
    pub edges: Vec<ActiveEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub agent_flow: Vec<f64>,
    pub type_flow: Vec<f64>,
    pub edge_flow: Vec<f64>,
}

impl Flow {
    pub fn value(&self) -> f64 {
        self.agent_flow.iter().sum()
    }

    pub fn surplus(&self, net: &FlowNetwork) -> Vec<f64> {
        net.agent_capacity
            .iter()
            .zip(&self.agent_flow)
            .map(|(c, f)| (c - f).max(0.0))
            .collect()
    }
}

struct Graph {
    to: Vec<usize>,
    cap: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    fn new(nodes: usize) -> Self {
        Graph { to: Vec::new(), cap: Vec::new(), adj: vec![Vec::new(); nodes] }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: f64) -> usize {
        let id = self.to.len();
        self.to.push(v);
        self.cap.push(c);
        self.adj[u].push(id);
        self.to.push(u);
        self.cap.push(0.0);
        self.adj[v].push(id + 1);
        id
    }

    fn levels(&self, s: usize, t: usize) -> Option<Vec<usize>> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > FLOW_EPS && level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (level[t] != usize::MAX).then_some(level)
    }

    fn push(&mut self, u: usize, t: usize, limit: f64, level: &[usize], iter: &mut [usize]) -> f64 {
        if u == t {
            return limit;
        }
        while iter[u] < self.adj[u].len() {
            let e = self.adj[u][iter[u]];
            let v = self.to[e];
            if self.cap[e] > FLOW_EPS && level[v] == level[u] + 1 {
                let pushed = self.push(v, t, limit.min(self.cap[e]), level, iter);
                if pushed > FLOW_EPS {
                    self.cap[e] -= pushed;
                    self.cap[e ^ 1] += pushed;
                    return pushed;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    /// Dinic's algorithm; continues from whatever flow the residual graph encodes.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        while let Some(level) = self.levels(s, t) {
            let mut iter = vec![0usize; self.adj.len()];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut iter);
                if f <= FLOW_EPS {
                    break;
                }
                total += f;
            }
        }
        total
    }
}

const SOURCE: usize = 0;
const SINK: usize = 1;

fn agent_node(a: usize) -> usize {
    2 + a
}

fn type_node(n: usize, i: usize) -> usize {
    2 + n + i
}

impl FlowNetwork {
    pub fn agents(&self) -> usize {
        self.agent_capacity.len()
    }

    pub fn types(&self) -> usize {
        self.type_capacity.len()
    }

    pub fn check(&self) -> Result<()> {
        let neg = self
            .agent_capacity
            .iter()
            .chain(&self.type_capacity)
            .chain(&self.type_lower)
            .chain(self.edges.iter().map(|e| &e.capacity))
            .any(|&c| c < -FLOW_EPS || !c.is_finite());
        if neg {
            return Err(NswError::InvalidMarketState("negative or non-finite capacity".into()));
        }
        for (i, (&lo, &hi)) in self.type_lower.iter().zip(&self.type_capacity).enumerate() {
            if lo > hi + FLOW_EPS {
                return Err(NswError::InvalidMarketState(format!(
                    "type {i} lower bound {lo} exceeds capacity {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// Maximum s-t flow that meets every sink-edge lower bound.
///
/// Fails with [`NswError::InvalidMarketState`] when the lower bounds cannot be met.
pub fn max_flow(net: &FlowNetwork) -> Result<Flow> {
    max_flow_with_slack(net, LOWER_SLACK)
}

/// Relative shortfall on the lower bounds accepted by [`max_flow`].
pub const LOWER_SLACK: f64 = 1e-9;

/// Like [`max_flow`] but accepts a lower-bound shortfall of `slack (1 + required)`.
pub fn max_flow_with_slack(net: &FlowNetwork, slack: f64) -> Result<Flow> {
    net.check()?;
    let (n, m) = (net.agents(), net.types());
    let mut g = Graph::new(2 + n + m);
    let agent_edges: Vec<usize> = (0..n)
        .map(|a| g.add_edge(SOURCE, agent_node(a), net.agent_capacity[a].max(0.0)))
        .collect();
    let active_edges: Vec<usize> = net
        .edges
        .iter()
        .map(|e| g.add_edge(agent_node(e.agent), type_node(n, e.item), e.capacity.max(0.0)))
        .collect();
    let type_edges: Vec<usize> = (0..m)
        .map(|i| g.add_edge(type_node(n, i), SINK, net.type_lower[i].max(0.0)))
        .collect();

    let required: f64 = net.type_lower.iter().map(|v| v.max(0.0)).sum();
    let met = g.max_flow(SOURCE, SINK);
    if met < required - slack * (1.0 + required) {
        return Err(NswError::InvalidMarketState(format!(
            "lower bounds unattainable: routed {met:.12} of {required:.12}"
        )));
    }
    for (i, &e) in type_edges.iter().enumerate() {
        g.cap[e] += (net.type_capacity[i] - net.type_lower[i]).max(0.0);
    }
    g.max_flow(SOURCE, SINK);

    let flow_on = |e: usize| g.cap[e ^ 1];
    Ok(Flow {
        agent_flow: agent_edges.iter().map(|&e| flow_on(e)).collect(),
        type_flow: type_edges.iter().map(|&e| flow_on(e)).collect(),
        edge_flow: active_edges.iter().map(|&e| flow_on(e)).collect(),
    })
}

/// Whether a flow meeting every lower bound exists.
pub fn lower_bounds_feasible(net: &FlowNetwork) -> bool {
    max_flow(net).is_ok()
}

/// Like [`lower_bounds_feasible`] with a shortfall tolerance of only `1e-11`.
pub fn lower_bounds_feasible_strict(net: &FlowNetwork) -> bool {
    max_flow_with_slack(net, 1e-11).is_ok()
}

/// Amount by which the best flow misses the summed lower bounds (0 when met).
pub fn lower_bound_shortfall(net: &FlowNetwork) -> f64 {
    let (n, m) = (net.agents(), net.types());
    let mut g = Graph::new(2 + n + m);
    for a in 0..n {
        g.add_edge(SOURCE, agent_node(a), net.agent_capacity[a].max(0.0));
    }
    for e in &net.edges {
        g.add_edge(agent_node(e.agent), type_node(n, e.item), e.capacity.max(0.0));
    }
    for i in 0..m {
        g.add_edge(type_node(n, i), SINK, net.type_lower[i].max(0.0));
    }
    let required: f64 = net.type_lower.iter().map(|v| v.max(0.0)).sum();
    (required - g.max_flow(SOURCE, SINK)).max(0.0)
}

/// Agents `X` and types `Y` on the source side of the min cut closest to the
/// source (vertices reachable from `s` in the residual graph). This is the
/// min cut with the most vertices on the sink side.
pub fn min_cut_max_t(net: &FlowNetwork, flow: &Flow) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, m) = (net.agents(), net.types());
    let mut agent_in = vec![false; n];
    let mut type_in = vec![false; m];
    let mut queue = VecDeque::new();
    for a in 0..n {
        if net.agent_capacity[a] - flow.agent_flow[a] > CUT_EPS {
            agent_in[a] = true;
            queue.push_back(Node::Agent(a));
        }
    }
    #[derive(Clone, Copy)]
    enum Node {
        Agent(usize),
        Type(usize),
    }
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Agent(a) => {
                for (e, edge) in net.edges.iter().enumerate() {
                    if edge.agent == a && !type_in[edge.item] && edge.capacity - flow.edge_flow[e] > CUT_EPS {
                        type_in[edge.item] = true;
                        queue.push_back(Node::Type(edge.item));
                    }
                }
            }
            Node::Type(i) => {
                if net.type_capacity[i] - flow.type_flow[i] > CUT_EPS {
                    return Err(NswError::InvalidMarketState(format!(
                        "flow is not maximum: type {i} reachable with residual sink capacity"
                    )));
                }
                for (e, edge) in net.edges.iter().enumerate() {
                    if edge.item == i && !agent_in[edge.agent] && flow.edge_flow[e] > CUT_EPS {
                        agent_in[edge.agent] = true;
                        queue.push_back(Node::Agent(edge.agent));
                    }
                }
            }
        }
    }
    let x = (0..n).filter(|&a| agent_in[a]).collect();
    let y = (0..m).filter(|&i| type_in[i]).collect();
    Ok((x, y))
}
