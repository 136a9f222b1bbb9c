//! Spending-restricted equilibrium of the utility-allocation market.
//!
//! The state of the algorithm is the pair `(p, b)` of base prices and
//! bang-per-buck values together with the scaling parameter `Δ`. Superior
//! items are fully bought at `u/b`, active items are allocated by a maximum
//! flow in `N(p, b)`, and inferior items are never bought. `PriceIncrease`
//! raises the prices of a set of types `Y` and lowers the bang-per-buck of a
//! set of agents `X` multiplicatively until agents spend their whole budget.

use serde::{Deserialize, Serialize};

use super::flow::{self, ActiveEdge, Flow, FlowNetwork};
use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance, Triplet, EPS_NUM};

/// Default phases stop once `Δ` is at most this, even when `2^-K / V_max` is larger.
pub const MAX_FINAL_DELTA: f64 = 1.0 / (1u64 << 20) as f64;

/// Smallest scaling parameter the default phase count reaches.
pub const MIN_DELTA: f64 = 1.0 / (1u64 << 40) as f64;

/// Multiplier of the iteration cap `C K^2 (1/Δ_0) log V_max` for one price increase.
pub const ITERATION_FACTOR: usize = 64;

const GAMMA_MAX: f64 = 1e6;
const BISECTION_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemClass {
    Superior,
    Active,
    Inferior,
}

/// Compares `u/p` against `b` with a relative tolerance of [`EPS_NUM`].
pub fn classify_triplet(u: f64, p: f64, b: f64) -> ItemClass {
    if u <= 0.0 {
        return ItemClass::Inferior;
    }
    if p <= 0.0 {
        return ItemClass::Superior;
    }
    let r = b * p;
    if (u - r).abs() <= EPS_NUM * u.max(r) {
        ItemClass::Active
    } else if u > r {
        ItemClass::Superior
    } else {
        ItemClass::Inferior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: Vec<Vec<Vec<ItemClass>>>,
    /// `e_a`: money agent `a` spends on its superior items.
    pub superior_spend: Vec<f64>,
    /// `l_i`: number of superior items of type `i`.
    pub superior_count: Vec<usize>,
    /// Number of active copies of type `i` for agent `a`.
    pub active_count: Vec<Vec<usize>>,
}

pub fn classify(inst: &Instance, p: &[f64], b: &[f64]) -> Result<Classification> {
    if let Some(a) = b.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(NswError::InvalidMarketState(format!("bang-per-buck of agent {a} is {}", b[a])));
    }
    let (n, m) = (inst.n(), inst.m());
    let mut class = Vec::with_capacity(n);
    let mut superior_spend = vec![0.0; n];
    let mut superior_count = vec![0usize; m];
    let mut active_count = vec![vec![0usize; m]; n];
    for a in 0..n {
        let mut ca = Vec::with_capacity(m);
        for i in 0..m {
            let row: Vec<ItemClass> =
                inst.marginals(a, i).iter().map(|&u| classify_triplet(u, p[i], b[a])).collect();
            for (j, c) in row.iter().enumerate() {
                match c {
                    ItemClass::Superior => {
                        superior_spend[a] += inst.u(a, i, j) / b[a];
                        superior_count[i] += 1;
                    }
                    ItemClass::Active => active_count[a][i] += 1,
                    ItemClass::Inferior => {}
                }
            }
            ca.push(row);
        }
        class.push(ca);
    }
    if let Some(a) = superior_spend.iter().position(|&e| e > 1.0 + EPS_NUM) {
        return Err(NswError::InvalidMarketState(format!(
            "agent {a} spends {} > 1 on superior items",
            superior_spend[a]
        )));
    }
    if let Some(i) = (0..m).find(|&i| superior_count[i] > inst.supply(i)) {
        return Err(NswError::InvalidMarketState(format!(
            "type {i} has {} superior items but supply {}",
            superior_count[i],
            inst.supply(i)
        )));
    }
    Ok(Classification { class, superior_spend, superior_count, active_count })
}

fn is_multiple(p: f64, delta: f64) -> Option<f64> {
    let r = p / delta;
    let k = r.round();
    ((r - k).abs() <= EPS_NUM * r.max(1.0)).then_some(k)
}

/// `p(Δ)`: the next multiple of `Δ` strictly above `p`.
pub fn price_at_delta(p: f64, delta: f64) -> f64 {
    match is_multiple(p, delta) {
        Some(k) => (k + 1.0) * delta,
        None => (p / delta).ceil() * delta,
    }
}

/// `c(p, Δ) = min(1, p(Δ))`.
pub fn unit_capacity(p: f64, delta: f64) -> f64 {
    price_at_delta(p, delta).min(1.0)
}

fn network_for(inst: &Instance, p: &[f64], delta: f64, cls: &Classification) -> FlowNetwork {
    let (n, m) = (inst.n(), inst.m());
    let agent_capacity = cls.superior_spend.iter().map(|e| (1.0 - e).max(0.0)).collect();
    let free: Vec<f64> = (0..m).map(|i| (inst.supply(i) - cls.superior_count[i]) as f64).collect();
    let type_capacity = (0..m).map(|i| free[i] * unit_capacity(p[i], delta)).collect();
    let type_lower = (0..m).map(|i| free[i] * p[i].min(1.0)).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for i in 0..m {
            let c = cls.active_count[a][i];
            if c > 0 {
                // x <= 1 per copy: an agent never pays more than min(1, p_i) of base per active copy.
                edges.push(ActiveEdge { agent: a, item: i, capacity: c as f64 * p[i].min(1.0) });
            }
        }
    }
    FlowNetwork { agent_capacity, type_capacity, type_lower, edges }
}

/// Builds `N(p, b)` for the given scaling parameter.
pub fn build_network(inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> Result<FlowNetwork> {
    let cls = classify(inst, p, b)?;
    let net = network_for(inst, p, delta, &cls);
    net.check()?;
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    /// An inferior item of an agent in `X` on a type outside `Y` becomes active.
    InferiorActivates(Triplet),
    /// A superior item of an agent outside `X` on a type in `Y` becomes active.
    SuperiorActivates(Triplet),
    /// `c(p_i, Δ)` increases for a type in `Y`.
    CapacityIncrease(usize),
}

/// Smallest factor `γ > 1` at which raising `Y` prices and lowering `X`
/// bang-per-buck by `γ` changes the structure of `N(p, b)`.
pub fn next_event(
    inst: &Instance,
    p: &[f64],
    b: &[f64],
    x_set: &[usize],
    y_set: &[usize],
    delta: f64,
) -> Result<(f64, Event)> {
    let in_x = membership(inst.n(), x_set);
    let in_y = membership(inst.m(), y_set);
    let mut best: Option<(f64, Event)> = None;
    let mut offer = |g: f64, e: Event| {
        if g > 1.0 + EPS_NUM && g.is_finite() && best.map_or(true, |(bg, _)| g < bg) {
            best = Some((g, e));
        }
    };
    for a in 0..inst.n() {
        for i in 0..inst.m() {
            if in_x[a] == in_y[i] {
                continue;
            }
            for (j, &u) in inst.marginals(a, i).iter().enumerate() {
                let t = Triplet::new(a, i, j);
                match classify_triplet(u, p[i], b[a]) {
                    ItemClass::Inferior if in_x[a] && u > 0.0 => {
                        offer(b[a] * p[i] / u, Event::InferiorActivates(t))
                    }
                    ItemClass::Superior if in_y[i] && p[i] > 0.0 => {
                        offer(u / (b[a] * p[i]), Event::SuperiorActivates(t))
                    }
                    _ => {}
                }
            }
        }
    }
    for &i in y_set {
        if p[i] > 0.0 && p[i] < 1.0 {
            offer(price_at_delta(p[i], delta).min(1.0) / p[i], Event::CapacityIncrease(i));
        }
    }
    best.ok_or_else(|| NswError::InvalidMarketState("no price-increase event is reachable".into()))
}

fn membership(len: usize, set: &[usize]) -> Vec<bool> {
    let mut v = vec![false; len];
    for &s in set {
        v[s] = true;
    }
    v
}

/// Prices of `Y` times `γ`, bang-per-buck of `X` divided by `γ`.
fn scaled_state(p: &[f64], b: &[f64], x_set: &[usize], y_set: &[usize], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p2 = p.to_vec();
    let mut b2 = b.to_vec();
    for &i in y_set {
        p2[i] *= gamma;
    }
    for &a in x_set {
        b2[a] /= gamma;
    }
    (p2, b2)
}

/// Whether `(p, b)` supports a Δ-allocation.
///
/// Stricter than [`classify`] and [`flow::max_flow`] (no budget overshoot, almost
/// no lower-bound shortfall) so states chosen by the step search keep slack for
/// later rounding noise.
pub fn supports_delta_allocation(inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> bool {
    match classify(inst, p, b) {
        Ok(cls) if cls.superior_spend.iter().all(|&e| e <= 1.0) => {
            flow::lower_bounds_feasible_strict(&network_for(inst, p, delta, &cls))
        }
        _ => false,
    }
}

/// Budget overshoot and lower-bound shortfall of `(p, b)`, or `None` when the
/// state cannot be classified.
fn delta_defect(inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> Option<(f64, f64)> {
    let cls = classify(inst, p, b).ok()?;
    let over = cls.superior_spend.iter().fold(0.0f64, |m, &e| m.max(e - 1.0));
    let short = flow::lower_bound_shortfall(&network_for(inst, p, delta, &cls));
    Some((over, short))
}

/// Accepts step candidates that are no less feasible than the current state.
///
/// Prices on the Δ grid can leave a shortfall of a few ulps that no price
/// increase removes; such noise is inherited rather than treated as a defect.
struct StepFilter {
    over: f64,
    short: f64,
}

impl StepFilter {
    fn new(inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> Self {
        let (over, short) = delta_defect(inst, p, b, delta).unwrap_or((0.0, 0.0));
        StepFilter { over: over.max(0.0), short: short.max(1e-11) }
    }

    fn accepts(&self, inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> bool {
        match delta_defect(inst, p, b, delta) {
            Some((over, short)) => over <= self.over && short <= self.short * (1.0 + 1e-9) + 1e-15,
            None => false,
        }
    }
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: usize,
    pub iteration: usize,
    pub delta: f64,
    pub prices: Vec<f64>,
    pub bang_per_buck: Vec<f64>,
    /// Total money spent by each agent (superior plus active).
    pub agent_spending: Vec<f64>,
    /// Total base spending on each type.
    pub type_base_spending: Vec<f64>,
    pub surplus: f64,
    /// Step taken after this state, if any.
    pub gamma: Option<f64>,
    pub event: Option<Event>,
    /// `true` when the step stopped early because a larger one would leave no Δ-allocation.
    pub budget_limited: bool,
}

/// Max-flow snapshot of a state `(p, b, Δ)`.
#[derive(Debug, Clone)]
pub struct MarketSnapshot {
    pub classification: Classification,
    pub network: FlowNetwork,
    pub flow: Flow,
}

impl MarketSnapshot {
    pub fn compute(inst: &Instance, p: &[f64], b: &[f64], delta: f64) -> Result<Self> {
        let classification = classify(inst, p, b)?;
        let network = network_for(inst, p, delta, &classification);
        let flow = flow::max_flow(&network)?;
        Ok(MarketSnapshot { classification, network, flow })
    }

    pub fn surplus(&self) -> f64 {
        self.flow.surplus(&self.network).iter().sum()
    }

    pub fn agent_spending(&self) -> Vec<f64> {
        self.classification.superior_spend.iter().zip(&self.flow.agent_flow).map(|(e, f)| e + f).collect()
    }

    pub fn type_base_spending(&self, p: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|i| self.classification.superior_count[i] as f64 * p[i] + self.flow.type_flow[i])
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct RunContext {
    pub phase: usize,
    pub iterations: usize,
    pub max_iterations: usize,
    pub trace: Option<Vec<TraceRecord>>,
}

impl RunContext {
    pub fn new(max_iterations: usize, trace: bool) -> Self {
        RunContext { phase: 0, iterations: 0, max_iterations, trace: trace.then(Vec::new) }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        delta: f64,
        p: &[f64],
        b: &[f64],
        snap: &MarketSnapshot,
        gamma: Option<f64>,
        event: Option<Event>,
        budget_limited: bool,
    ) {
        let (phase, iteration) = (self.phase, self.iterations);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                phase,
                iteration,
                delta,
                prices: p.to_vec(),
                bang_per_buck: b.to_vec(),
                agent_spending: snap.agent_spending(),
                type_base_spending: snap.type_base_spending(p),
                surplus: snap.surplus(),
                gamma,
                event,
                budget_limited,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriceIncreaseOutput {
    pub prices: Vec<f64>,
    pub bang_per_buck: Vec<f64>,
    pub snapshot: MarketSnapshot,
    pub iterations: usize,
}

/// Money left unspent by all agents below which an allocation counts as full.
pub fn money_tolerance(inst: &Instance) -> f64 {
    inst.n() as f64 * EPS_NUM
}

/// Raises prices from a state supporting a Δ-allocation until it supports a full one.
pub fn price_increase(
    inst: &Instance,
    delta: f64,
    p: &[f64],
    b: &[f64],
    ctx: &mut RunContext,
) -> Result<PriceIncreaseOutput> {
    let mut p = p.to_vec();
    let mut b = b.to_vec();
    let eps_money = money_tolerance(inst);
    let mut iterations = 0usize;
    let mut stalls = 0usize;
    loop {
        let snap = MarketSnapshot::compute(inst, &p, &b, delta)?;
        let surplus = snap.surplus();
        if surplus <= eps_money {
            ctx.record(delta, &p, &b, &snap, None, None, false);
            return Ok(PriceIncreaseOutput { prices: p, bang_per_buck: b, snapshot: snap, iterations });
        }
        if ctx.iterations >= ctx.max_iterations {
            return Err(NswError::IterationCap { iterations: ctx.iterations, surplus });
        }
        ctx.iterations += 1;
        iterations += 1;

        let (x_set, mut y_set) = flow::min_cut_max_t(&snap.network, &snap.flow)?;
        extend_with_exclusive_types(&snap.network, &snap.flow, &x_set, &mut y_set);
        let event = match next_event(inst, &p, &b, &x_set, &y_set, delta) {
            Ok(e) => Some(e),
            Err(_) => None,
        };
        let gamma_hi = event.map_or(GAMMA_MAX, |(g, _)| g.min(GAMMA_MAX));

        let filter = StepFilter::new(inst, &p, &b, delta);
        let mut event_state = scaled_state(&p, &b, &x_set, &y_set, gamma_hi);
        if let Some((g, e)) = event.filter(|(g, _)| *g <= GAMMA_MAX) {
            snap_event(inst, &mut event_state.0, &mut event_state.1, e, delta, g);
        }
        let (gamma, applied, limited) = if filter.accepts(inst, &event_state.0, &event_state.1, delta) {
            if event.is_none() || gamma_hi >= GAMMA_MAX {
                return Err(NswError::InvalidMarketState(format!(
                    "surplus {surplus:.3e} cannot be spent: no event limits the price increase"
                )));
            }
            (gamma_hi, event.map(|(_, e)| e), false)
        } else {
            // Largest γ that still supports a Δ-allocation (feasibility is monotone in γ).
            let (mut lo, mut hi) = (0.0f64, gamma_hi.ln());
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                let (p2, b2) = scaled_state(&p, &b, &x_set, &y_set, mid.exp());
                if filter.accepts(inst, &p2, &b2, delta) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo.exp(), None, true)
        };
        ctx.record(delta, &p, &b, &snap, Some(gamma), applied, limited);

        if gamma <= 1.0 + 1e-14 {
            stalls += 1;
            if stalls > 3 {
                return Err(NswError::InvalidMarketState(format!(
                    "price increase stalled with surplus {surplus:.3e}"
                )));
            }
        } else {
            stalls = 0;
        }
        if applied.is_some() {
            p = event_state.0;
            b = event_state.1;
        } else {
            let (p2, b2) = scaled_state(&p, &b, &x_set, &y_set, gamma);
            p = p2;
            b = b2;
        }
    }
}

/// Adds to `Y` every type whose whole flow comes from `X`.
///
/// No flow leaves the price-increase region, so the flow stays valid while
/// those prices rise, and the agents of `X` keep buying the copies as active
/// items instead of being forced to buy them as superior items.
pub fn extend_with_exclusive_types(net: &FlowNetwork, flow: &Flow, x_set: &[usize], y_set: &mut Vec<usize>) {
    let in_x = membership(net.agents(), x_set);
    let in_y = membership(net.types(), y_set);
    for i in 0..net.types() {
        if in_y[i] {
            continue;
        }
        let mut from_x = 0.0;
        let mut exclusive = true;
        for (e, edge) in net.edges.iter().enumerate() {
            if edge.item == i && flow.edge_flow[e] > flow::CUT_EPS {
                if in_x[edge.agent] {
                    from_x += flow.edge_flow[e];
                } else {
                    exclusive = false;
                }
            }
        }
        if exclusive && from_x > flow::CUT_EPS {
            y_set.push(i);
        }
    }
    y_set.sort_unstable();
}

/// Removes rounding drift so the triggering triplet sits exactly on its boundary.
fn snap_event(inst: &Instance, p: &mut [f64], b: &mut [f64], event: Event, delta: f64, _gamma: f64) {
    match event {
        Event::InferiorActivates(t) => b[t.agent] = inst.u(t.agent, t.item, t.copy) / p[t.item],
        Event::SuperiorActivates(t) => p[t.item] = inst.u(t.agent, t.item, t.copy) / b[t.agent],
        Event::CapacityIncrease(i) => {
            let k = (p[i] / delta).round();
            p[i] = (k * delta).min(1.0);
        }
    }
}

/// Initial `(p, b)` supporting a Δ-allocation in which no agent spends more than 1/2.
///
/// Agents are given priority in index order with geometrically increasing
/// bang-per-buck, so every earlier agent takes all copies it values as
/// superior items, and the agent that exhausts a type's supply sets its price
/// at the marginal of the last copy it needs. Types whose positive-valued
/// copies never exhaust the supply keep price 0.
pub fn initialize(inst: &Instance, delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let k_total = inst.total_items() as f64;
    if delta > 1.0 / (2.0 * k_total) + EPS_NUM {
        return Err(NswError::MarketPrecondition(format!("Δ = {delta} exceeds 1/(2K)")));
    }
    let all = inst.utilities().iter().flatten().flatten().copied();
    let (u_min, u_max) = all
        .filter(|&v| v > 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if u_max <= 0.0 {
        return Err(NswError::MarketPrecondition("no agent values any item".into()));
    }
    let ratio = 4.0 * u_max / u_min;
    let total_max = (0..inst.n())
        .map(|a| inst.utilities()[a].iter().flatten().sum::<f64>())
        .fold(0.0f64, f64::max);
    let scale = 4.0 * total_max.max(k_total * u_max);
    let b: Vec<f64> = (0..inst.n()).map(|a| scale * ratio.powi(a as i32)).collect();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(NswError::MarketPrecondition("initial bang-per-buck overflows".into()));
    }
    let mut p = vec![0.0; inst.m()];
    for (i, price) in p.iter_mut().enumerate() {
        let mut remaining = inst.supply(i);
        for (a, &ba) in b.iter().enumerate() {
            let positive = inst.marginals(a, i).iter().filter(|&&v| v > 0.0).count();
            if positive >= remaining {
                *price = inst.u(a, i, remaining - 1) / ba;
                break;
            }
            remaining -= positive;
        }
    }
    Ok((p, b))
}

/// Largest power of two not exceeding `1/(2K)`.
pub fn initial_delta(inst: &Instance) -> f64 {
    let target = 1.0 / (2.0 * inst.total_items() as f64);
    let mut d = 1.0;
    while d > target {
        d *= 0.5;
    }
    d
}

/// Number of price-increase calls needed to bring `Δ` down to `2^-K / V_max`,
/// clamped to `[MIN_DELTA, MAX_FINAL_DELTA]`.
pub fn default_phases(inst: &Instance) -> usize {
    let k = inst.total_items() as i32;
    let target = (0.5f64.powi(k) / inst.v_max()).clamp(MIN_DELTA, MAX_FINAL_DELTA);
    let mut d = initial_delta(inst);
    let mut phases = 1;
    while d > target {
        d *= 0.5;
        phases += 1;
    }
    phases
}

/// Checks that some integral allocation gives every agent positive utility.
pub fn check_positive_allocation(inst: &Instance) -> Result<()> {
    let mut edges = Vec::new();
    for a in 0..inst.n() {
        if (0..inst.m()).all(|i| inst.u(a, i, 0) <= 0.0) {
            return Err(NswError::MarketPrecondition(format!("agent {a} values no item")));
        }
        for i in 0..inst.m() {
            if inst.u(a, i, 0) > 0.0 {
                edges.push(ActiveEdge { agent: a, item: i, capacity: 1.0 });
            }
        }
    }
    let net = FlowNetwork {
        agent_capacity: vec![1.0; inst.n()],
        type_capacity: inst.supplies().iter().map(|&k| k as f64).collect(),
        type_lower: vec![0.0; inst.m()],
        edges,
    };
    let matched = flow::max_flow(&net)?.value();
    if matched < inst.n() as f64 - 0.5 {
        return Err(NswError::MarketPrecondition(format!(
            "at most {} agents can receive a valued item",
            matched.round()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendingRecord {
    /// `x_aij p_i` per triplet.
    pub base: Vec<Vec<Vec<f64>>>,
    /// `q_aij` per triplet.
    pub extra: Vec<Vec<Vec<f64>>>,
}

impl SpendingRecord {
    pub fn zeros(inst: &Instance) -> Self {
        let z: Vec<Vec<Vec<f64>>> =
            (0..inst.n()).map(|_| inst.supplies().iter().map(|&k| vec![0.0; k]).collect()).collect();
        SpendingRecord { base: z.clone(), extra: z }
    }

    pub fn agent_total(&self, a: usize) -> f64 {
        self.base[a].iter().flatten().sum::<f64>() + self.extra[a].iter().flatten().sum::<f64>()
    }

    pub fn type_base(&self, i: usize) -> f64 {
        self.base.iter().map(|ba| ba[i].iter().sum::<f64>()).sum()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScalingOptions {
    /// Number of price-increase calls; defaults to [`default_phases`].
    pub phases: Option<usize>,
    pub trace: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketOutcome {
    pub prices: Vec<f64>,
    pub bang_per_buck: Vec<f64>,
    pub allocation: Allocation,
    pub spending: SpendingRecord,
    /// Scaling parameter of the last phase.
    pub delta: f64,
    /// Tolerance `K Δ` at which the outcome is an equilibrium.
    pub eps_eq: f64,
    pub phases: usize,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRecord>,
}

/// Per-run iteration cap for one price increase.
pub fn iteration_cap(inst: &Instance) -> usize {
    let k = inst.total_items();
    let inv_delta = (1.0 / initial_delta(inst)).round() as usize;
    let log_v = inst.v_max().ln().max(1.0).ceil() as usize;
    ITERATION_FACTOR * k * k * inv_delta * log_v
}

/// Runs `PriceIncrease` for a fixed number of phases, halving `Δ` between them.
pub fn scaling_algorithm(inst: &Instance, opts: &ScalingOptions) -> Result<MarketOutcome> {
    check_positive_allocation(inst)?;
    let phases = opts.phases.unwrap_or_else(|| default_phases(inst)).max(1);
    let mut delta = initial_delta(inst);
    let (mut p, mut b) = initialize(inst, delta)?;
    if !supports_delta_allocation(inst, &p, &b, delta) {
        return Err(NswError::InvalidMarketState("initial prices support no Δ-allocation".into()));
    }
    let cap = iteration_cap(inst);
    let mut ctx = RunContext::new(cap, opts.trace);
    let mut total_iterations = 0;
    let mut last = None;
    for r in 0..phases {
        ctx.phase = r;
        ctx.iterations = 0;
        let out = price_increase(inst, delta, &p, &b, &mut ctx)?;
        total_iterations += out.iterations;
        p = out.prices.clone();
        b = out.bang_per_buck.clone();
        last = Some(out);
        if r + 1 < phases {
            delta *= 0.5;
        }
    }
    let out = last.expect("at least one phase");
    let (allocation, spending) = extract_allocation(inst, &p, &b, &out.snapshot);
    Ok(MarketOutcome {
        eps_eq: inst.total_items() as f64 * delta + money_tolerance(inst),
        prices: p,
        bang_per_buck: b,
        allocation,
        spending,
        delta,
        phases,
        iterations: total_iterations,
        trace: ctx.trace.unwrap_or_default(),
    })
}

/// Turns a full Δ-allocation into per-triplet allocation and spending.
///
/// Active spending is trimmed so no copy is bought beyond one unit and no type
/// beyond `min(1, p_i)` per copy; this drops at most `K Δ` of money per agent.
pub fn extract_allocation(
    inst: &Instance,
    p: &[f64],
    b: &[f64],
    snap: &MarketSnapshot,
) -> (Allocation, SpendingRecord) {
    let cls = &snap.classification;
    let (n, m) = (inst.n(), inst.m());
    let mut active = vec![vec![0.0; m]; n];
    for (e, edge) in snap.network.edges.iter().enumerate() {
        let limit = cls.active_count[edge.agent][edge.item] as f64 * p[edge.item].min(1.0);
        active[edge.agent][edge.item] = snap.flow.edge_flow[e].min(limit);
    }
    for i in 0..m {
        let limit = (inst.supply(i) - cls.superior_count[i]) as f64 * p[i].min(1.0);
        let total: f64 = (0..n).map(|a| active[a][i]).sum();
        if total > limit && total > 0.0 {
            let s = limit / total;
            for row in active.iter_mut() {
                row[i] *= s;
            }
        }
    }
    let mut x = Allocation::zeros(inst);
    let mut spending = SpendingRecord::zeros(inst);
    for a in 0..n {
        for i in 0..m {
            let per_copy = p[i].min(1.0);
            let mut money = active[a][i];
            for j in 0..inst.supply(i) {
                let t = Triplet::new(a, i, j);
                match cls.class[a][i][j] {
                    ItemClass::Superior => {
                        x.set(t, 1.0);
                        spending.base[a][i][j] = p[i];
                        spending.extra[a][i][j] = inst.u(a, i, j) / b[a] - p[i];
                    }
                    ItemClass::Active if money > 0.0 && p[i] > 0.0 => {
                        let take = money.min(per_copy);
                        money -= take;
                        x.set(t, (take / p[i]).min(1.0));
                        spending.base[a][i][j] = take;
                    }
                    _ => {}
                }
            }
        }
    }
    x.refresh_integral();
    (x, spending)
}
