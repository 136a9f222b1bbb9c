//! Instance and allocation model for Nash social welfare with separable
//! piecewise-linear concave (SPLC) utilities.
//!
//! An agent's utility for item type `i` is described by its marginal values
//! `u[a][i][j]` for the `j`-th copy, which must be nonincreasing in `j`.

use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};

/// Absolute tolerance shared by every comparison on money, prices and utilities.
pub const EPS_NUM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceDoc", into = "InstanceDoc")]
pub struct Instance {
    n: usize,
    m: usize,
    k: Vec<usize>,
    u: Vec<Vec<Vec<f64>>>,
}

/// On-disk form of an [`Instance`]; validated on conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceDoc {
    pub n: usize,
    pub m: usize,
    pub k: Vec<usize>,
    pub u: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<InstanceDoc> for Instance {
    type Error = NswError;

    fn try_from(doc: InstanceDoc) -> Result<Self> {
        let violations = validate_parts(doc.n, doc.m, &doc.k, &doc.u);
        if violations.is_empty() {
            Ok(Instance { n: doc.n, m: doc.m, k: doc.k, u: doc.u })
        } else {
            Err(NswError::InvalidInstance(violations))
        }
    }
}

impl From<Instance> for InstanceDoc {
    fn from(inst: Instance) -> Self {
        InstanceDoc { n: inst.n, m: inst.m, k: inst.k, u: inst.u }
    }
}

/// An `(agent, type, copy)` index. All indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub agent: usize,
    pub item: usize,
    pub copy: usize,
}

impl Triplet {
    pub fn new(agent: usize, item: usize, copy: usize) -> Self {
        Triplet { agent, item, copy }
    }
}

fn validate_parts(n: usize, m: usize, k: &[usize], u: &[Vec<Vec<f64>>]) -> Vec<String> {
    let mut out = Vec::new();
    if n == 0 {
        out.push("agent count n must be at least 1".to_string());
    }
    if m == 0 {
        out.push("item type count m must be at least 1".to_string());
    }
    if k.len() != m {
        out.push(format!("supply list has {} entries, expected m = {}", k.len(), m));
    }
    for (i, &ki) in k.iter().enumerate() {
        if ki == 0 {
            out.push(format!("supply k[{i}] must be at least 1"));
        }
    }
    if u.len() != n {
        out.push(format!("utility table has {} agents, expected n = {}", u.len(), n));
    }
    for (a, ua) in u.iter().enumerate() {
        if ua.len() != m {
            out.push(format!("agent {a} has {} item types, expected m = {}", ua.len(), m));
            continue;
        }
        for (i, uai) in ua.iter().enumerate() {
            if let Some(&ki) = k.get(i) {
                if uai.len() != ki {
                    out.push(format!(
                        "agent {a} type {i} lists {} marginals, expected k[{i}] = {ki}",
                        uai.len()
                    ));
                }
            }
            for (j, &v) in uai.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    out.push(format!("nonnegative marginals: u[{a}][{i}][{j}] = {v}"));
                }
            }
            for j in 1..uai.len() {
                if uai[j] > uai[j - 1] {
                    out.push(format!(
                        "nonincreasing marginals: u[{a}][{i}][{j}] = {} exceeds u[{a}][{i}][{}] = {}",
                        uai[j],
                        j - 1,
                        uai[j - 1]
                    ));
                }
            }
        }
    }
    out
}

/// Checks every instance invariant and returns the list of violations.
pub fn validate(doc: &InstanceDoc) -> std::result::Result<(), Vec<String>> {
    let v = validate_parts(doc.n, doc.m, &doc.k, &doc.u);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

impl Instance {
    pub fn new(k: Vec<usize>, u: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let doc = InstanceDoc { n: u.len(), m: k.len(), k, u };
        Instance::try_from(doc)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn supply(&self, i: usize) -> usize {
        self.k[i]
    }

    pub fn supplies(&self) -> &[usize] {
        &self.k
    }

    /// Total number of items, `K = sum_i k_i`.
    pub fn total_items(&self) -> usize {
        self.k.iter().sum()
    }

    pub fn u(&self, a: usize, i: usize, j: usize) -> f64 {
        self.u[a][i][j]
    }

    pub fn marginals(&self, a: usize, i: usize) -> &[f64] {
        &self.u[a][i]
    }

    pub fn utilities(&self) -> &Vec<Vec<Vec<f64>>> {
        &self.u
    }

    /// Largest ratio between two positive marginals of the same agent.
    pub fn v_max(&self) -> f64 {
        let mut worst = 1.0f64;
        for ua in &self.u {
            let pos = ua.iter().flatten().copied().filter(|&v| v > 0.0);
            let (lo, hi) = pos.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > 0.0 {
                worst = worst.max(hi / lo);
            }
        }
        worst
    }

    /// Utility agent `a` obtains from holding `c` copies of type `i` (prefix sum).
    pub fn prefix_utility(&self, a: usize, i: usize, c: usize) -> f64 {
        self.u[a][i][..c.min(self.k[i])].iter().sum()
    }

    /// Utility of agent `a` when it holds `counts[i]` copies of each type.
    pub fn utility_of_counts(&self, a: usize, counts: &[usize]) -> f64 {
        counts.iter().enumerate().map(|(i, &c)| self.prefix_utility(a, i, c)).sum()
    }

    /// Returns a copy with every marginal of agent `a` multiplied by `scale[a]`.
    pub fn scaled(&self, scale: &[f64]) -> Result<Instance> {
        if scale.len() != self.n {
            return Err(NswError::ShapeMismatch(format!(
                "{} scale factors for {} agents",
                scale.len(),
                self.n
            )));
        }
        let u = self
            .u
            .iter()
            .zip(scale)
            .map(|(ua, &s)| ua.iter().map(|row| row.iter().map(|v| v * s).collect()).collect())
            .collect();
        Instance::new(self.k.clone(), u)
    }

    /// Every triplet `(a, i, j)` in lexicographic order.
    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        (0..self.n).flat_map(move |a| {
            (0..self.m).flat_map(move |i| (0..self.k[i]).map(move |j| Triplet::new(a, i, j)))
        })
    }

    pub fn check_triplet(&self, t: Triplet) -> Result<()> {
        if t.agent >= self.n || t.item >= self.m || t.copy >= self.k[t.item] {
            return Err(NswError::IndexOutOfRange(format!("{t:?}")));
        }
        Ok(())
    }
}

/// Fractional or integral assignment `x[a][i][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub x: Vec<Vec<Vec<f64>>>,
    pub integral: bool,
}

impl Allocation {
    pub fn zeros(inst: &Instance) -> Self {
        let x = (0..inst.n())
            .map(|_| inst.supplies().iter().map(|&k| vec![0.0; k]).collect())
            .collect();
        Allocation { x, integral: true }
    }

    /// Prefix-form integral allocation where agent `a` holds `counts[a][i]` copies of type `i`.
    pub fn from_counts(inst: &Instance, counts: &[Vec<usize>]) -> Result<Self> {
        let mut alloc = Allocation::zeros(inst);
        for (a, ca) in counts.iter().enumerate() {
            for (i, &c) in ca.iter().enumerate() {
                if c > inst.supply(i) {
                    return Err(NswError::IndexOutOfRange(format!(
                        "agent {a} holds {c} copies of type {i} with supply {}",
                        inst.supply(i)
                    )));
                }
                for j in 0..c {
                    alloc.x[a][i][j] = 1.0;
                }
            }
        }
        Ok(alloc)
    }

    pub fn get(&self, t: Triplet) -> f64 {
        self.x[t.agent][t.item][t.copy]
    }

    pub fn set(&mut self, t: Triplet, v: f64) {
        self.x[t.agent][t.item][t.copy] = v;
        if v != 0.0 && v != 1.0 {
            self.integral = false;
        }
    }

    /// Recomputes the integral flag from the stored values.
    pub fn refresh_integral(&mut self) {
        self.integral = self.x.iter().flatten().flatten().all(|&v| v == 0.0 || v == 1.0);
    }

    /// Number of copies of each type held by each agent. Requires an integral allocation.
    pub fn counts(&self) -> Result<Vec<Vec<usize>>> {
        if !self.x.iter().flatten().flatten().all(|&v| v == 0.0 || v == 1.0) {
            return Err(NswError::NotIntegral);
        }
        Ok(self
            .x
            .iter()
            .map(|xa| xa.iter().map(|row| row.iter().filter(|&&v| v == 1.0).count()).collect())
            .collect())
    }

    /// Checks shape, bounds and supply feasibility against `inst`.
    pub fn check_feasible(&self, inst: &Instance) -> Result<()> {
        if self.x.len() != inst.n() {
            return Err(NswError::ShapeMismatch(format!(
                "{} agents in allocation, {} in instance",
                self.x.len(),
                inst.n()
            )));
        }
        let mut per_type = vec![0.0; inst.m()];
        for (a, xa) in self.x.iter().enumerate() {
            if xa.len() != inst.m() {
                return Err(NswError::ShapeMismatch(format!("agent {a} has {} types", xa.len())));
            }
            for (i, row) in xa.iter().enumerate() {
                if row.len() != inst.supply(i) {
                    return Err(NswError::ShapeMismatch(format!(
                        "agent {a} type {i} has {} copies, supply {}",
                        row.len(),
                        inst.supply(i)
                    )));
                }
                for (j, &v) in row.iter().enumerate() {
                    if !(-EPS_NUM..=1.0 + EPS_NUM).contains(&v) {
                        return Err(NswError::ShapeMismatch(format!("x[{a}][{i}][{j}] = {v} outside [0, 1]")));
                    }
                    per_type[i] += v;
                }
            }
        }
        for (i, &s) in per_type.iter().enumerate() {
            if s > inst.supply(i) as f64 + 1e-6 {
                return Err(NswError::ShapeMismatch(format!(
                    "type {i} allocated {s} copies, supply {}",
                    inst.supply(i)
                )));
            }
        }
        Ok(())
    }
}

/// `u_a(x) = sum_i sum_j x_aij u_aij`, evaluated exactly as written.
pub fn agent_utility(inst: &Instance, x: &Allocation, a: usize) -> Result<f64> {
    if a >= inst.n() {
        return Err(NswError::IndexOutOfRange(format!("agent {a} of {}", inst.n())));
    }
    let xa = x
        .x
        .get(a)
        .ok_or_else(|| NswError::ShapeMismatch(format!("allocation has no row for agent {a}")))?;
    let mut total = 0.0;
    for (i, row) in xa.iter().enumerate().take(inst.m()) {
        for (j, &v) in row.iter().enumerate().take(inst.supply(i)) {
            total += v * inst.u(a, i, j);
        }
    }
    Ok(total)
}

/// Nash social welfare in log domain plus its exponentiated forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NswValue {
    /// `sum_a log u_a`; `-inf` when some agent has zero utility.
    pub log_product: f64,
    pub agents: usize,
    pub product: f64,
    pub geometric_mean: f64,
}

impl NswValue {
    pub fn from_utilities(utilities: &[f64]) -> Self {
        let agents = utilities.len();
        let log_product: f64 = if utilities.iter().any(|&v| v <= 0.0) {
            f64::NEG_INFINITY
        } else {
            utilities.iter().map(|v| v.ln()).sum()
        };
        let direct: f64 = utilities.iter().product();
        let product = if log_product == f64::NEG_INFINITY {
            0.0
        } else if direct.is_finite() && direct > 0.0 {
            direct
        } else {
            log_product.exp()
        };
        let geometric_mean = if log_product == f64::NEG_INFINITY {
            0.0
        } else {
            (log_product / agents as f64).exp()
        };
        NswValue { log_product, agents, product, geometric_mean }
    }
}

pub fn utilities(inst: &Instance, x: &Allocation) -> Result<Vec<f64>> {
    (0..inst.n()).map(|a| agent_utility(inst, x, a)).collect()
}

pub fn nsw(inst: &Instance, x: &Allocation) -> Result<NswValue> {
    Ok(NswValue::from_utilities(&utilities(inst, x)?))
}

/// Shifts every agent's holdings of each type to the lowest-index copies.
pub fn canonicalize(inst: &Instance, x: &Allocation) -> Result<Allocation> {
    x.check_feasible(inst)?;
    let counts = x.counts()?;
    Allocation::from_counts(inst, &counts)
}
