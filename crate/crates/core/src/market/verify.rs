//! Checks the three conditions of a spending-restricted equilibrium.

use serde::{Deserialize, Serialize};

use super::equilibrium::{classify_triplet, ItemClass, SpendingRecord};
use crate::instance::{Allocation, Instance};
use crate::rounding::graph::pack_units;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// 1: admissible spending, 2: budget spent, 3: base spending per item.
    pub condition: u8,
    /// Offending triplet, agent or unit (`[agent, type, copy]`, `[agent]`, `[type, unit]`).
    pub index: Vec<usize>,
    pub magnitude: f64,
    pub detail: String,
}

impl Violation {
    fn new(condition: u8, index: Vec<usize>, magnitude: f64, detail: impl Into<String>) -> Self {
        Violation { condition, index, magnitude, detail: detail.into() }
    }
}

/// Returns every violated equilibrium condition at tolerance `eps`.
///
/// Base spending is taken as `x_aij p_i`; `spending.base` must agree with it.
pub fn verify_equilibrium(
    inst: &Instance,
    p: &[f64],
    x: &Allocation,
    b: &[f64],
    spending: &SpendingRecord,
    eps: f64,
) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if p.len() != inst.m() || b.len() != inst.n() || x.check_feasible(inst).is_err() {
        out.push(Violation::new(0, vec![], f64::INFINITY, "shape or feasibility mismatch"));
        return Err(out);
    }
    if let Some(a) = b.iter().position(|&v| !(v > 0.0)) {
        out.push(Violation::new(1, vec![a], b[a], "bang-per-buck must be positive"));
        return Err(out);
    }

    for t in inst.triplets() {
        let (a, i, j) = (t.agent, t.item, t.copy);
        let u = inst.u(a, i, j);
        let xv = x.get(t);
        let base = xv * p[i];
        let extra = spending.extra[a][i][j];
        let idx = vec![a, i, j];
        if (spending.base[a][i][j] - base).abs() > eps {
            out.push(Violation::new(1, idx.clone(), (spending.base[a][i][j] - base).abs(), "base spending != x p"));
        }
        match classify_triplet(u, p[i], b[a]) {
            ItemClass::Superior => {
                if 1.0 - xv > eps {
                    out.push(Violation::new(1, idx.clone(), 1.0 - xv, "superior item not fully bought"));
                }
                let want = u / b[a] - p[i];
                if (extra - want).abs() > eps {
                    out.push(Violation::new(1, idx, (extra - want).abs(), "superior extra spending != u/b - p"));
                }
            }
            ItemClass::Active => {
                if extra.abs() > eps {
                    out.push(Violation::new(1, idx, extra.abs(), "extra spending on an active item"));
                }
            }
            ItemClass::Inferior => {
                let spent = base + extra.abs();
                if xv > eps || spent > eps {
                    out.push(Violation::new(1, idx, xv.max(spent), "spending on an inferior item"));
                }
            }
        }
    }

    for a in 0..inst.n() {
        let total: f64 = inst
            .triplets()
            .filter(|t| t.agent == a)
            .map(|t| x.get(t) * p[t.item] + spending.extra[a][t.item][t.copy])
            .sum();
        if (total - 1.0).abs() > eps {
            out.push(Violation::new(2, vec![a], (total - 1.0).abs(), format!("agent spends {total}")));
        }
    }

    match pack_units(inst, p, x, spending) {
        Ok(units) => {
            for i in 0..inst.m() {
                let want = p[i].min(1.0);
                let of_type: Vec<_> = units.iter().filter(|u| u.item == i).collect();
                for unit in &of_type {
                    let spent = unit.base_spending();
                    if (spent - want).abs() > eps {
                        out.push(Violation::new(3, vec![i, unit.index], (spent - want).abs(), "unit base spending != min(p, 1)"));
                    }
                }
                if want > eps {
                    for t in of_type.len()..inst.supply(i) {
                        out.push(Violation::new(3, vec![i, t], want, "unit receives no spending"));
                    }
                }
            }
        }
        Err(e) => out.push(Violation::new(3, vec![], f64::INFINITY, e.to_string())),
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Triplet;
    use crate::market::equilibrium::{scaling_algorithm, ScalingOptions};

    #[test]
    fn scaling_output_verifies() {
        let inst = Instance::new(vec![2], vec![vec![vec![2.0, 1.0]]]).unwrap();
        let o = scaling_algorithm(&inst, &ScalingOptions::default()).unwrap();
        verify_equilibrium(&inst, &o.prices, &o.allocation, &o.bang_per_buck, &o.spending, o.eps_eq).unwrap();
    }

    #[test]
    fn price_perturbation_breaks_unit_spending() {
        // Agents 0 and 1 only want type 0 (two copies), so its price exceeds 1.
        let inst = Instance::new(
            vec![2, 1],
            vec![
                vec![vec![1.0, 1.0], vec![0.0]],
                vec![vec![1.0, 1.0], vec![0.0]],
                vec![vec![1.0, 1.0], vec![0.1]],
            ],
        )
        .unwrap();
        let o = scaling_algorithm(&inst, &ScalingOptions::default()).unwrap();
        assert!(o.prices[0] > 1.0, "{:?}", o.prices);
        verify_equilibrium(&inst, &o.prices, &o.allocation, &o.bang_per_buck, &o.spending, o.eps_eq).unwrap();
        let eps = 1e-6;
        let mut p = o.prices.clone();
        p[0] += 10.0 * eps * p[0];
        let mut s = o.spending.clone();
        for a in 0..3 {
            for j in 0..2 {
                s.base[a][0][j] = o.allocation.x[a][0][j] * p[0];
            }
        }
        let v = verify_equilibrium(&inst, &p, &o.allocation, &o.bang_per_buck, &s, eps).unwrap_err();
        assert!(v.iter().any(|v| v.condition == 3), "{v:?}");
    }

    #[test]
    fn inferior_spending_flagged() {
        let inst = Instance::new(vec![1, 1], vec![vec![vec![2.0], vec![1.0]]]).unwrap();
        // b = 2: type 0 active at p = 1, type 1 inferior at p = 1.
        let mut x = Allocation::zeros(&inst);
        x.set(Triplet::new(0, 0, 0), 1.0);
        x.set(Triplet::new(0, 1, 0), 0.5);
        let mut s = SpendingRecord::zeros(&inst);
        s.base[0][0][0] = 1.0;
        s.base[0][1][0] = 0.5;
        let v = verify_equilibrium(&inst, &[1.0, 1.0], &x, &[2.0], &s, 1e-6).unwrap_err();
        assert!(v.iter().any(|v| v.condition == 1 && v.index == vec![0, 1, 0]));
    }
}
