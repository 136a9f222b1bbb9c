//! Saddle-point relaxation `sup_{x, alpha} inf_{y, z} ln p_x(e^y) + ln q(alpha e^z) - <alpha, y> - <alpha, z>`.
//!
//! Both polynomials are `n`-homogeneous, so the infimum is `-inf` unless
//! `sum alpha = n`; `alpha` is kept on that scaled simplex (and below the
//! supplies, where `q` has no monomials) and `y`, `z` are centered.

use serde::{Deserialize, Serialize};

use super::poly::{eval_p_forms, eval_q_log, linear_forms};
use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance};

/// Inner iterates are clipped to this box, which bounds divergence when the
/// infimum is `-inf`.
const BOX: f64 = 60.0;
const INNER_MAX_ITER: usize = 200;
const ARMIJO: f64 = 1e-4;
const PATIENCE: usize = 50;
const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSolution {
    pub x: Allocation,
    pub alpha: Vec<f64>,
    /// Saddle value in log space.
    pub value: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap stopped the ascent or the best inner
    /// problem did not reach the gradient tolerance.
    pub converged: bool,
}

/// `ln p_x(e^y) + ln q(alpha e^z) - <alpha, y> - <alpha, z>`.
pub fn objective(inst: &Instance, x: &Allocation, alpha: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    let m = inst.m();
    if alpha.len() != m || y.len() != m || z.len() != m {
        return Err(NswError::ShapeMismatch(format!("alpha, y, z must have {m} entries")));
    }
    if let Some(i) = alpha.iter().position(|&a| !(a >= 0.0)) {
        return Err(NswError::Polynomial(format!("alpha_{i} = {} is negative", alpha[i])));
    }
    let p = eval_p_forms(&linear_forms(inst, x), y)?.0.log_value;
    let log_w: Vec<f64> = alpha.iter().zip(z).map(|(a, z)| a.ln() + z).collect();
    let q = eval_q_log(inst.supplies(), inst.n(), &log_w)?.log_value;
    Ok(p + q - dot(alpha, y) - dot(alpha, z))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `a d = b` by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut d = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * d[c]).sum();
        d[r] = (b[r] - s) / a[r][r];
    }
    Some(d)
}

/// A smooth convex function that is invariant under adding a constant vector.
trait Centered {
    fn value_grad(&self, v: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn hessian(&self, v: &[f64], grad: &[f64]) -> Result<Vec<Vec<f64>>>;
}

/// Regularized Newton descent on centered vectors; returns the point, its
/// value and whether the centered gradient reached `tol`.
fn minimize(f: &dyn Centered, mut v: Vec<f64>, tol: f64) -> Result<(Vec<f64>, f64, bool)> {
    center(&mut v);
    let (mut val, mut g) = f.value_grad(&v)?;
    center(&mut g);
    for _ in 0..INNER_MAX_ITER {
        let gnorm = max_abs(&g);
        if gnorm <= tol {
            return Ok((v, val, true));
        }
        let mut h = f.hessian(&v, &g)?;
        let mu = 1e-12 + g.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += mu;
        }
        let mut d = match solve_linear(h, g.iter().map(|x| -x).collect()) {
            Some(d) => d,
            None => g.iter().map(|x| -x).collect(),
        };
        center(&mut d);
        let slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|x| -x).collect();
        }
        let slope = dot(&g, &d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = v.iter().zip(&d).map(|(v, d)| (v + t * d).clamp(-BOX, BOX)).collect();
            center(&mut cand);
            if let Ok((cv, cg)) = f.value_grad(&cand) {
                if cv <= val + ARMIJO * t * slope {
                    accepted = Some((cand, cv, cg));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, cv, mut cg)) => {
                center(&mut cg);
                v = cand;
                val = cv;
                g = cg;
            }
            None => break,
        }
    }
    let done = max_abs(&g) <= tol;
    Ok((v, val, done))
}

struct PPart<'a> {
    forms: &'a [Vec<f64>],
    alpha: &'a [f64],
}

impl Centered for PPart<'_> {
    fn value_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = eval_p_forms(self.forms, y)?.0;
        let g = e.gradient.iter().zip(self.alpha).map(|(g, a)| g - a).collect();
        Ok((e.log_value - dot(self.alpha, y), g))
    }

    fn hessian(&self, y: &[f64], _: &[f64]) -> Result<Vec<Vec<f64>>> {
        let shares = eval_p_forms(self.forms, y)?.1;
        let m = y.len();
        let mut h = vec![vec![0.0; m]; m];
        for s in &shares {
            for i in 0..m {
                h[i][i] += s[i];
                for j in 0..m {
                    h[i][j] -= s[i] * s[j];
                }
            }
        }
        Ok(h)
    }
}

struct QPart<'a> {
    k: &'a [usize],
    n: usize,
    alpha: &'a [f64],
    log_alpha: Vec<f64>,
}

impl QPart<'_> {
    fn grad_q(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let log_w: Vec<f64> = self.log_alpha.iter().zip(z).map(|(a, z)| a + z).collect();
        let e = eval_q_log(self.k, self.n, &log_w)?;
        Ok((e.log_value, e.gradient))
    }
}

impl Centered for QPart<'_> {
    fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (lq, gq) = self.grad_q(z)?;
        Ok((lq - dot(self.alpha, z), gq.iter().zip(self.alpha).map(|(g, a)| g - a).collect()))
    }

    /// Central differences of the analytic gradient.
    fn hessian(&self, z: &[f64], _: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = z.len();
        let step = 1e-5;
        let mut h = vec![vec![0.0; m]; m];
        let mut probe = z.to_vec();
        for i in 0..m {
            probe[i] = z[i] + step;
            let up = self.grad_q(&probe)?.1;
            probe[i] = z[i] - step;
            let down = self.grad_q(&probe)?.1;
            probe[i] = z[i];
            for j in 0..m {
                h[i][j] = (up[j] - down[j]) / (2.0 * step);
            }
        }
        for i in 0..m {
            for j in 0..i {
                let s = 0.5 * (h[i][j] + h[j][i]);
                h[i][j] = s;
                h[j][i] = s;
            }
        }
        Ok(h)
    }
}

/// The inner infimum at fixed `(x, alpha)`, warm-started from `(y, z)`.
#[derive(Debug, Clone)]
struct Inner {
    value: f64,
    y: Vec<f64>,
    z: Vec<f64>,
    converged: bool,
}

fn inner(inst: &Instance, forms: &[Vec<f64>], alpha: &[f64], y0: &[f64], z0: &[f64], tol: f64) -> Result<Inner> {
    let (y, vp, cp) = minimize(&PPart { forms, alpha }, y0.to_vec(), tol)?;
    let q = QPart { k: inst.supplies(), n: inst.n(), alpha, log_alpha: alpha.iter().map(|a| a.ln()).collect() };
    let (z, vq, cq) = minimize(&q, z0.to_vec(), tol)?;
    Ok(Inner { value: vp + vq, y, z, converged: cp && cq })
}

/// Euclidean projection onto `{0 <= v <= cap_i, sum v = total}` (or `<= total`
/// when `at_most`), by bisection on the shift.
fn project_capped(v: &[f64], caps: &[f64], total: f64, at_most: bool) -> Vec<f64> {
    let clipped = |tau: f64| -> Vec<f64> { v.iter().zip(caps).map(|(x, c)| (x - tau).clamp(0.0, *c)).collect() };
    let plain = clipped(0.0);
    if at_most && plain.iter().sum::<f64>() <= total {
        return plain;
    }
    let spread = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + caps.iter().fold(0.0f64, |m, c| m.max(*c));
    let (mut lo, mut hi) = (-spread - 1.0, spread + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clipped(mid).iter().sum::<f64>() > total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clipped(0.5 * (lo + hi))
}

/// Feasible region of the outer problem, flattened.
struct Layout<'a> {
    inst: &'a Instance,
}

impl Layout<'_> {
    fn project_x(&self, x: &mut Allocation) {
        let inst = self.inst;
        for i in 0..inst.m() {
            let k = inst.supply(i);
            let flat: Vec<f64> = (0..inst.n()).flat_map(|a| x.x[a][i].clone()).collect();
            let p = project_capped(&flat, &vec![1.0; flat.len()], k as f64, true);
            for a in 0..inst.n() {
                x.x[a][i].copy_from_slice(&p[a * k..(a + 1) * k]);
            }
        }
        x.refresh_integral();
    }

    fn project_alpha(&self, alpha: &[f64]) -> Vec<f64> {
        let caps: Vec<f64> = self.inst.supplies().iter().map(|&k| k as f64).collect();
        project_capped(alpha, &caps, self.inst.n() as f64, false)
    }
}

/// Supergradient of the saddle value at the inner optimum (Danskin).
fn outer_gradient(inst: &Instance, forms: &[Vec<f64>], inner: &Inner) -> Result<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
    let shift = inner.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ey: Vec<f64> = inner.y.iter().map(|v| (v - shift).exp()).collect();
    let mut gx = Vec::with_capacity(inst.n());
    for (a, c) in forms.iter().enumerate() {
        let total: f64 = c.iter().zip(&ey).map(|(c, e)| c * e).sum();
        if !(total > 0.0) {
            return Err(NswError::Polynomial(format!("linear form of agent {a} vanishes")));
        }
        gx.push(
            (0..inst.m())
                .map(|i| inst.marginals(a, i).iter().map(|u| u * ey[i] / total).collect())
                .collect(),
        );
    }
    let ga = inner.y.iter().zip(&inner.z).map(|(y, z)| -(y + z)).collect();
    Ok((gx, ga))
}

/// Outer ascent state at one `(x, alpha)`.
#[derive(Clone)]
struct Point {
    x: Allocation,
    alpha: Vec<f64>,
    inner: Inner,
}

fn evaluate(inst: &Instance, x: Allocation, alpha: Vec<f64>, warm: Option<&Inner>, tol: f64) -> Result<Point> {
    let m = inst.m();
    let zeros = vec![0.0; m];
    let (y0, z0) = warm.map_or((&zeros, &zeros), |w| (&w.y, &w.z));
    let forms = linear_forms(inst, &x);
    let inner = inner(inst, &forms, &alpha, y0, z0, tol)?;
    Ok(Point { x, alpha, inner })
}

/// Whether the relaxation is identically `-inf` (some agent values nothing,
/// or there are fewer items than agents).
fn degenerate(inst: &Instance) -> bool {
    inst.n() > inst.total_items()
        || (0..inst.n()).any(|a| (0..inst.m()).all(|i| inst.marginals(a, i).iter().all(|&u| u <= 0.0)))
}

fn uniform_start(inst: &Instance) -> (Allocation, Vec<f64>) {
    let n = inst.n() as f64;
    let mut x = Allocation::zeros(inst);
    for t in inst.triplets() {
        x.set(t, 1.0 / n);
    }
    x.refresh_integral();
    alpha_for(inst, x)
}

/// Pairs `x` with the degree profile of `p_x` at `y = 0`.
fn alpha_for(inst: &Instance, x: Allocation) -> (Allocation, Vec<f64>) {
    let forms = linear_forms(inst, &x);
    let mut alpha = vec![0.0; inst.m()];
    for c in &forms {
        let total: f64 = c.iter().sum();
        if total > 0.0 {
            for (a, v) in alpha.iter_mut().zip(c) {
                *a += v / total;
            }
        }
    }
    let alpha = Layout { inst }.project_alpha(&alpha);
    (x, alpha)
}

/// Outer variables flattened as `[x in triplet order, alpha]`.
fn flatten(inst: &Instance, x: &Allocation, alpha: &[f64]) -> Vec<f64> {
    inst.triplets().map(|t| x.get(t)).chain(alpha.iter().copied()).collect()
}

/// Projects a flattened point onto the feasible region.
fn project(inst: &Instance, v: &[f64], fixed_x: Option<&Allocation>) -> (Allocation, Vec<f64>) {
    let layout = Layout { inst };
    let t = v.len() - inst.m();
    let x = match fixed_x {
        Some(x) => x.clone(),
        None => {
            let mut x = Allocation::zeros(inst);
            for (t, &val) in inst.triplets().zip(&v[..t]) {
                x.x[t.agent][t.item][t.copy] = val;
            }
            layout.project_x(&mut x);
            x
        }
    };
    (x, layout.project_alpha(&v[t..]))
}

/// Nonmonotone spectral projected gradient ascent over `alpha` (and `x`
/// unless `fix_x`), with Barzilai-Borwein steps.
fn ascend(inst: &Instance, x0: Allocation, alpha0: Vec<f64>, fix_x: bool, tol: f64, max_iter: usize) -> Result<RelaxationSolution> {
    const MEMORY: usize = 10;
    let fixed = fix_x.then(|| x0.clone());
    let mut cur = evaluate(inst, x0, alpha0, None, tol)?;
    let mut best = cur.clone();
    let gradient = |p: &Point| -> Result<Vec<f64>> {
        let (gx, ga) = outer_gradient(inst, &linear_forms(inst, &p.x), &p.inner)?;
        let xs = inst.triplets().map(|t| if fix_x { 0.0 } else { gx[t.agent][t.item][t.copy] });
        Ok(xs.chain(ga).collect())
    };
    let mut v = flatten(inst, &cur.x, &cur.alpha);
    let mut g = gradient(&cur)?;
    let mut history = vec![cur.inner.value];
    let mut step = 1.0;
    let mut stale = 0usize;
    let mut iterations = 0usize;
    let mut stopped = false;
    while iterations < max_iter {
        iterations += 1;
        let target: Vec<f64> = v.iter().zip(&g).map(|(v, g)| v + step * g).collect();
        let (px, pa) = project(inst, &target, fixed.as_ref());
        let d: Vec<f64> = flatten(inst, &px, &pa).iter().zip(&v).map(|(p, v)| p - v).collect();
        if max_abs(&d) <= 1e-12 {
            stopped = true;
            break;
        }
        let slope = dot(&g, &d);
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lambda = 1.0;
        let mut moved = None;
        while lambda > 1e-12 {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(v, d)| v + lambda * d).collect();
            let (x, alpha) = project(inst, &trial, fixed.as_ref());
            if let Ok(cand) = evaluate(inst, x, alpha, Some(&cur.inner), tol) {
                if cand.inner.value.is_finite() && cand.inner.value >= reference + ARMIJO * lambda * slope {
                    moved = Some(cand);
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some(next) = moved else {
            stopped = true;
            break;
        };
        let gain = next.inner.value - best.inner.value;
        let nv = flatten(inst, &next.x, &next.alpha);
        let ng = gradient(&next)?;
        let s: Vec<f64> = nv.iter().zip(&v).map(|(a, b)| a - b).collect();
        let yk: Vec<f64> = ng.iter().zip(&g).map(|(a, b)| a - b).collect();
        let curvature = -dot(&s, &yk);
        step = if curvature > 0.0 { (dot(&s, &s) / curvature).clamp(1e-10, 1e10) } else { 1e10f64.min(step * 4.0) };
        cur = next;
        v = nv;
        g = ng;
        history.push(cur.inner.value);
        if history.len() > MEMORY {
            history.remove(0);
        }
        if cur.inner.converged && (!best.inner.converged || cur.inner.value > best.inner.value) {
            best = cur.clone();
        }
        if gain < MIN_IMPROVEMENT {
            stale += 1;
            if stale >= PATIENCE {
                stopped = true;
                break;
            }
        } else {
            stale = 0;
        }
    }
    Ok(RelaxationSolution {
        value: best.inner.value,
        converged: stopped && best.inner.converged,
        x: best.x,
        alpha: best.alpha,
        y: best.inner.y,
        z: best.inner.z,
        iterations,
    })
}

fn degenerate_solution(inst: &Instance) -> RelaxationSolution {
    let (x, alpha) = uniform_start(inst);
    let m = inst.m();
    RelaxationSolution { x, alpha, value: f64::NEG_INFINITY, y: vec![0.0; m], z: vec![0.0; m], iterations: 0, converged: true }
}

/// Approximately solves the relaxation; `tol` bounds the inner gradient norm.
pub fn solve_relaxation(inst: &Instance, tol: f64, max_iter: usize) -> Result<RelaxationSolution> {
    if degenerate(inst) {
        return Ok(degenerate_solution(inst));
    }
    let (x, alpha) = uniform_start(inst);
    ascend(inst, x, alpha, false, tol, max_iter)
}

/// Optimizes only `alpha` (and the inner variables) for a fixed allocation.
pub fn relaxation_at(inst: &Instance, x: &Allocation, tol: f64, max_iter: usize) -> Result<RelaxationSolution> {
    x.check_feasible(inst)?;
    if degenerate(inst) {
        return Ok(RelaxationSolution { x: x.clone(), ..degenerate_solution(inst) });
    }
    let (x, alpha) = alpha_for(inst, x.clone());
    ascend(inst, x, alpha, true, tol, max_iter)
}
