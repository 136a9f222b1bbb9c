//! The polynomials `p_x(y) = prod_a sum_i y_i sum_j x_aij u_aij` and
//! `q(w) = [t^(K-n)] prod_i (t + w_i / k_i)^(k_i)`, evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};
use crate::instance::{Allocation, Instance};

/// Logarithm of a polynomial value and its logarithmic gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyEval {
    /// `ln f`.
    pub log_value: f64,
    /// `d ln f / d ln v_i` for each variable `v_i`.
    pub gradient: Vec<f64>,
}

/// `ln(e^a + e^b)` that tolerates `-inf` arguments.
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn ln_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|t| ((n - t) as f64 / (t + 1) as f64).ln()).sum()
}

/// Per-agent, per-type coefficients `c_ai = sum_j x_aij u_aij` of `p_x`.
pub fn linear_forms(inst: &Instance, x: &Allocation) -> Vec<Vec<f64>> {
    (0..inst.n())
        .map(|a| {
            (0..inst.m())
                .map(|i| (0..inst.supply(i)).map(|j| x.x[a][i][j] * inst.u(a, i, j)).sum())
                .collect()
        })
        .collect()
}

/// `p_x` at `y` given its linear forms; also returns the per-agent shares
/// `c_ai y_i / sum_l c_al y_l`.
pub(crate) fn eval_p_forms(forms: &[Vec<f64>], log_y: &[f64]) -> Result<(PolyEval, Vec<Vec<f64>>)> {
    let m = log_y.len();
    let shift = log_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_y.iter().map(|v| (v - shift).exp()).collect();
    let mut log_value = 0.0;
    let mut gradient = vec![0.0; m];
    let mut shares = Vec::with_capacity(forms.len());
    for (a, c) in forms.iter().enumerate() {
        if c.len() != m {
            return Err(NswError::ShapeMismatch(format!("linear form of agent {a} has {} terms, expected {m}", c.len())));
        }
        let terms: Vec<f64> = c.iter().zip(&scaled).map(|(c, y)| c * y).collect();
        let total: f64 = terms.iter().sum();
        if !(total > 0.0) {
            return Err(NswError::Polynomial(format!("linear form of agent {a} vanishes")));
        }
        log_value += total.ln() + shift;
        let share: Vec<f64> = terms.iter().map(|t| t / total).collect();
        for (g, s) in gradient.iter_mut().zip(&share) {
            *g += s;
        }
        shares.push(share);
    }
    Ok((PolyEval { log_value, gradient }, shares))
}

/// Evaluates `ln p_x(y)` and its gradient with respect to `ln y`.
pub fn eval_p(inst: &Instance, x: &Allocation, y: &[f64]) -> Result<PolyEval> {
    if y.len() != inst.m() {
        return Err(NswError::ShapeMismatch(format!("y has {} entries, expected {}", y.len(), inst.m())));
    }
    if let Some(i) = y.iter().position(|&v| !(v > 0.0)) {
        return Err(NswError::Polynomial(format!("y_{i} = {} is not positive", y[i])));
    }
    let log_y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(eval_p_forms(&linear_forms(inst, x), &log_y)?.0)
}

/// Log-coefficients `ln(C(k, c) (w / k)^c)` for `c = 0..=k`.
fn factor_terms(k: usize, log_w: f64) -> Vec<f64> {
    let log_k = (k as f64).ln();
    (0..=k)
        .map(|c| if c == 0 { 0.0 } else { ln_binomial(k, c) + c as f64 * (log_w - log_k) })
        .collect()
}

/// Multiplies a degree-truncated log-coefficient vector by one factor.
fn convolve(acc: &[f64], terms: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; n + 1];
    for (d, &a) in acc.iter().enumerate() {
        if a == f64::NEG_INFINITY {
            continue;
        }
        for (c, &t) in terms.iter().enumerate().take(n + 1 - d) {
            out[d + c] = log_add(out[d + c], a + t);
        }
    }
    out
}

/// Evaluates `ln q(w)` from `ln w` (entries may be `-inf` for `w_i = 0`).
pub(crate) fn eval_q_log(k: &[usize], n: usize, log_w: &[f64]) -> Result<PolyEval> {
    let m = k.len();
    if log_w.len() != m {
        return Err(NswError::ShapeMismatch(format!("w has {} entries, expected {m}", log_w.len())));
    }
    let total: usize = k.iter().sum();
    if n > total {
        return Err(NswError::Polynomial(format!("q vanishes: {n} agents exceed {total} items")));
    }
    let terms: Vec<Vec<f64>> = k.iter().zip(log_w).map(|(&k, &lw)| factor_terms(k, lw)).collect();
    // forward[i]: coefficients of the first i factors; backward[i]: factors i..m.
    let mut forward = vec![vec![f64::NEG_INFINITY; n + 1]];
    forward[0][0] = 0.0;
    for t in &terms {
        let next = convolve(forward.last().unwrap(), t, n);
        forward.push(next);
    }
    let mut backward = vec![vec![f64::NEG_INFINITY; n + 1]; m + 1];
    backward[m][0] = 0.0;
    for i in (0..m).rev() {
        backward[i] = convolve(&backward[i + 1], &terms[i], n);
    }
    let log_value = forward[m][n];
    if log_value == f64::NEG_INFINITY {
        return Err(NswError::Polynomial("q vanishes at w".into()));
    }
    // d ln q / d ln w_i is the mean degree of w_i over the monomials weighted by value.
    let gradient = (0..m)
        .map(|i| {
            let mut g = 0.0;
            for (c, &t) in terms[i].iter().enumerate().skip(1) {
                if t == f64::NEG_INFINITY || c > n {
                    continue;
                }
                let mut rest = f64::NEG_INFINITY;
                for d in 0..=n - c {
                    rest = log_add(rest, forward[i][d] + backward[i + 1][n - c - d]);
                }
                g += c as f64 * (t + rest - log_value).exp();
            }
            g
        })
        .collect();
    Ok(PolyEval { log_value, gradient })
}

/// Evaluates `ln q(w)` for supplies `k` and `n` agents, with the gradient with
/// respect to `ln w`.
pub fn eval_q(k: &[usize], n: usize, w: &[f64]) -> Result<PolyEval> {
    if let Some(i) = w.iter().position(|&v| !(v > 0.0)) {
        return Err(NswError::Polynomial(format!("w_{i} = {} is not positive", w[i])));
    }
    let log_w: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    eval_q_log(k, n, &log_w)
}

/// Coefficient of `prod_i w_i^(kappa_i)` in `q`: `prod_i k_i^(-kappa_i) C(k_i, kappa_i)`.
///
/// Zero when some `kappa_i > k_i`.
pub fn coeff_q(k: &[usize], kappa: &[usize]) -> f64 {
    if k.len() != kappa.len() || kappa.iter().zip(k).any(|(c, k)| c > k) {
        return 0.0;
    }
    k.iter()
        .zip(kappa)
        .map(|(&k, &c)| (ln_binomial(k, c) - c as f64 * (k as f64).ln()).exp())
        .product()
}
