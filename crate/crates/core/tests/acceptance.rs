//! Acceptance gate. Every check prints one `PASS`/`FAIL` line and fails its
//! test when the criterion is not met.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsw_core::generate::{generate, GeneratorConfig};
use nsw_core::market::{
    equilibrium::{unit_capacity, MarketSnapshot},
    scaling_algorithm, verify_equilibrium, MarketOutcome, ScalingOptions, Violation,
};
use nsw_core::oracle::{exact_inclusion_probability, solve_exact, ExactSolution, DEFAULT_LIMIT};
use nsw_core::pipeline::{bench, market_round, BenchConfig, MarketRound, PipelineOptions};
use nsw_core::rounding::{to_linear_instance, upper_bound};
use nsw_core::stable::{
    coeff_q, estimate_expected_welfare, eval_p, eval_q, sampling_lower_bound, solve_relaxation, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use nsw_core::{nsw, Allocation, Instance, Triplet};

/// Prints the result line (bypassing test output capture) and fails on `FAIL`.
fn report(name: &str, ok: bool, detail: String) {
    let line = format!("acceptance {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

const SUITE_SIZE: usize = 240;

struct Case {
    seed: u64,
    inst: Instance,
    market: MarketRound,
    verified: Result<(), Vec<Violation>>,
    opt: ExactSolution,
}

struct Suite {
    cases: Vec<Case>,
    failures: Vec<String>,
    market_time: Duration,
}

/// Instances with `n, m <= 4` and `k_i <= 3`, skipping the shapes that cannot
/// hold one item per agent.
fn suite_instances() -> impl Iterator<Item = (u64, Instance)> {
    (0..)
        .filter_map(|seed: u64| {
            let n = 1 + (seed % 4) as usize;
            let m = 1 + ((seed / 4) % 4) as usize;
            generate(&GeneratorConfig::new(seed, n, m, (1, 3))).ok().map(|inst| (seed, inst))
        })
        .take(SUITE_SIZE)
}

/// Market pipeline and exact optimum on every suite instance.
fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let mut cases = Vec::new();
        let mut failures = Vec::new();
        let mut market_time = Duration::ZERO;
        for (seed, inst) in suite_instances() {
            let start = Instant::now();
            let market = market_round(&inst, None);
            market_time += start.elapsed();
            let market = match market {
                Ok(m) => m,
                Err(e) => {
                    failures.push(format!("seed {seed}: {e}"));
                    continue;
                }
            };
            let o = &market.outcome;
            let verified = verify_equilibrium(&inst, &o.prices, &o.allocation, &o.bang_per_buck, &o.spending, o.eps_eq);
            let opt = solve_exact(&market.normalized, DEFAULT_LIMIT).expect("suite sizes are oracle-solvable");
            cases.push(Case { seed, inst, market, verified, opt });
        }
        Suite { cases, failures, market_time }
    })
}

#[test]
fn hand_case() {
    let start = Instant::now();
    let inst = Instance::new(vec![2], vec![vec![vec![2.0, 1.0]]]).unwrap();
    let m = market_round(&inst, None).unwrap();
    let o = &m.outcome;
    let verified = verify_equilibrium(&inst, &o.prices, &o.allocation, &o.bang_per_buck, &o.spending, o.eps_eq).is_ok();
    let superior = o.spending.base[0][0][0] + o.spending.extra[0][0][0];
    let active = o.spending.base[0][0][1] + o.spending.extra[0][0][1];
    let product = nsw(&inst, &m.rounding.allocation).unwrap().product;
    let elapsed = start.elapsed();
    let ok = verified
        && (o.prices[0] - 1.0 / 3.0).abs() <= 1e-3
        && (o.bang_per_buck[0] - 3.0).abs() <= 1e-2
        && (superior - 2.0 / 3.0).abs() <= 1e-3
        && (active - 1.0 / 3.0).abs() <= 1e-3
        && m.rounding.counts == vec![vec![2]]
        && product == 3.0
        && elapsed < Duration::from_secs(1);
    report(
        "hand_case",
        ok,
        format!(
            "p={:.6} b={:.6} superior={superior:.6} active={active:.6} product={product} verified={verified} time={elapsed:?}",
            o.prices[0], o.bang_per_buck[0]
        ),
    );
}

/// Checks that every traced state is a Δ-allocation and that prices never
/// fall and bang-per-buck values never rise.
fn trace_violations(inst: &Instance, o: &MarketOutcome) -> Vec<String> {
    let mut out = Vec::new();
    let tol = 1e-9;
    for (r, rec) in o.trace.iter().enumerate() {
        if let Err(e) = MarketSnapshot::compute(inst, &rec.prices, &rec.bang_per_buck, rec.delta) {
            out.push(format!("record {r}: {e}"));
        }
        for (a, &s) in rec.agent_spending.iter().enumerate() {
            if s > 1.0 + tol {
                out.push(format!("record {r}: agent {a} spends {s}"));
            }
        }
        for (i, &s) in rec.type_base_spending.iter().enumerate() {
            let k = inst.supply(i) as f64;
            let (lo, hi) = (k * rec.prices[i].min(1.0), k * unit_capacity(rec.prices[i], rec.delta));
            if s < lo - tol * (1.0 + lo) || s > hi + tol * (1.0 + hi) {
                out.push(format!("record {r}: type {i} base spending {s} outside [{lo}, {hi}]"));
            }
        }
        if r > 0 {
            let prev = &o.trace[r - 1];
            for (i, (&p, &q)) in rec.prices.iter().zip(&prev.prices).enumerate() {
                if p < q * (1.0 - 1e-12) {
                    out.push(format!("record {r}: price {i} fell from {q} to {p}"));
                }
            }
            for (a, (&b, &c)) in rec.bang_per_buck.iter().zip(&prev.bang_per_buck).enumerate() {
                if b > c * (1.0 + 1e-12) {
                    out.push(format!("record {r}: bang-per-buck {a} rose from {c} to {b}"));
                }
            }
        }
    }
    out
}

#[test]
fn equilibrium_suite() {
    let s = suite();
    let mut bad: Vec<String> = s.failures.clone();
    let start = Instant::now();
    let mut records = 0;
    for c in &s.cases {
        if let Err(v) = &c.verified {
            bad.push(format!("seed {}: {} violations, first {:?}", c.seed, v.len(), v[0]));
        }
        let traced = scaling_algorithm(&c.inst, &ScalingOptions { phases: None, trace: true }).unwrap();
        records += traced.trace.len();
        if let Some(first) = trace_violations(&c.inst, &traced).first() {
            bad.push(format!("seed {}: {first}", c.seed));
        }
    }
    let elapsed = s.market_time + start.elapsed();
    let ok = bad.is_empty() && s.cases.len() >= 200 && elapsed < Duration::from_secs(120);
    report(
        "equilibrium_suite",
        ok,
        format!(
            "{} instances verified, {records} traced states, {} failures{}, market time {elapsed:?}",
            s.cases.len(),
            bad.len(),
            bad.first().map_or(String::new(), |b| format!(", first: {b}"))
        ),
    );
}

#[test]
fn factor_two() {
    let s = suite();
    let mut bad = Vec::new();
    let mut worst: f64 = f64::INFINITY;
    for c in &s.cases {
        let n = c.inst.n() as i32;
        let got = nsw(&c.market.normalized, &c.market.rounding.allocation).unwrap();
        let opt_gm = c.opt.value.geometric_mean;
        worst = worst.min(got.geometric_mean / opt_gm);
        if got.geometric_mean < 0.5 * opt_gm - 1e-3 {
            bad.push(format!("seed {}: geometric mean {} < half of {opt_gm}", c.seed, got.geometric_mean));
        }
        let bound = c.market.bound.product() / 2f64.powi(n);
        if got.product < bound * (1.0 - 1e-3) {
            bad.push(format!("seed {}: product {} < bound/2^n = {bound}", c.seed, got.product));
        }
    }
    let ok = bad.is_empty() && s.failures.is_empty();
    report(
        "factor_two",
        ok,
        format!("{} instances, worst ratio {worst:.4}, {} failures{}", s.cases.len(), bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

#[test]
fn upper_bound_soundness() {
    let s = suite();
    let mut bad = Vec::new();
    let mut tightest: f64 = 0.0;
    for c in &s.cases {
        let n = c.inst.n() as i32;
        let bound = c.market.bound.product() * (1.0 + c.market.outcome.eps_eq).powi(n);
        tightest = tightest.max(c.opt.value.product / bound);
        if c.opt.value.product > bound {
            bad.push(format!("seed {}: optimum {} > bound {bound}", c.seed, c.opt.value.product));
        }
    }
    let ok = bad.is_empty() && s.failures.is_empty();
    report(
        "upper_bound_soundness",
        ok,
        format!("{} instances, max optimum/bound {tightest:.4}, {} failures{}", s.cases.len(), bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

#[test]
fn linear_reduction() {
    let s = suite();
    let mut bad = Vec::new();
    let mut checked = 0;
    for c in s.cases.iter().filter(|c| c.verified.is_ok()) {
        let o = &c.market.outcome;
        let lr = match to_linear_instance(&c.inst, &o.prices, &o.allocation, &o.spending) {
            Ok(lr) => lr,
            Err(e) => {
                bad.push(format!("seed {}: {e}", c.seed));
                continue;
            }
        };
        checked += 1;
        let original = upper_bound(&o.prices, c.inst.supplies()).product();
        let linear = upper_bound(&lr.prices, lr.instance.supplies()).product();
        if (original - linear).abs() > 1e-6 * original.max(linear) {
            bad.push(format!("seed {}: bounds {original} vs {linear}", c.seed));
        }
    }
    let ok = bad.is_empty() && checked == s.cases.len();
    report(
        "linear_reduction",
        ok,
        format!("{checked} verified equilibria, {} failures{}", bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

/// Relaxation value and the optimum of each suite instance (original valuations).
struct RelaxCase {
    inst: Instance,
    seed: u64,
    value: f64,
    converged: bool,
    x: Allocation,
    opt: f64,
    time: Duration,
}

fn relax_cases() -> &'static Vec<RelaxCase> {
    static CASES: OnceLock<Vec<RelaxCase>> = OnceLock::new();
    CASES.get_or_init(|| {
        suite_instances()
            .map(|(seed, inst)| {
                let opt = solve_exact(&inst, DEFAULT_LIMIT).unwrap().value.product;
                let start = Instant::now();
                let r = solve_relaxation(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                RelaxCase { inst, seed, value: r.value, converged: r.converged, x: r.x, opt, time: start.elapsed() }
            })
            .collect()
    })
}

#[test]
fn relaxation_dominance() {
    let cases = relax_cases();
    let mut misses = Vec::new();
    let mut flagged = 0;
    let mut slowest = Duration::ZERO;
    for c in cases {
        slowest = slowest.max(c.time);
        if !c.converged {
            flagged += 1;
        }
        if c.value.exp() * (1.0 + 1e-3) < c.opt {
            misses.push(format!("seed {}: exp(value) {} < optimum {} (converged {})", c.seed, c.value.exp(), c.opt, c.converged));
        }
    }
    let rate = 1.0 - misses.len() as f64 / cases.len() as f64;
    let ok = rate >= 0.95 && slowest <= Duration::from_secs(5);
    report(
        "relaxation_dominance",
        ok,
        format!(
            "{:.1}% of {} instances dominate, {flagged} flagged unconverged, slowest {slowest:?}{}",
            100.0 * rate,
            cases.len(),
            misses.first().map_or(String::new(), |m| format!(", first miss: {m}"))
        ),
    );
}

#[test]
fn rounding_guarantee() {
    let cases = relax_cases();
    let mut bad = Vec::new();
    let mut min_margin = f64::INFINITY;
    for c in cases.iter().filter(|c| c.value.is_finite()) {
        let e = estimate_expected_welfare(&c.inst, &c.x, 10_000, c.seed).unwrap();
        let target = (-2.0 * c.inst.n() as f64).exp() * c.value.exp();
        min_margin = min_margin.min((e.mean + 5.0 * e.std_error) / target);
        if e.mean + 5.0 * e.std_error < target {
            bad.push(format!("seed {}: mean {} + 5 se {} < {target}", c.seed, e.mean, e.std_error));
        }
    }
    report(
        "rounding_guarantee",
        bad.is_empty(),
        format!("{} instances, min (mean + 5 se) / target {min_margin:.3}, {} failures{}", cases.len(), bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

/// Every `S` of `n` distinct triplets holding at most `k_i` triplets of type `i`.
fn family(inst: &Instance) -> Vec<Vec<Triplet>> {
    fn rec(inst: &Instance, all: &[Triplet], start: usize, cur: &mut Vec<Triplet>, used: &mut Vec<usize>, out: &mut Vec<Vec<Triplet>>) {
        if cur.len() == inst.n() {
            out.push(cur.clone());
            return;
        }
        for s in start..all.len() {
            let t = all[s];
            if used[t.item] < inst.supply(t.item) {
                used[t.item] += 1;
                cur.push(t);
                rec(inst, all, s + 1, cur, used, out);
                cur.pop();
                used[t.item] -= 1;
            }
        }
    }
    let all: Vec<Triplet> = inst.triplets().collect();
    let mut out = Vec::new();
    rec(inst, &all, 0, &mut Vec::new(), &mut vec![0; inst.m()], &mut out);
    out
}

/// A random fractional allocation using a random share of each supply. When
/// `sparse`, about a quarter of the cells are zero.
fn random_allocation(inst: &Instance, rng: &mut ChaCha8Rng, sparse: bool) -> Allocation {
    let mut x = Allocation::zeros(inst);
    for i in 0..inst.m() {
        let k = inst.supply(i) as f64;
        let cells: Vec<Triplet> = inst.triplets().filter(|t| t.item == i).collect();
        let weights: Vec<f64> = cells.iter().map(|_| if sparse && rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.05..1.0) }).collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-12);
        let mass = k * rng.gen_range(0.5..=1.0);
        for (t, w) in cells.iter().zip(&weights) {
            x.set(*t, (w / total * mass).min(1.0));
        }
    }
    x.refresh_integral();
    x
}

#[test]
fn sampling_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sets = 0;
    let mut bad = Vec::new();
    let mut configs = 0;
    while configs < 50 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=3);
        let k: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=3)).collect();
        if k.iter().sum::<usize>() > 6 || k.iter().sum::<usize>() < n {
            continue;
        }
        configs += 1;
        let u = (0..n).map(|_| k.iter().map(|&ki| vec![1.0; ki]).collect()).collect();
        let inst = Instance::new(k, u).unwrap();
        let x = random_allocation(&inst, &mut rng, true);
        for s in family(&inst) {
            sets += 1;
            let lb = sampling_lower_bound(&inst, &x, &s).unwrap();
            let exact = exact_inclusion_probability(&inst, &x, &s, DEFAULT_LIMIT).unwrap();
            if lb > exact * (1.0 + 1e-12) + 1e-15 {
                bad.push(format!("bound {lb} > exact {exact} for {s:?}"));
            }
        }
    }
    report(
        "sampling_bound",
        bad.is_empty(),
        format!("{configs} configurations, {sets} sets, {} failures{}", bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

/// All vectors `kappa` with `kappa_i <= cap_i + 1` (one beyond each cap).
fn exponent_vectors(caps: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &c in caps {
        out = out.into_iter().flat_map(|v| (0..=c + 1).map(move |e| [v.clone(), vec![e]].concat())).collect();
    }
    out
}

fn supply_vectors() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for m in 1..=3u32 {
        for code in 0..3usize.pow(m) {
            out.push((0..m).map(|d| 1 + code / 3usize.pow(d) % 3).collect());
        }
    }
    out
}

#[test]
fn polynomial_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = Vec::new();
    let mut expansions = 0;
    for k in supply_vectors() {
        let total: usize = k.iter().sum();
        for n in 1..=total {
            let w: Vec<f64> = k.iter().map(|_| rng.gen_range(0.1..5.0)).collect();
            let direct = eval_q(&k, n, &w).unwrap().log_value.exp();
            let mut expanded = 0.0;
            for kappa in exponent_vectors(&k) {
                if kappa.iter().sum::<usize>() != n {
                    continue;
                }
                let c = coeff_q(&k, &kappa);
                if kappa.iter().zip(&k).any(|(e, k)| e > k) && c != 0.0 {
                    bad.push(format!("coefficient of {kappa:?} beyond supplies {k:?} is {c}"));
                }
                expanded += c * kappa.iter().zip(&w).map(|(&e, w)| w.powi(e as i32)).product::<f64>();
            }
            expansions += 1;
            if (direct - expanded).abs() > 1e-12 * expanded {
                bad.push(format!("q for k={k:?}, n={n}: {direct} vs expansion {expanded}"));
            }
        }
    }

    // Gradients with respect to log-variables against central differences.
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for point in 0..100 {
        let m = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4.min(3 * m));
        let inst = generate(&GeneratorConfig::new(1000 + point, n, m, (1, 3))).unwrap();
        let x = random_allocation(&inst, &mut rng, false);
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..3.0)).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..3.0)).collect();
        let (Ok(p), Ok(q)) = (eval_p(&inst, &x, &y), eval_q(inst.supplies(), n, &w)) else {
            bad.push(format!("point {point}: evaluation failed"));
            continue;
        };
        for i in 0..m {
            let shifted = |v: &[f64], s: f64| -> Vec<f64> {
                let mut v = v.to_vec();
                v[i] *= s.exp();
                v
            };
            let fd_p = (eval_p(&inst, &x, &shifted(&y, h)).unwrap().log_value - eval_p(&inst, &x, &shifted(&y, -h)).unwrap().log_value) / (2.0 * h);
            let fd_q = (eval_q(inst.supplies(), n, &shifted(&w, h)).unwrap().log_value
                - eval_q(inst.supplies(), n, &shifted(&w, -h)).unwrap().log_value)
                / (2.0 * h);
            for (name, fd, g) in [("p", fd_p, p.gradient[i]), ("q", fd_q, q.gradient[i])] {
                let err = (fd - g).abs() / g.abs().max(1.0);
                worst = worst.max(err);
                if err > 1e-5 {
                    bad.push(format!("point {point}: d ln {name}/d ln v_{i} = {g} vs difference {fd}"));
                }
            }
        }
    }
    report(
        "polynomial_kernels",
        bad.is_empty(),
        format!("{expansions} expansions, 100 gradient points, worst relative error {worst:.2e}, {} failures{}", bad.len(), bad.first().map_or(String::new(), |b| format!(", first: {b}"))),
    );
}

#[test]
fn bench_determinism() {
    let cfg = BenchConfig {
        seed: 12345,
        count: 3,
        grid: vec!["2x2x2".parse().unwrap(), "3x3x2".parse().unwrap(), "4x2x3".parse().unwrap()],
        options: PipelineOptions { trials: 500, ..Default::default() },
    };
    let run = || {
        let mut buf = Vec::new();
        bench(&cfg, &mut buf).unwrap();
        buf
    };
    let (a, b) = (run(), run());
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    report("bench_determinism", a == b && rows == 1 + 3 * 3 * 3, format!("{rows} lines, {} bytes, identical = {}", a.len(), a == b));
}
