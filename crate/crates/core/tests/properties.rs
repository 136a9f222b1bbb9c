//! Randomized invariants spanning several modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nsw_core::generate::{generate, GeneratorConfig};
use nsw_core::instance::{validate, InstanceDoc};
use nsw_core::io::{load_instance, save_instance};
use nsw_core::market::{scaling_algorithm, ScalingOptions};
use nsw_core::oracle::{solve_exact, DEFAULT_LIMIT};
use nsw_core::pipeline::market_round;
use nsw_core::stable::{eval_p, eval_q};
use nsw_core::{canonicalize, nsw, Allocation, Instance, Triplet};

fn instance() -> impl Strategy<Value = Instance> {
    (any::<u64>(), 1usize..=3, 1usize..=3)
        .prop_filter_map("too few items", |(seed, n, m)| generate(&GeneratorConfig::new(seed, n, m, (1, 3))).ok())
}

/// A feasible allocation with random fractions on every triplet.
fn fractional(inst: &Instance, seed: u64) -> Allocation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Allocation::zeros(inst);
    for i in 0..inst.m() {
        for j in 0..inst.supply(i) {
            let w: Vec<f64> = (0..inst.n()).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum::<f64>() / rng.gen_range(0.5..=1.0);
            for (a, wa) in w.iter().enumerate() {
                x.set(Triplet::new(a, i, j), wa / total);
            }
        }
    }
    x.refresh_integral();
    x
}

/// A random integral allocation where each copy may stay unassigned.
fn integral(inst: &Instance, seed: u64) -> Allocation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Allocation::zeros(inst);
    for i in 0..inst.m() {
        for j in 0..inst.supply(i) {
            let a = rng.gen_range(0..=inst.n());
            if a < inst.n() {
                x.set(Triplet::new(a, i, j), 1.0);
            }
        }
    }
    x.refresh_integral();
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_instances_are_valid_and_reproducible(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=5) {
        let cfg = GeneratorConfig::new(seed, n, m, (1, 4));
        let a = generate(&cfg).unwrap();
        let doc: InstanceDoc = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert!(validate(&doc).is_ok());
        prop_assert_eq!(a, generate(&cfg).unwrap());
    }

    #[test]
    fn save_then_load_is_identity(inst in instance()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        save_instance(&path, &inst).unwrap();
        prop_assert_eq!(load_instance(&path).unwrap(), inst);
    }

    #[test]
    fn canonicalize_never_lowers_welfare(inst in instance(), seed in any::<u64>()) {
        let x = integral(&inst, seed);
        let c = canonicalize(&inst, &x).unwrap();
        let (before, after) = (nsw(&inst, &x).unwrap(), nsw(&inst, &c).unwrap());
        prop_assert!(after.product >= before.product * (1.0 - 1e-12));
        prop_assert_eq!(nsw(&inst, &canonicalize(&inst, &c).unwrap()).unwrap(), after);
    }

    #[test]
    fn log_and_direct_products_agree(inst in instance(), seed in any::<u64>()) {
        let v = nsw(&inst, &fractional(&inst, seed)).unwrap();
        prop_assert!((v.log_product.exp() - v.product).abs() <= 1e-9 * v.product);
    }

    #[test]
    fn scaling_an_agent_scales_the_optimum(inst in instance(), a in 0usize..3, c in 0.1f64..10.0) {
        let a = a % inst.n();
        let mut scale = vec![1.0; inst.n()];
        scale[a] = c;
        let scaled = inst.scaled(&scale).unwrap();
        let opt = solve_exact(&inst, DEFAULT_LIMIT).unwrap();
        let opt_scaled = solve_exact(&scaled, DEFAULT_LIMIT).unwrap();
        prop_assert!((opt_scaled.value.product - c * opt.value.product).abs() <= 1e-9 * opt_scaled.value.product);
        // The original optimum stays optimal after scaling.
        prop_assert!((nsw(&scaled, &opt.allocation).unwrap().product - opt_scaled.value.product).abs() <= 1e-9 * opt_scaled.value.product);
    }

    #[test]
    fn optimum_dominates_random_allocations(inst in instance(), seed in any::<u64>()) {
        let opt = solve_exact(&inst, DEFAULT_LIMIT).unwrap();
        let other = nsw(&inst, &integral(&inst, seed)).unwrap().product;
        prop_assert!(opt.value.product >= other * (1.0 - 1e-12));
    }

    #[test]
    fn polynomials_are_homogeneous_of_degree_n(inst in instance(), seed in any::<u64>(), c in 0.1f64..10.0) {
        let x = fractional(&inst, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let y: Vec<f64> = (0..inst.m()).map(|_| rng.gen_range(0.1..5.0)).collect();
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let shift = inst.n() as f64 * c.ln();
        let p = eval_p(&inst, &x, &y).unwrap().log_value;
        prop_assert!((eval_p(&inst, &x, &cy).unwrap().log_value - p - shift).abs() <= 1e-9 * (1.0 + p.abs()));
        let q = eval_q(inst.supplies(), inst.n(), &y).unwrap().log_value;
        prop_assert!((eval_q(inst.supplies(), inst.n(), &cy).unwrap().log_value - q - shift).abs() <= 1e-9 * (1.0 + q.abs()));
    }

    #[test]
    fn market_rounding_is_within_half_of_the_bound(inst in instance()) {
        let m = market_round(&inst, None).unwrap();
        let got = nsw(&m.normalized, &m.rounding.allocation).unwrap();
        let eps = m.outcome.eps_eq;
        prop_assert!(got.geometric_mean >= 0.5 * m.bound.geometric(inst.n()) - eps);
        prop_assert!(m.rounding.allocation.check_feasible(&inst).is_ok());
    }

    #[test]
    fn halving_delta_leaves_bounded_surplus(inst in instance()) {
        let o = scaling_algorithm(&inst, &ScalingOptions { phases: None, trace: true }).unwrap();
        let k = inst.total_items() as f64;
        for w in o.trace.windows(2) {
            if w[1].phase != w[0].phase {
                // `w[0]` closes the previous phase, whose step size was `w[0].delta`.
                prop_assert!(w[1].surplus <= k * w[0].delta + 1e-9, "surplus {} after phase with delta {}", w[1].surplus, w[0].delta);
            }
        }
    }
}
