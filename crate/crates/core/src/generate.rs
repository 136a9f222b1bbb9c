//! Seeded random instance generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};
use crate::instance::Instance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub agents: usize,
    pub types: usize,
    /// Inclusive range of per-type supplies.
    pub supply: (usize, usize),
    /// First marginal is drawn uniformly from this range.
    pub first_marginal: (f64, f64),
    /// Each later marginal is its predecessor times a fraction drawn from this range.
    pub decay: (f64, f64),
}

impl GeneratorConfig {
    pub fn new(seed: u64, agents: usize, types: usize, supply: (usize, usize)) -> Self {
        GeneratorConfig {
            seed,
            agents,
            types,
            supply,
            first_marginal: (1.0, 10.0),
            decay: (0.1, 1.0),
        }
    }
}

/// Draws an instance with `K >= n`, so every agent can receive some item.
///
/// Marginals are positive and sorted descending by construction.
pub fn generate(cfg: &GeneratorConfig) -> Result<Instance> {
    let (kmin, kmax) = cfg.supply;
    if cfg.agents == 0 || cfg.types == 0 || kmin == 0 || kmin > kmax {
        return Err(NswError::InvalidInstance(vec![format!("bad generator configuration {cfg:?}")]));
    }
    if cfg.types * kmax < cfg.agents {
        return Err(NswError::InvalidInstance(vec![format!(
            "at most {} items for {} agents",
            cfg.types * kmax,
            cfg.agents
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut k: Vec<usize> = (0..cfg.types).map(|_| rng.gen_range(kmin..=kmax)).collect();
    let mut i = 0;
    while k.iter().sum::<usize>() < cfg.agents {
        if k[i] < kmax {
            k[i] += 1;
        }
        i = (i + 1) % cfg.types;
    }
    let (lo, hi) = cfg.first_marginal;
    let (dlo, dhi) = cfg.decay;
    let u = (0..cfg.agents)
        .map(|_| {
            k.iter()
                .map(|&ki| {
                    let mut row = Vec::with_capacity(ki);
                    let mut v = rng.gen_range(lo..=hi);
                    for _ in 0..ki {
                        row.push(v);
                        v *= rng.gen_range(dlo..=dhi);
                    }
                    row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    row
                })
                .collect()
        })
        .collect();
    Instance::new(k, u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = GeneratorConfig::new(42, 3, 4, (1, 3));
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GeneratorConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn enough_items_for_agents() {
        for seed in 0..50 {
            let inst = generate(&GeneratorConfig::new(seed, 4, 2, (1, 3))).unwrap();
            assert!(inst.total_items() >= 4);
        }
        assert!(generate(&GeneratorConfig::new(0, 5, 1, (1, 3))).is_err());
    }
}
