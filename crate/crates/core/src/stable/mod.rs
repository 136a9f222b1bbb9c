//! Real-stable-polynomial relaxation and randomized rounding.

pub mod poly;
pub mod relax;
pub mod sampling;

pub use poly::{coeff_q, eval_p, eval_q, PolyEval};
pub use relax::{objective, relaxation_at, solve_relaxation, RelaxationSolution};
pub use sampling::{estimate_expected_welfare, randomized_round, sampling_lower_bound, SampleOutcome, WelfareEstimate};

/// Default inner gradient tolerance of [`solve_relaxation`].
pub const DEFAULT_TOL: f64 = 1e-5;
/// Default outer iteration cap of [`solve_relaxation`].
pub const DEFAULT_MAX_ITER: usize = 2000;
