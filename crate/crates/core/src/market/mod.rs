//! Utility-allocation market: equilibrium computation and verification.

pub mod equilibrium;
pub mod flow;
pub mod verify;

pub use equilibrium::{
    classify, classify_triplet, initialize, next_event, price_increase, scaling_algorithm, Classification, Event,
    ItemClass, MarketOutcome, ScalingOptions, SpendingRecord, TraceRecord,
};
pub use flow::{max_flow, min_cut_max_t, Flow, FlowNetwork};
pub use verify::{verify_equilibrium, Violation};

/// Base price per item type.
pub type PriceVector = Vec<f64>;
/// Bang-per-buck per agent.
pub type BangPerBuck = Vec<f64>;
