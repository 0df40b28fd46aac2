pub mod balance;
pub mod distance;

pub use balance::{
    compute_h, compute_kappa, component_step_distance, gradient_bounds, normalized_grad_norm, sequence_distance,
    BalanceRecord, Kappa, KappaConfig,
};
pub use distance::{distribution_distance, DistanceKind};
