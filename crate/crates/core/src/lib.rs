//! Traffic-aware dispatch of electric vehicles to vehicle-to-grid stations.

// Negated float comparisons are used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dispatch;
pub mod fleet;
pub mod mpc;
pub mod network;
pub mod rcsp;
pub mod traffic;
pub mod citygen;
pub mod scenario;
