//! Training dynamics instrumentation for small transformers on Dyck-1 depth
//! prediction and SCAN.

pub mod detect;
pub mod harness;
pub mod integrability;
pub mod interventions;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod params;
pub mod probes;
pub mod rng;
pub mod tasks;
pub mod trajectory;
