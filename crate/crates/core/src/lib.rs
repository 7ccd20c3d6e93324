//! Policy-driven placement and routing of microservice applications across
//! edge and cloud domains.

pub mod appmodel;
pub mod controlplane;
pub mod ids;
pub mod policy;
pub mod topology;
pub mod meshsim;
pub mod scenario;
