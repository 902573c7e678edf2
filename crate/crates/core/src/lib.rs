pub mod coordination;
pub mod edge;
pub mod nodal_dp;
pub mod error;
pub mod fixtures;
pub mod instance;
pub mod network;
pub mod oracle;
pub mod policy_sim;
pub mod prosumer;
pub mod qp;
pub mod sddp;
pub mod uncertainty;
