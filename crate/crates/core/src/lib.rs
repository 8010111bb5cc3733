pub mod adversary;
pub mod aggspec;
pub mod baselines;
pub mod dfke;
pub mod harness;
pub mod lipi;
pub mod modmath;
pub mod outcome;
pub mod stnet;
pub mod trace;

pub type NodeId = u32;
