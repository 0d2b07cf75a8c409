pub mod alip;
pub mod config;
pub mod env;
pub mod experiments;
pub mod mpc;
pub mod par;
pub mod policy;
pub mod ppo;
pub mod proxy;
pub mod qp;
pub mod reward;
