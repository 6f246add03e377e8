//! SMTP spoofing audit toolkit: a policy-driven test MTA, a spoofing probe,
//! and spam cost / threat risk calculators.

pub mod audit;
pub mod cli;
pub mod costmodel;
pub mod protocol;
pub mod server;
pub mod session;
pub mod testkit;
pub mod threatmodel;
