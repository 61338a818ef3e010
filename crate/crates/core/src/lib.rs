//! lodestar: scripted virtual-user load testing with transactions,
//! rendezvous points, ramped and step-load scenarios, host counter
//! monitoring and latency/throughput analysis.

pub mod analysis;
pub mod cli;
pub mod controller;
pub mod monitor;
pub mod rendezvous;
pub mod runtime;
pub mod scripting;
pub mod testbed;
