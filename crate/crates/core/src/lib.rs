//! Discrete-event simulator of dirty page tracking in a virtualized machine.

pub mod addr;
pub mod checkpoint;
pub mod cost;
pub mod guest;
pub mod hypervisor;
pub mod migration;
pub mod pml;
pub mod repro;
pub mod sim;
pub mod size;
pub mod tracker;
pub mod workload;
