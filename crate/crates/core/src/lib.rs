//! Quasi-static cyber-physical simulation of Volt-Var control on an
//! unbalanced radial feeder under hybrid false-data-injection and
//! denial-of-service attacks, with an MLP-based detection and mitigation
//! layer at the control center.

pub mod attacks;
pub mod cybernet;
pub mod defense_ann;
pub mod grid_model;
pub mod par;
pub mod phase;
pub mod powerflow;
pub mod sim_engine;
pub mod voltvar_opt;
