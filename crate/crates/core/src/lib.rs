//! Structural equation models fitted by normal-theory maximum likelihood,
//! individual parameter contributions (IPCs), and IPC regression.
//!
//! The usual pipeline is: parse a model with [`model_spec::parse`], fit it
//! with [`sem_engine::fit`], transform the data with
//! [`ipc_core::compute_ipcs`], and regress the IPC columns on covariates with
//! [`ipc_regression::regress`].

pub mod cli;
pub mod data;
pub mod error;
pub mod ipc_core;
pub mod ipc_regression;
pub mod linalg;
pub mod mgsem;
pub mod model_spec;
pub mod moments;
pub mod optim;
pub mod sem_engine;
pub mod sim_harness;

pub use error::{Result, SemError};
