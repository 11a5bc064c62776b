//! Planning, scheduling and simulation of pipeline-parallel training on
//! heterogeneous, geographically spread device clusters.

pub mod adapter;
pub mod costmodel;
pub mod error;
pub mod fixtures;
pub mod grouping;
pub mod io;
pub mod planner;
pub mod profiling;
pub mod schedule;
pub mod simulator;

pub use error::{Error, Result};
