//! Training stages, optimization and persistence.

pub mod align;
pub mod checkpoint;
pub mod classify;
pub mod config;
pub mod optim;
pub mod pretrain;
pub mod schedule;
