//! Std companion to `gtrpo-core`: file formats, experiment configs, the
//! seeded runner, comparison plots and the `verify` suites behind the
//! `gtrpo` binary.

pub mod compare;
pub mod config;
pub mod formats;
pub mod kv;
pub mod runner;
pub mod svg;
pub mod verify;
