//! Library surface behind the `pae` binary: configuration parsing, the
//! `PAE1` checkpoint container, and the command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
