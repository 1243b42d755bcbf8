//! Library surface of the smlmforge tool: file formats, configuration and
//! the subcommand implementations the binary dispatches to.

pub mod commands;
pub mod config;
pub mod io;
