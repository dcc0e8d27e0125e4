//! Operational shell for the search engine: index persistence, the HTTP
//! API and the command-line interface.

pub mod cli;
pub mod persist;
pub mod service;
