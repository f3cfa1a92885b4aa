//! Command line tools and the HTTP annotation service for `bayesrank`.

pub mod cli;
pub mod report;
pub mod server;
