//! Command line and HTTP front ends for the nightcap captioner.

pub mod cli;
pub mod service;
