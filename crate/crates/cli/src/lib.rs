//! Front end for running scenarios, comparing the branch-and-bound solver
//! against exhaustive enumeration, and validating scenario files.

pub mod commands;
pub mod output;
