//! Test and benchmark programs: fixed fixtures and seeded generators.

pub mod fixtures;
pub mod generate;
