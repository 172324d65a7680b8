pub mod corpus;
pub mod diff;
pub mod experiments;
pub mod knowledge;
pub mod rng;
pub mod selftest;
pub mod solver;
pub mod synth;
pub mod training;
