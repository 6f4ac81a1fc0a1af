//! Numerical laboratory for polynomial decay of correlations.
//!
//! Intermittent interval and torus maps, planar billiards, first-return
//! machinery, Ulam-discretized operator renewal sequences, Monte Carlo
//! correlation estimates, and decay-rate fits.

pub mod billiards;
pub mod cli;
pub mod correlator;
pub mod dynmaps;
pub mod fitkit;
pub mod inducing;
pub mod renewal;
pub mod rng;
pub mod selftest;
pub mod seqkit;
