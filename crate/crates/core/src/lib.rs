//! Stochastic barrier certificates and minimally-invasive controllers for
//! neural-network dynamic models.

pub mod geometry;
pub mod model;
pub mod poly;
pub mod relax;
pub mod sos;
pub mod barrier;
pub mod control;
pub mod sim;
pub mod cli;
