//! Stochastic SIR epidemics on static contact networks.
//!
//! Two simulators share one RNG contract: [`simulate::run_naive`] steps the
//! epidemic through discrete time, while [`simulate::run_fast`] (FastSIR)
//! processes each infected node once, drawing its number of infected
//! neighbors from precomputed distributions ([`distributions`]). The
//! [`analysis`] module supplies exact and analytic oracles for both, and
//! [`harness`] runs repetition ensembles, parameter sweeps and timing
//! comparisons.

pub mod analysis;
pub mod distributions;
pub mod graph;
pub mod harness;
pub mod simulate;

pub use distributions::{EpidemicParams, InfectionCdfTable, PrecisionPolicy};
pub use graph::Network;
pub use simulate::{Algorithm, RngStream, SimulationOutcome};
