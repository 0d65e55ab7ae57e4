//! Simulated beamline instrument control kernel.
//!
//! Device residents and user interfaces never talk to each other directly:
//! both sides read and write variables of the real-time database ([`rtdb`]).
//! Measurement scripts ([`script`]) drive the residents, the [`supervisor`]
//! restarts a hung kernel from the last database image, the [`gateway`]
//! serves remote clients, and [`viz`] moves spectra to viewers.

pub mod clock;
pub mod gateway;
pub mod kernel;
pub mod residents;
pub mod rtdb;
pub mod script;
pub mod supervisor;
pub mod viz;
