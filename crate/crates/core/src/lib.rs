//! Rescaled Kaluza-Klein Einstein flow around the Milne background on
//! periodic grids: discrete geometry, reduced matter, elliptic gauge solves,
//! time integration and energy monitors.

pub mod elliptic;
pub mod energy;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod matter;
pub mod mesh;
pub mod scenario;
pub mod spectral;
pub mod spectrum;
pub mod state;
pub mod verify;

pub use error::{Error, Result};
pub use evolution::{run, Evolution, EvolutionConfig, RunConfig, RunOutcome, Sector};
pub use grid::Grid;
pub use mesh::{build_flat_torus_chart, GridChart};
pub use scenario::{Preset, Scenario};
pub use state::FieldState;
