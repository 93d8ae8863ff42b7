//! Device placement: the node-packing heuristic, domino tilings of the device
//! mesh, and simulated annealing over tilings and degrees.

pub mod anneal;
pub mod domino;
pub mod heuristic;

pub use anneal::{
    acceptance_probability, anneal, AnnealConfig, AnnealOutcome, AnnealState, AnnealStep,
};
pub use domino::{
    device_grid, sample_domino_tiling, square_shape, DeviceGrid, Domino, DominoTiling, Orientation,
};
pub use heuristic::{heuristic_placement, HeuristicPlacement};
