//! Component costs: interpolated compute times per op and PCIe transfer times.

mod form;
mod table;
mod transfer;

pub use form::{
    fit_profile, FitError, FitOptions, OpForm, ParamGroup, ParametricForm, ProfileFit,
    DEFAULT_BATCH_GRID, DEFAULT_CONTEXT_GRID,
};
pub use table::{CostSource, CostTable, CostTableError, Op, OpGrid};
pub use transfer::{Direction, TransferMode, TransferModel};

/// CSV of the synthetic default profile sampled on the default grid.
pub const SYNTHETIC_PROFILE_CSV: &str = include_str!("../../data/synthetic_profile.csv");

pub fn synthetic_profile() -> CostTable {
    CostTable::read_csv(SYNTHETIC_PROFILE_CSV.as_bytes()).expect("shipped profile is valid")
}
