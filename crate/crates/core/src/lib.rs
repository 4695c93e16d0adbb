//! Prior-data fitted network (PFN) for probabilistic tabular regression by
//! in-context learning, with a geotechnical site-characterization workflow.

pub mod numcore;
pub mod prior;
pub mod model;
pub mod infer;
pub mod train;
pub mod geodata;
pub mod context;
pub mod baseline;
pub mod eval;
