//! Differentiable multi-resolution architecture search.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod data;
pub mod derive;
pub mod error;
pub mod experiment;
pub mod genotype;
pub mod latency;
pub mod net;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod preset;
pub mod rng;
pub mod search;
pub mod space;

pub use arch::{ArchParams, GumbelConfig, TeacherStudentParams};
pub use error::{Error, Result};
pub use genotype::{BranchSpec, CellRecord, Genotype};
pub use space::{build_search_space, CellPosition, OperatorKind, SearchSpace, SearchSpaceConfig};
