//! Joint training of a binary large-margin classifier and an ordinal
//! regressor whose weight vectors are pushed towards orthogonality by a
//! `lambda3 (w_g . w_a)^2` penalty.
//!
//! The ordinal side is either a discriminant learner ([`kdlor`]) or a support
//! vector ordinal regressor ([`svor`]). Both sides come in a primal linear
//! form and a kernel form. [`joint::train_joint`] alternates between the two
//! subproblems; [`eval`] scores models and searches hyper-parameters; [`io`]
//! reads and writes datasets and models.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub(crate) mod hinge_qp;
pub mod io;
pub mod joint;
pub mod kdlor;
pub mod kernels;
pub mod pav;
pub mod svm;
pub mod svor;
pub mod synth;

pub use config::{OrdinalMethod, TrainConfig};
pub use dataset::{Dataset, LabelMaps};
pub use error::{Error, Result};
pub use eval::{accuracy, evaluate, grid_search, mae, stratified_split, EvalResult, GridSpec};
pub use io::{load_csv, ModelFile};
pub use joint::{train_joint, FitReport, JointModel};
pub use kernels::KernelSpec;
pub use synth::{generate_synthetic, SyntheticSpec};
