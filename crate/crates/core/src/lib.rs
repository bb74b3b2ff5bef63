pub mod als;
pub mod context_analysis;
pub mod dataspace;
pub mod error;
pub mod mdm;
pub mod model;
pub mod persistence;
pub mod predict;
pub mod weighting;

pub use als::{train, FactorModel, SolverKind, TrainConfig, Trainer};
pub use dataspace::{build_dataspace, load_transactions, Dataspace, Schema, TransactionTable};
pub use error::{Error, ErrorKind, Result};
pub use model::{parse_model, Aliases, PreferenceModel};
pub use weighting::WeightingScheme;
