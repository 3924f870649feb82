//! Progressive residual vector quantization.
//!
//! A stack of `L` codebooks quantizes a vector layer by layer, each layer
//! coding what the previous ones left over, so the first `l` indices of a
//! code are themselves a valid shorter code. Codebooks (and an optional
//! supervised projection) are trained end to end through a softmax
//! relaxation of the nearest-codeword assignment; search ranks packed codes
//! by asymmetric distance from unquantized queries.

pub mod code;
pub mod error;
pub mod harness;
pub mod index;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod search;
pub mod supervised;
pub mod trainer;

pub use code::{AssignmentIndex, CodeArray, Codebook, FeatureVector, PackedCode};
pub use error::{Error, Result};
pub use index::EncodedDatabase;
pub use linalg::Matrix;
pub use model::ProgressiveModel;
pub use search::{RetrievalResult, SearchTables};
pub use trainer::Hyperparameters;
