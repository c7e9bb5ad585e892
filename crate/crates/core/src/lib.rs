//! Anomaly detection in homogeneous populations of linear systems.
//!
//! Every system `i` observes `y_i(t) = φ_i(t)ᵀθ_i + e_i(t)`. Most systems
//! share a nominal parameter; the few that do not are the anomalies. The
//! crate offers three ways of finding them:
//!
//! * [`oracle`]: exhaustive multi-hypothesis least squares over all
//!   `k`-subsets, exact but combinatorial;
//! * [`solver`]: the convex sum-of-norms relaxation solved centrally;
//! * [`admm`]: the same relaxation solved by peer-to-peer ADMM where each
//!   system only handles its own data and `2m` local variables.
//!
//! [`tuning`] picks the regularization weight, [`baseline`] holds the
//! ridge-fusion comparator and [`datagen`] simulates fleets.

pub mod admm;
pub mod baseline;
pub mod datagen;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod par;
pub mod prox;
pub mod report;
pub mod solver;
pub mod tuning;

pub use error::{FleetError, Result};
pub use model::{
    binomial_count, informativity_check, least_squares, residual_sse, FleetDataset, Hypothesis,
    PNorm, Solution, SystemDataset,
};
pub use par::Execution;
