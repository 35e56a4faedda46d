//! Numerical reducibility engine for `i u_t = (-u_xx + m^2)^{1/2} u + eps W(omega t) u`
//! on the circle, at truncated Fourier scale.
//!
//! The pipeline runs in stages: a symbol is turned into a block operator
//! ([`pdo`]), its order is lowered by a regularization cascade
//! ([`regularization`]), the result is block-diagonalized by a KAM iteration
//! ([`kam`]), excluded frequencies are estimated ([`measure`]) and the
//! conjugacy is checked against direct time integration ([`dynamics`]).
//! [`pipeline`] wires the stages to configuration files and reports.

// Index loops follow the formulas; negated comparisons deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod block;
pub mod dense;
pub mod dynamics;
pub mod error;
pub mod kam;
pub mod measure;
pub mod pdo;
pub mod pipeline;
pub mod regularization;
pub mod spectral;
pub mod testing;

pub use block::{exp_conjugate, lie_series, Block, BlockOperator, LieOutcome, NormSpec};
pub use dense::CMat;
pub use dynamics::{EvolutionConfig, Hamiltonian, NormTrace};
pub use error::{Error, Result};
pub use kam::{KamParams, KamReport, KamState};
pub use measure::{ExclusionReport, OmegaSampler, SamplerMode};
pub use pdo::{Symbol, SymbolFile};
pub use pipeline::{run_pipeline, PipelineReport, RunConfig, Stage};
pub use regularization::{RegParams, RegularizationState};
pub use spectral::{
    sobolev_norm, FrequencyPoint, MassParam, Mode, StateVector, Truncation, C64,
};
