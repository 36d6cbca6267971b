//! Online test-time adaptation over streams of pre-computed embeddings.
//!
//! The engine keeps three per-class caches (entropy, align, negative),
//! builds textual and visual prototypes from them, and classifies each
//! incoming sample by fusing text matching, negative-calibrated prototype
//! scores and adaptive cache retrieval. In `Mode::McpPlusPlus` a pair of
//! residual matrices is tuned by one optimizer step per sample.
//!
//! Module map:
//! - [`math`]: vector primitives (softmax, entropy, cosine, affinity).
//! - [`caches`]: cache data structures and the routing rules.
//! - [`prototypes`]: text/visual prototypes, centers and residuals.
//! - [`inference`]: retrieval, fusion and the per-sample [`Engine`].
//! - [`tuning`]: losses, analytic gradients, AdamW and gradient checking.
//! - [`metrics`]: accuracy, compactness, Pearson and the theory simulations.
//! - [`io`]: stream file format, synthetic data, config, run loop, grid search.

pub mod caches;
mod clock;
pub mod error;
pub mod inference;
pub mod io;
pub mod math;
pub mod metrics;
pub mod prototypes;
pub mod tuning;

pub use caches::{Admission, CacheBank, CacheKind, CacheSlot, CacheToggles, ClassCache, Routing};
pub use error::{Error, Result};
pub use inference::{Engine, FusionNorm, LogitsBreakdown, Mode, Prediction, TermToggles};
pub use math::{HyperParams, Matrix, ProbVector};
pub use prototypes::PrototypeState;
