//! Multi-objective learning-to-rank training engine.
//!
//! A lightweight pre-ranking model is trained against two objectives at
//! once: staying consistent with a frozen ranking model (a pairwise
//! logistic ranking loss) and steering away from candidates with recent
//! explicit negative feedback (a penalty weighted by an exponential
//! forgetting curve over time-windowed fast-slip rates). Instead of fixing
//! the trade-off by hand, a Frank-Wolfe min-norm solver picks per-step
//! preference weights over the objective gradients; a zero min-norm value
//! certifies a stationary trade-off point.
//!
//! The crate ships everything needed to exercise the method end to end at
//! desk scale:
//!
//! - [`solver`] — Gram-space Frank-Wolfe min-norm solver with a
//!   closed-form two-point line search and a stationarity certificate.
//! - [`forgetting`] — time-windowed fast-slip rates, exponential memory
//!   decay, single- and multi-dimension penalty weights, and the penalty
//!   loss with its gradient.
//! - [`ranker`] — embeddings + three-layer MLP scorer, the pairwise
//!   ranking loss against teacher scores, and exact reverse-mode
//!   gradients.
//! - [`optim`] — Adam.
//! - [`metrics`] — the cascade evaluation protocol (pre-rank a pool, cut
//!   to top-k, teacher picks the exposure) and NDCG / top-1 recall /
//!   fast-slip rate / CTR.
//! - [`dataio`] — seeded synthetic world + interaction-log simulator,
//!   CSV ingestion, time-ordered splitting, and feedback coverage
//!   reports.
//! - [`trainer`] — the training loop wiring it all together, plus the
//!   fixed-weight ablation and retention sweeps.
//! - [`cli`] — JSON-configured commands behind the `pareto-ltr` binary.
//!
//! The runnable examples under `examples/` walk through each capability;
//! start with `solve_preference_weights` and `train_pareto`.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod forgetting;
pub mod metrics;
pub mod optim;
pub mod ranker;
pub mod seeds;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
