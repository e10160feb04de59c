//! DiffAN: causal discovery for nonlinear additive noise models.
//!
//! A denoising diffusion network is trained as a score estimator. The
//! variance of its Jacobian diagonal identifies leaf nodes, which are peeled
//! off one at a time to build a topological ordering. Removed leaves are
//! accounted for either by masking or by the analytic residue update, so the
//! network never needs retraining. The ordering is then pruned to a DAG.
//!
//! Pipeline: [`scm`] or user CSV → [`diffusion::train`] → [`ordering::order`]
//! → [`pruning::prune`] → [`metrics`].

pub mod diffusion;
pub mod error;
pub mod graphs;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod ordering;
pub mod pruning;
pub mod scm;
pub mod scorefield;

pub use diffusion::{noisify, train, LossHistory, NoiseSchedule, Standardizer, TrainConfig};
pub use error::{Error, Result};
pub use graphs::{sample_er, sample_sf, Dag, Ordering};
pub use metrics::{order_divergence, shd, sid, MetricsReport};
pub use neural::{Architecture, Mode, ScoreNet};
pub use ordering::{order, reverse_to_root_order, OrderConfig, Variant};
pub use pruning::{prune, PruneConfig};
pub use scm::{sample_dataset, AnmSpec, Dataset, Mechanism, NoiseFamily};
pub use scorefield::{ScoreField, ScoreModel};
