//! Synthesis of relational database content conditioned on the foreign-key
//! graph.
//!
//! Records of every table become nodes of a heterogeneous graph whose typed
//! edges are foreign-key links. A flow-matching denoiser predicts the clean
//! value of every record from its noisy value, the noise level and a context
//! embedding computed by a heterogeneous GNN over the whole graph. New
//! content is generated by integrating the learned velocity field with the
//! Euler method, on top of a (possibly resampled) topology.
//!
//! ## Layout
//!
//! - [`relschema`]: schema declaration, CSV ingest/export, integrity checks
//! - [`preprocess`]: quantile/one-hot/missing-indicator encoding
//! - [`fkgraph`]: foreign-key graph, connected components, topology resampling
//! - [`neural`]: dense tensors, reverse-mode tape, MLPs, RAdam
//! - [`gnn`]: GATv2 and GIN heterogeneous node embedders
//! - [`flowcore`]: conditional paths, velocities, losses, Euler integration
//! - [`pipeline`]: training loop, checkpoints, generation
//! - [`evalkit`]: DDA discriminator accuracy and DCR privacy metrics
//! - [`cli`]: the `relflow` command-line front end

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod fkgraph;
pub mod flowcore;
pub mod gnn;
pub mod neural;
pub mod pipeline;
pub mod preprocess;
pub mod relschema;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
pub use relschema::{ColumnKind, ColumnSpec, RelationalDataset, RelationalSchema};
