//! Core library for screening procurement data for bid-rigging cartels.
//!
//! The pipeline runs in stages, each with its own module:
//!
//! 1. [`data`] — ingest raw bid records from CSV and organize them into
//!    tenders and firm/period views.
//! 2. [`screen`] — normalize bids per tender (min-max transform) and build
//!    per-firm pairwise interaction graphs, plus quadrant-density screens.
//! 3. [`raster`] — rasterize interaction graphs into fixed-size grayscale
//!    images (binary PGM on disk).
//! 4. [`nn`] — from-scratch tensors, CNN layers with hand-derived backward
//!    passes, binary cross-entropy, and SGD/Adam optimizers.
//! 5. [`model`] — the concrete classification network, training loop,
//!    prediction, and weight serialization.
//! 6. [`experiment`] — repeated train/test splits, per-class accuracy, and
//!    summary statistics, including cross-regime transfer evaluation.
//! 7. [`synthgen`] — seeded synthetic market generator producing labeled
//!    corpora with cover-bidding cartel episodes.

pub mod data;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod raster;
pub mod screen;
pub mod synthgen;

pub use data::{BidRecord, ClassLabel, Dataset, Tender};
pub use experiment::{EvalMetrics, SimulationSummary, SplitSpec, SummaryStats};
pub use model::{CnnModel, TrainConfig, TrainReport};
pub use nn::Tensor;
pub use raster::{GrayscaleImage, IntensityMode, RasterConfig};
pub use screen::InteractionGraph;
pub use synthgen::{MarketConfig, Regime};
