//! Permutation-invariant autoregressive generation of indoor object layouts.
//!
//! A scene is an unordered set of labeled, yaw-oriented boxes on a floor
//! plan. The model encodes the floor and every existing object as tokens,
//! runs a transformer without positional information over them plus a
//! learned query token, and reads the next object's category, location,
//! orientation and size distributions off the query output. Because the
//! context has no order, the same network drives unconditional synthesis,
//! scene completion, constrained suggestion, forced-category placement and
//! leave-one-out anomaly scoring.
//!
//! Modules, bottom up:
//! - [`tensor`] and [`autodiff`]: dense tensors, a define-by-run tape and Adam.
//! - [`distributions`]: logistic mixtures and categorical heads.
//! - [`scene`]: schema, floor rasters, overlap tests, filters, retrieval, and
//!   the synthetic rule-based generator.
//! - [`model`], [`training`], [`inference`], [`evaluation`].

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod training;

pub use distributions::{CategoricalDist, LogisticMixture1D};
pub use error::{DistributionError, InferenceError, ModelError, SceneError, TensorError, TrainError};
pub use model::{Checkpoint, CheckpointMeta, Model, ModelConfig, ObjectCode, OrderingMode};
pub use scene::{Bounds, FloorMask, Scene, SceneObject};
pub use tensor::{Real, Tensor};
