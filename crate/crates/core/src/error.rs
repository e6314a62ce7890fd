use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("mixture parameter lengths differ: {weights} weights, {means} means, {scales} scales")]
    LengthMismatch {
        weights: usize,
        means: usize,
        scales: usize,
    },
    #[error("mixture weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("scale {scale} below floor {floor}")]
    ScaleBelowFloor { scale: f64, floor: f64 },
    #[error("non-finite distribution parameter")]
    NonFinite,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("raw parameter block has {got} values, expected a multiple of {expected}")]
    RawLength { got: usize, expected: usize },
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("grid resolution must be positive")]
    ZeroResolution,
    #[error("degenerate bounds {0:?}")]
    DegenerateBounds([f64; 6]),
    #[error("catalog has no entry for category {0}")]
    EmptyCategory(usize),
    #[error("rule references undeclared category {0}")]
    UnknownCategory(usize),
    #[error("invalid rule spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SceneError {
    pub fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("category {category} out of range for {classes} object classes")]
    CategoryOutOfRange { category: usize, classes: usize },
    #[error("the end symbol cannot be used as {0}")]
    EndSymbol(&'static str),
    #[error("floor mask resolution {got} does not match configured {expected}")]
    Resolution { got: usize, expected: usize },
    #[error("{head} head requires {missing} to be sampled first")]
    MissingPrefix { head: &'static str, missing: &'static str },
    #[error("missing parameter tensor {0}")]
    MissingParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} (scene ids {scene_ids:?})")]
    NonFiniteLoss { iteration: usize, scene_ids: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scene already holds {0} objects, the generation cap")]
    Full(usize),
    #[error("object index {index} out of range for {len} objects")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("constraint box is degenerate")]
    DegenerateConstraint,
    #[error("scene has no objects")]
    EmptyScene,
}
