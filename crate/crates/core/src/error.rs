use thiserror::Error;

/// Errors raised by tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("epsilon must be positive, got {0}")]
    InvalidEps(f64),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("reshape from {from:?} ({from_len} elements) to {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

/// Errors raised by mask construction.
#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask ratio must lie in [0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("grid extents must be >= 1, got {h}x{w}")]
    EmptyGrid { h: usize, w: usize },
    #[error("unsupported grid pattern: ratio {ratio} on {h}x{w} (ratio must be 0.25/0.5/0.75 and extents even)")]
    UnsupportedPattern { ratio: f64, h: usize, w: usize },
    #[error("no feasible rectangle: {h}x{w} grid at ratio {ratio} needs {need} cells removed, nearest rectangle area is {nearest}")]
    InfeasibleMask {
        h: usize,
        w: usize,
        ratio: f64,
        need: usize,
        nearest: usize,
    },
    #[error("token count {tokens} does not match mask grid {h}x{w}")]
    GridMismatch { tokens: usize, h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by model construction and forward passes.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image side {side} not divisible by patch size {patch}")]
    BadResolution { side: usize, patch: usize },
    #[error("width {width} not divisible by head count {heads}")]
    BadHeads { width: usize, heads: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    BadTokenId { id: usize, vocab: usize },
    #[error("text length {got} does not match configured max length {expected}")]
    BadTextLen { got: usize, expected: usize },
    #[error("positional grid must be square, got {count} rows")]
    NonSquareGrid { count: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("target grid extent must be >= 1")]
    EmptyTargetGrid,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Errors raised by the training pipeline.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (stage {stage}); aborting with last good parameters")]
    NonFiniteLoss { step: usize, stage: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("training plan has no stages")]
    EmptyPlan,
    #[error("stage {stage}: samples_seen {samples} below batch size {batch}")]
    TooFewSamples {
        stage: usize,
        samples: usize,
        batch: usize,
    },
    #[error("data stream exhausted (yielded no samples)")]
    EmptyStream,
    #[error("missing full-token baseline for model size {0}")]
    MissingBaseline(String),
    #[error("invalid training hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class list is empty")]
    NoClasses,
    #[error("prompt template list is empty")]
    NoTemplates,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("recall K must be >= 1, got {0}")]
    BadK(usize),
    #[error("K {k} exceeds sample count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("embedding row counts differ: {lhs} vs {rhs}")]
    RowMismatch { lhs: usize, rhs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by dataset generation and ingestion.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("resolution {0} below minimum 16")]
    ResolutionTooSmall(usize),
    #[error("manifest parse error at line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("missing or unreadable file {path}: {msg}")]
    BadFile { path: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint record")]
    Truncated,
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("config digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { found: String, expected: String },
    #[error("checkpoint parameter {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by the cost model.
#[derive(Debug, Error)]
pub enum CostError {
    #[error("GPU hours must be >= 0, got {0}")]
    NegativeHours(f64),
    #[error("rate must be > 0, got {0}")]
    BadRate(f64),
    #[error("comparison needs at least one row")]
    NoRows,
    #[error("baseline label {0:?} not found among rows")]
    BadBaseline(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}
