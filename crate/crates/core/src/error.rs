use thiserror::Error;

pub type Result<T, E = RemError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RemError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("layer {layer}: duplicate edge {src} -> {dst}")]
    DuplicateEdge { layer: usize, src: u32, dst: u32 },

    #[error("layer {layer}: self-loop on node {node}")]
    SelfLoop { layer: usize, node: u32 },

    #[error("layer id {0} is neither declared nor used (layer ids must be contiguous from 0)")]
    LayerGap(usize),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("exact oracle refused: {edges} probabilistic edges exceed the cap of {cap}")]
    OracleCap { edges: usize, cap: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
