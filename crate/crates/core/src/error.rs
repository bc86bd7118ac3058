use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("dimension mismatch: expected {expected}x{expected}, found {rows}x{cols} for {what}")]
    Dimension {
        what: &'static str,
        expected: usize,
        rows: usize,
        cols: usize,
    },

    #[error("jump {jump} exceeds the strip width bound {bound}")]
    JumpExceedsWidth { jump: i64, bound: usize },

    #[error("matrix I - Q*zeta - R is singular at layer {layer}")]
    Singular { layer: i64 },

    #[error("zeta recursion did not converge at layer {layer} (burn-in {burn_in}, discrepancy {discrepancy:e})")]
    ZetaNonConvergence {
        layer: i64,
        burn_in: usize,
        discrepancy: f64,
    },

    #[error("layer {layer} is outside the available window [{start}, {end}]")]
    OutsideWindow { layer: i64, start: i64, end: i64 },

    #[error("product of walk matrices vanished at layer {layer}")]
    ZeroProduct { layer: i64 },

    #[error("parameter out of range: {0}")]
    Range(String),

    #[error("regime mismatch: {check} requires {required}, found {found}")]
    Regime {
        check: String,
        required: String,
        found: String,
    },

    #[error("horizon exceeded: {0}")]
    Horizon(String),

    #[error("insufficient replicas: {0}")]
    Replicas(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
