use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market specification: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("conditional density vanishes at v={value}, q={quantity}")]
    DensityZero { value: f64, quantity: f64 },

    #[error("virtual valuation is not monotone (worst violation {worst:.3e}); inversion undefined")]
    NonMonotone { worst: f64 },

    #[error("{value} lies outside the domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("{what} = {got} exceeds the cap of {limit}")]
    SizeCap { what: &'static str, limit: usize, got: usize },

    #[error("regression design matrix is rank deficient")]
    Singular,

    #[error("critic loss diverged ({loss:.3e})")]
    Divergence { loss: f64 },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
