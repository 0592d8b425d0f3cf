use thiserror::Error;

use crate::precoder::DualTraceEntry;

/// Errors produced by the channel model, link analysis and precoder solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix dimension must be at least 1")]
    InvalidDimension,

    #[error("path taps out of range for frame dimension {mn}: delay {delay_tap}, doppler {doppler_tap}")]
    InvalidPath {
        delay_tap: usize,
        doppler_tap: i64,
        mn: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("frame geometry invalid: {0}")]
    InvalidFrame(String),

    #[error("modulation order {0} is not a square Gray-coded QAM order (power of 4, at least 4)")]
    InvalidModOrder(usize),

    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("bit count {bits} is not a multiple of {bits_per_symbol} bits per symbol")]
    BitFraming { bits: usize, bits_per_symbol: usize },

    #[error("effective channel Gram matrix is not positive definite; zero-forcing equalizer undefined")]
    RankDeficient,

    #[error("lower-bound argument {arg} is negative; bound undefined at these parameters")]
    LowerBoundDomain { arg: f64 },

    #[error("precoder lies in the null space of the sensing derivative channel; CRB is unbounded")]
    InfiniteCrb,

    #[error(
        "dual iterate outside domain: lambda - mu * eigenvalue must stay positive \
         (lambda = {lambda:.6e}, mu = {mu:.6e}, largest sensing eigenvalue = {eig_max:.6e})"
    )]
    DualDomain { lambda: f64, mu: f64, eig_max: f64 },

    #[error(
        "CRB threshold infeasible: constraint requires a sensing value of {required:.6e} \
         but the best achievable with the power budget is {achievable:.6e}"
    )]
    Infeasible { required: f64, achievable: f64 },

    #[error("dual ascent did not converge within {max_iters} iterations")]
    NonConvergence {
        max_iters: usize,
        trace: Vec<DualTraceEntry>,
    },

    #[error("brute-force reference limited to dimension {max}, got {mn}")]
    BruteForceTooLarge { mn: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
