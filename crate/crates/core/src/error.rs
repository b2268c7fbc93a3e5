use thiserror::Error;

use crate::mix1::solver::SolveResult;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("domain error: {0}")]
    Domain(String),

    /// Both arrival rates are zero, so per-packet quantities are undefined.
    #[error("degenerate input: no traffic (lambda_r = lambda_b = 0)")]
    DegenerateInput,

    #[error(
        "nonstationary regime: no stationary policy exists for lambda_r = lambda_b = 1 \
         (phi(RB) diverges; the optimum depends on the initial queue)"
    )]
    NonstationaryRegime,

    #[error("fixed-point iteration did not converge after {iterations} iterations")]
    Convergence {
        iterations: usize,
        last: Box<SolveResult>,
    },

    #[error(
        "singular rates: lambda_r = lambda_b gives rho = 1, which is not stable \
         (a small symmetric drop rate would be needed; not supported)"
    )]
    SingularRates,

    #[error("unstable drop profile: {0}")]
    Stability(String),

    #[error("delay violation at slot {slot}: a packet stayed longer than T = {delay}")]
    DelayViolation { slot: u64, delay: usize },
}

impl MixError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        MixError::Domain(msg.into())
    }

    /// Regime errors (as opposed to bad input) map to a distinct CLI exit code.
    pub fn is_regime(&self) -> bool {
        matches!(
            self,
            MixError::NonstationaryRegime | MixError::SingularRates
        )
    }
}

pub type Result<T, E = MixError> = std::result::Result<T, E>;
