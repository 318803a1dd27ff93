use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The steady-state quadratic has no real root.
    #[error("no real steady state (discriminant {0:e})")]
    NoSteadyState(f64),

    #[error(
        "cohort generation stalled at slot {slot}: {attempts} attempts without an accepted \
         patient (acceptance rate {rate:.4}); check the population configuration"
    )]
    CohortStalled {
        slot: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("simulation diverged at t = {time} min (non-finite glucose)")]
    Diverged { time: f64 },

    #[error("innovation covariance is not positive ({0:e})")]
    InnovationCovariance(f64),

    #[error("state covariance lost positive semidefiniteness (min eigenvalue {0:e})")]
    CovarianceIndefinite(f64),

    #[error("trace contains no samples")]
    EmptyTrace,

    #[error("patient {id}: {source}")]
    Patient {
        id: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn for_patient(self, id: usize) -> Self {
        match self {
            e @ Error::Patient { .. } => e,
            other => Error::Patient {
                id,
                source: Box::new(other),
            },
        }
    }
}
