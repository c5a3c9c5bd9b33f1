use std::fmt;

use cmcseg::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type Outcome = Result<(), Failure>;

impl Failure {
    pub fn usage(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_USAGE,
            error,
        }
    }

    pub fn data(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_DATA,
            error,
        }
    }

    pub fn gradcheck(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_GRADCHECK,
            error,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonFiniteGradient(_) => {
                EXIT_NUMERIC
            }
            _ => EXIT_DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}
