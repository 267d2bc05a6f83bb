use std::fmt;

pub const IO: i32 = 2;
pub const VOCABULARY: i32 = 3;
pub const TRAINING: i32 = 4;
pub const REPORT_MISMATCH: i32 = 5;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Failure::new(IO, anyhow::anyhow!("{msg}"))
    }

    pub fn mismatch(msg: impl fmt::Display) -> Self {
        Failure::new(REPORT_MISMATCH, anyhow::anyhow!("{msg}"))
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Failure {
            code: self.code,
            error: self.error.context(msg),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<genderdist::Error> for Failure {
    fn from(e: genderdist::Error) -> Self {
        use genderdist::Error as E;
        let code = match &e {
            E::VocabularyMismatch(_) | E::ModeMismatch { .. } => VOCABULARY,
            E::NonFinite(_) | E::Tape(_) | E::MixedBatch(_) | E::MissingRecords(_) | E::PositionOutOfRange { .. } => {
                TRAINING
            }
            _ => IO,
        };
        Failure::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(IO, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(IO, e)
    }
}
