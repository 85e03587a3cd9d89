use std::fmt::Display;

/// A command failure, split by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 2).
    Usage(anyhow::Error),
    /// Anything that went wrong while running (exit 1).
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<mmr_core::Error> for Failure {
    fn from(e: mmr_core::Error) -> Self {
        match e {
            mmr_core::Error::Config(_) => Self::Usage(e.into()),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

pub fn usage(msg: impl Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

/// Adds context to an error while keeping its exit class.
pub trait Context<T> {
    fn context(self, msg: impl Display) -> CmdResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, msg: impl Display) -> CmdResult<T> {
        self.map_err(|e| match e.into() {
            Failure::Usage(inner) => Failure::Usage(inner.context(msg.to_string())),
            Failure::Runtime(inner) => Failure::Runtime(inner.context(msg.to_string())),
        })
    }
}
