use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error at t={t}{}: {msg}", branch_label(.branch))]
    Numerical {
        t: usize,
        branch: Option<(usize, usize)>,
        msg: String,
    },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    /// Wraps an error raised while processing one subject.
    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn branch_label(branch: &Option<(usize, usize)>) -> String {
    match branch {
        Some((o, p)) => format!(" branch ({o},{p})"),
        None => String::new(),
    }
}

impl Error {
    /// Stable short name of the variant; a subject wrapper reports its cause.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Numerical { .. } => "numerical",
            Error::Capacity(_) => "capacity",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Fit(_) => "fit",
            Error::Bootstrap(_) => "bootstrap",
            Error::Subject { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn numerical(t: usize, msg: impl Into<String>) -> Self {
        Error::Numerical {
            t,
            branch: None,
            msg: msg.into(),
        }
    }

    /// Wraps the error with the id of the subject being processed.
    pub fn in_subject(self, subject: &str) -> Self {
        Error::Subject {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }
}
