use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("malformed table: {0}")]
    Structure(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unknown identifier: {0}")]
    Lookup(String),
    #[error("student-course graph has {} disconnected components: {}", .0.len(), describe_components(.0))]
    Disconnected(Vec<Vec<String>>),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn describe_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| {
            let head: Vec<&str> = c.iter().take(5).map(String::as_str).collect();
            if c.len() > 5 {
                format!("[{} ... ({} courses)]", head.join(", "), c.len())
            } else {
                format!("[{}]", head.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
