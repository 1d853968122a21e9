use std::path::Path;

use cact::config::unknown_key;
use cact::Error;

/// A failed verb: exit code plus one `key=value` error line.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub fields: Vec<(&'static str, String)>,
    pub message: String,
}

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING_CHECKPOINT: u8 = 3;
pub const EXIT_INVALID_DATASET: u8 = 4;

fn quote(s: &str) -> String {
    serde_json::to_string(&s.replace('\n', "; ")).expect("strings serialize")
}

impl Failure {
    pub fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            fields: Vec::new(),
            message: message.into(),
        }
    }

    pub fn with(mut self, key: &'static str, value: impl ToString) -> Self {
        self.fields.push((key, value.to_string()));
        self
    }

    /// `error kind=<kind> [key=value ..] message="<text>"`
    pub fn line(&self) -> String {
        let mut s = format!("error kind={}", self.kind);
        for (k, v) in &self.fields {
            s.push_str(&format!(" {k}={}", quote(v)));
        }
        s.push_str(&format!(" message={}", quote(&self.message)));
        s
    }

    /// Errors from reading the run configuration.
    pub fn config(e: Error) -> Self {
        match unknown_key(&e) {
            Some(key) => Failure::new(EXIT_CONFIG, "unknown_key", e.to_string()).with("key", key),
            None => Failure::new(EXIT_CONFIG, "config", e.to_string()),
        }
    }

    pub fn missing_checkpoint(path: &Path) -> Self {
        Failure::new(EXIT_MISSING_CHECKPOINT, "missing_checkpoint", format!("no checkpoint at {}", path.display()))
            .with("path", path.display())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::DegenerateBatch { .. } => "degenerate_batch",
            Error::Config(_) => return Failure::config(e),
            Error::Stratification(_) => "stratification",
            Error::NonFiniteGradient { param, .. } => {
                let p = param.clone();
                return Failure::new(EXIT_ERROR, "non_finite_gradient", e.to_string()).with("param", p);
            }
            Error::Generation(_) => "generation",
            Error::Validation(issues) => {
                let n = issues.len();
                return Failure::new(EXIT_INVALID_DATASET, "invalid_dataset", e.to_string()).with("issues", n);
            }
            Error::Format(_) => "format",
            Error::MissingFile(p) => {
                let p = p.display().to_string();
                return Failure::new(EXIT_ERROR, "missing_file", e.to_string()).with("path", p);
            }
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        };
        Failure::new(EXIT_ERROR, kind, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_lines_are_single_line_key_values() {
        let f = Failure::from(Error::Validation(vec!["a: missing".into(), "b: bad".into()]));
        assert_eq!(f.code, EXIT_INVALID_DATASET);
        let line = f.line();
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error kind=invalid_dataset issues=\"2\" message=\""), "{line}");
    }
}
