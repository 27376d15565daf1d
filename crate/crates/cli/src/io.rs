use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::NamedTempFile;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Usage = 2,
    Data = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::Usage,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::Data,
            error: e.into(),
        }
    }

    pub fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Self {
            exit: Exit::Numerical,
            error: e.into(),
        }
    }

    pub fn context(mut self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(ctx);
        self
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Replaces `path` with `bytes` through a temporary file in the same
/// directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::data(e).context(format!("writing {}", path.display()));
    let mut tmp = NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::data)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult {
    let mut bytes = Vec::new();
    for it in items {
        serde_json::to_writer(&mut bytes, it).map_err(CliError::data)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn print_json<T: Serialize + ?Sized>(value: &T) -> CliResult {
    let s = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    println!("{s}");
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(e).context(format!("reading {}", path.display())))
}

/// Deserializes a JSON value, reporting failures with the offending field
/// path.
pub fn from_json_str<T: DeserializeOwned>(text: &str, origin: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::data(anyhow::anyhow!("{origin}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    from_json_str(&read_text(path)?, &path.display().to_string())
}
