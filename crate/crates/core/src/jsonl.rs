//! JSON-lines files whose first line is a schema header.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, JsonContext};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaHeader {
    pub schema: String,
    pub version: u32,
}

/// Renders a header line followed by one line per record.
pub fn render<T: Serialize>(schema: &str, version: u32, records: &[T]) -> Result<String> {
    let header = SchemaHeader { schema: schema.to_string(), version };
    let mut out = serde_json::to_string(&header).json_context(|| format!("{schema} header"))?;
    out.push('\n');
    for r in records {
        let line = serde_json::to_string(r).json_context(|| format!("{schema} record"))?;
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, schema: &str, version: u32, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).io_context(dir)?;
    }
    std::fs::write(path, render(schema, version, records)?).io_context(path)
}

/// Parses records. A header line is required when `require_header` is set;
/// otherwise a leading header is accepted but optional.
pub fn parse<T: DeserializeOwned>(
    text: &str,
    schema: &str,
    max_version: u32,
    require_header: bool,
    origin: &str,
) -> Result<Vec<T>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let header = lines
        .peek()
        .and_then(|(_, l)| serde_json::from_str::<SchemaHeader>(l).ok());
    match header {
        Some(h) => {
            if h.schema != schema || h.version > max_version {
                return Err(Error::InvalidInput(format!(
                    "{origin}: expected schema {schema} v{max_version} or older, found {} v{}",
                    h.schema, h.version
                )));
            }
            lines.next();
        }
        None if require_header => {
            return Err(Error::InvalidInput(format!("{origin}: missing {schema} header line")));
        }
        None => {}
    }
    lines
        .map(|(i, l)| serde_json::from_str(l).json_context(|| format!("{origin}:{}", i + 1)))
        .collect()
}

pub fn read<T: DeserializeOwned>(path: &Path, schema: &str, max_version: u32, require_header: bool) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).io_context(path)?;
    parse(&text, schema, max_version, require_header, &path.display().to_string())
}
