//! Line-delimited JSON files: one header object, then one record per line.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "eqlab-jsonl";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub seed: Option<u64>,
    pub config: Value,
}

impl Header {
    pub fn new(kind: &str, seed: Option<u64>, config: &impl Serialize) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            seed,
            config: serde_json::to_value(config).expect("config serializes to JSON"),
        }
    }
}

pub fn write<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> CliResult<()> {
    let mut text = serde_json::to_string(header).expect("header serializes");
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_lines(path: &Path) -> CliResult<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, l.to_string()))
        .collect())
}

fn schema(path: &Path, index: usize, line: usize, e: serde_json::Error) -> CliError {
    CliError::Schema {
        path: path.to_path_buf(),
        index,
        message: format!("line {line}: {e}"),
    }
}

fn parse_header(path: &Path, line: usize, text: &str) -> CliResult<Header> {
    let header: Header = serde_json::from_str(text).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        index: 0,
        message: format!("line {line}: bad header: {e}"),
    })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            index: 0,
            message: format!(
                "unsupported format {:?} version {} (expected {FORMAT:?} version {VERSION})",
                header.format, header.version
            ),
        });
    }
    Ok(header)
}

/// Reads a file written by [`write`], checking the header kind. Record
/// indices in errors count from 0 after the header.
pub fn read<T: DeserializeOwned>(path: &Path, kind: &str) -> CliResult<(Header, Vec<T>)> {
    let lines = read_lines(path)?;
    let Some(((first_no, first), rest)) = lines.split_first() else {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            index: 0,
            message: "empty file, expected a header line".into(),
        });
    };
    let header = parse_header(path, *first_no, first)?;
    if header.kind != kind {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            index: 0,
            message: format!("expected a {kind:?} file, found {:?}", header.kind),
        });
    }
    let records = rest
        .iter()
        .enumerate()
        .map(|(i, (n, l))| serde_json::from_str(l).map_err(|e| schema(path, i, *n, e)))
        .collect::<CliResult<Vec<T>>>()?;
    Ok((header, records))
}

/// Reads annotation records; a leading header line is optional.
pub fn read_annotations<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut lines = read_lines(path)?;
    if let Some((n, first)) = lines.first() {
        let is_header = serde_json::from_str::<Value>(first)
            .ok()
            .and_then(|v| v.get("format").cloned())
            .is_some();
        if is_header {
            parse_header(path, *n, first)?;
            lines.remove(0);
        }
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, (n, l))| serde_json::from_str(l).map_err(|e| schema(path, i, *n, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        a: u32,
        b: f64,
    }

    #[test]
    fn round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.jsonl");
        let recs = vec![Rec { a: 1, b: 0.1 }, Rec { a: 2, b: -3e-12 }];
        write(&path, &Header::new("thing", Some(7), &serde_json::json!({"k": 1})), &recs).unwrap();
        let (h, back): (_, Vec<Rec>) = read(&path, "thing").unwrap();
        assert_eq!(back, recs);
        assert_eq!(h.seed, Some(7));
        assert!(matches!(read::<Rec>(&path, "other"), Err(CliError::Schema { .. })));
    }

    #[test]
    fn annotation_errors_name_record_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(&path, "{\"a\":1,\"b\":2}\n{\"a\":3}\n").unwrap();
        let err = read_annotations::<Rec>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1") && msg.contains("`b`"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        fs::write(&path, "").unwrap();
        assert!(read_annotations::<Rec>(&path).unwrap().is_empty());
    }
}
