use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(user, item, timestamp)` record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user<TAB>item<TAB>timestamp`, optional header line.
    Tsv,
    /// One JSON object per line with `user`, `item` and `timestamp` fields.
    JsonLines,
}

#[derive(Deserialize)]
struct JsonRecord {
    user: serde_json::Value,
    item: serde_json::Value,
    timestamp: serde_json::Value,
}

fn key(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads an interaction log, deduplicating exact triples and sorting by
/// `(user, timestamp)`. Equal timestamps within a user keep file order.
pub fn ingest(path: &Path, format: InputFormat) -> Result<Vec<InteractionEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (user, item, ts) = match format {
            InputFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    return Err(parse_err(line_no, format!("expected 3 tab-separated fields, got {}", fields.len())));
                }
                let ts = fields[2].trim();
                if line_no == 1 && ts.parse::<i64>().is_err() && ts.chars().any(|c| c.is_alphabetic()) {
                    // header
                    continue;
                }
                let ts = ts
                    .parse::<i64>()
                    .map_err(|_| parse_err(line_no, format!("timestamp `{ts}` is not an integer")))?;
                (fields[0].trim().to_string(), fields[1].trim().to_string(), ts)
            }
            InputFormat::JsonLines => {
                let rec: JsonRecord =
                    serde_json::from_str(line).map_err(|e| parse_err(line_no, format!("bad record: {e}")))?;
                let ts = rec
                    .timestamp
                    .as_i64()
                    .ok_or_else(|| parse_err(line_no, format!("timestamp `{}` is not an integer", rec.timestamp)))?;
                let user = key(&rec.user).ok_or_else(|| parse_err(line_no, "user must be a string or integer".into()))?;
                let item = key(&rec.item).ok_or_else(|| parse_err(line_no, "item must be a string or integer".into()))?;
                (user, item, ts)
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(line_no, "empty user or item id".into()));
        }
        if ts < 0 {
            return Err(parse_err(line_no, format!("negative timestamp {ts}")));
        }
        events.push(InteractionEvent { user, item, timestamp: ts });
    }

    let mut seen = HashSet::new();
    events.retain(|e| seen.insert(e.clone()));
    events.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_and_sorts() {
        let f = write("b\tx\t5\na\ty\t9\na\tz\t3\n");
        let ev = ingest(f.path(), InputFormat::Tsv).unwrap();
        assert_eq!(ev.len(), 3);
        let order: Vec<(&str, i64)> = ev.iter().map(|e| (e.user.as_str(), e.timestamp)).collect();
        assert_eq!(order, vec![("a", 3), ("a", 9), ("b", 5)]);
    }

    #[test]
    fn header_is_skipped() {
        let f = write("user\titem\ttimestamp\na\tx\t1\n");
        assert_eq!(ingest(f.path(), InputFormat::Tsv).unwrap().len(), 1);
    }

    #[test]
    fn malformed_timestamp_names_line() {
        let f = write("a\tx\t1\na\ty\tsoon\n");
        match ingest(f.path(), InputFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_triples_collapse() {
        let f = write("a\tx\t1\na\tx\t1\n");
        assert_eq!(ingest(f.path(), InputFormat::Tsv).unwrap().len(), 1);
    }

    #[test]
    fn ties_keep_file_order() {
        let f = write("a\tq\t1\na\tp\t1\n");
        let ev = ingest(f.path(), InputFormat::Tsv).unwrap();
        assert_eq!(ev[0].item, "q");
        assert_eq!(ev[1].item, "p");
    }

    #[test]
    fn json_lines() {
        let f = write("{\"user\": 1, \"item\": \"x\", \"timestamp\": 4}\n{\"user\": 1, \"item\": 7, \"timestamp\": 2}\n");
        let ev = ingest(f.path(), InputFormat::JsonLines).unwrap();
        assert_eq!(ev[0].item, "7");
        let bad = write("{\"user\": 1, \"item\": \"x\", \"timestamp\": 1.5}\n");
        assert!(matches!(ingest(bad.path(), InputFormat::JsonLines), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ingest(Path::new("/nonexistent/log.tsv"), InputFormat::Tsv).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/log.tsv"));
    }
}
