//! Line-delimited JSON event log.
//!
//! Each record is one JSON object with an `event` key. Records carry no
//! timestamps, so identical runs produce identical logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
    sink: Option<(PathBuf, File)>,
}

impl RunLog {
    /// A log kept only in memory.
    pub fn memory() -> Self {
        RunLog::default()
    }

    /// A log that also appends each record to `path`.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            lines: Vec::new(),
            sink: Some((path.to_path_buf(), f)),
        })
    }

    /// Records `fields` (an object, or `null`) under `event`.
    pub fn record(&mut self, event: &str, fields: Value) -> Result<()> {
        let mut obj = match fields {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("event".into(), Value::String(event.to_string()));
        let line = Value::Object(obj).to_string();
        if let Some((path, f)) = self.sink.as_mut() {
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Parsed records, optionally only those of one event type.
    pub fn records(&self, event: Option<&str>) -> Vec<Value> {
        parse_lines(self.lines.iter().map(String::as_str), event)
    }
}

fn parse_lines<'a>(lines: impl Iterator<Item = &'a str>, event: Option<&str>) -> Vec<Value> {
    lines
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|v| event.is_none_or(|e| v.get("event").and_then(Value::as_str) == Some(e)))
        .collect()
}

/// Reads a run-log file.
pub fn read_log(path: &Path, event: Option<&str>) -> Result<Vec<Value>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    Ok(parse_lines(lines.iter().map(String::as_str), event))
}
