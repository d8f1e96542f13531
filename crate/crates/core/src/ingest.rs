//! Raw dictionary-dump parsing and the canonical line-delimited dataset
//! format.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::text;

/// One crowd-sourced dictionary record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntry {
    pub phrase: String,
    pub definition: String,
    #[serde(default)]
    pub example: String,
    pub upvotes: u64,
    pub downvotes: u64,
    pub added_date: NaiveDate,
    pub source_id: String,
}

impl RawEntry {
    pub fn total_votes(&self) -> u64 {
        self.upvotes + self.downvotes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    /// One JSON object per line.
    LineDelimited,
    /// CSV with a header row naming the fields.
    Tabular,
}

impl FromStr for DumpFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "line-delimited" | "jsonl" | "ndjson" => Ok(DumpFormat::LineDelimited),
            "tabular" | "csv" => Ok(DumpFormat::Tabular),
            other => Err(IngestError::Config(format!(
                "unknown dump format {other:?} (expected line-delimited or tabular)"
            ))),
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParseOutcome {
    pub entries: Vec<RawEntry>,
    pub errors: Vec<ParseError>,
}

impl ParseOutcome {
    pub fn lines_seen(&self) -> usize {
        self.entries.len() + self.errors.len()
    }
}

/// Parse a dump. Malformed records are collected as [`ParseError`]s and
/// never abort the stream; only an unreadable stream is fatal.
pub fn parse_dump<R: Read>(stream: R, format: DumpFormat) -> Result<ParseOutcome, IngestError> {
    match format {
        DumpFormat::LineDelimited => parse_lines(stream),
        DumpFormat::Tabular => parse_tabular(stream),
    }
}

pub fn parse_dump_file(path: &Path, format: DumpFormat) -> Result<ParseOutcome, IngestError> {
    parse_dump(File::open(path)?, format)
}

fn parse_lines<R: Read>(stream: R) -> Result<ParseOutcome, IngestError> {
    let mut out = ParseOutcome::default();
    for (idx, chunk) in BufReader::new(stream).split(b'\n').enumerate() {
        let line_no = idx + 1;
        let mut bytes = chunk?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        let result = std::str::from_utf8(&bytes)
            .map_err(|_| "invalid UTF-8".to_string())
            .and_then(|line| {
                if line.trim().is_empty() {
                    return Err("empty line".to_string());
                }
                match serde_json::from_str::<Value>(line) {
                    Ok(Value::Object(map)) => entry_from_map(&map),
                    Ok(_) => Err("record is not an object".to_string()),
                    Err(e) => Err(format!("invalid JSON: {e}")),
                }
            });
        match result {
            Ok(entry) => out.entries.push(entry),
            Err(reason) => out.errors.push(ParseError { line: line_no, reason }),
        }
    }
    Ok(out)
}

fn parse_tabular<R: Read>(stream: R) -> Result<ParseOutcome, IngestError> {
    let mut out = ParseOutcome::default();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(stream);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) if e.is_io_error() => return Err(io::Error::other(e.to_string()).into()),
        Err(e) => {
            out.errors.push(ParseError { line: 1, reason: format!("bad header: {e}") });
            return Ok(out);
        }
    };
    for record in reader.records() {
        match record {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let mut map = Map::new();
                for (name, value) in headers.iter().zip(rec.iter()) {
                    map.insert(name.trim().to_string(), tabular_value(name.trim(), value));
                }
                match entry_from_map(&map) {
                    Ok(e) => out.entries.push(e),
                    Err(reason) => out.errors.push(ParseError { line, reason }),
                }
            }
            Err(e) if e.is_io_error() => return Err(io::Error::other(e.to_string()).into()),
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                out.errors.push(ParseError { line, reason: format!("bad row: {e}") });
            }
        }
    }
    Ok(out)
}

fn tabular_value(field: &str, raw: &str) -> Value {
    match field {
        "upvotes" | "downvotes" => raw
            .trim()
            .parse::<i64>()
            .map(Value::from)
            .unwrap_or_else(|_| Value::String(raw.to_string())),
        _ => Value::String(raw.to_string()),
    }
}

fn required_text(map: &Map<String, Value>, field: &str) -> Result<String, String> {
    match map.get(field) {
        None | Some(Value::Null) => Err(format!("missing {field}")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(format!("empty {field}")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("{field} is not text")),
    }
}

fn vote_count(map: &Map<String, Value>, field: &str) -> Result<u64, String> {
    match map.get(field) {
        None | Some(Value::Null) => Err(format!("missing {field}")),
        Some(Value::Number(n)) => {
            if let Some(v) = n.as_u64() {
                Ok(v)
            } else if n.as_i64().is_some_and(|v| v < 0) {
                Err(format!("negative {field}"))
            } else {
                Err(format!("{field} is not an integer"))
            }
        }
        Some(_) => Err(format!("{field} is not an integer")),
    }
}

/// Accepts `YYYY-MM-DD`, RFC 3339 timestamps, and naive `YYYY-MM-DDTHH:MM:SS`
/// (taken as UTC). Offsets are converted to the UTC calendar date.
pub fn parse_date(raw: &str) -> Result<NaiveDate, String> {
    let s = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc).date_naive());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.date());
        }
    }
    Err(format!("invalid added_date {s:?}"))
}

fn entry_from_map(map: &Map<String, Value>) -> Result<RawEntry, String> {
    let phrase = required_text(map, "phrase")?.trim().to_string();
    let definition = required_text(map, "definition")?;
    let example = match map.get("example") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("example is not text".into()),
    };
    let upvotes = vote_count(map, "upvotes")?;
    let downvotes = vote_count(map, "downvotes")?;
    let added_date = match map.get("added_date") {
        Some(Value::String(s)) => parse_date(s)?,
        None | Some(Value::Null) => return Err("missing added_date".into()),
        Some(_) => return Err("added_date is not text".into()),
    };
    let source_id = match map.get("source_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        None | Some(Value::Null) => derived_source_id(&phrase, &definition),
        Some(_) => return Err("source_id is not text".into()),
    };
    Ok(RawEntry { phrase, definition, example, upvotes, downvotes, added_date, source_id })
}

fn derived_source_id(phrase: &str, definition: &str) -> String {
    let h = text::sha256_hex(format!("{phrase}\u{0}{definition}").as_bytes());
    format!("h{}", &h[..12])
}

/// Serialize records one JSON object per line.
pub fn write_records<T: Serialize, W: Write>(records: &[T], writer: W) -> Result<usize, IngestError> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Write records to `path` atomically (temp file in the same directory, then
/// rename). Returns the number of records written.
pub fn write_dataset<T: Serialize>(records: &[T], path: &Path) -> Result<usize, IngestError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let n = write_records(records, tmp.as_file_mut())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(n)
}

/// Read a line-delimited dataset of any record type. Lines that fail to
/// deserialize are reported, not fatal.
pub fn read_dataset<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<ParseError>), IngestError> {
    read_records(File::open(path)?)
}

pub fn read_records<T: DeserializeOwned, R: Read>(stream: R) -> Result<(Vec<T>, Vec<ParseError>), IngestError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in BufReader::new(stream).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(ParseError { line: idx + 1, reason: e.to_string() }),
        }
    }
    Ok((records, errors))
}
