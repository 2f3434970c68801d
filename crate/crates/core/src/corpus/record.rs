//! Author records and the line-oriented corpus file format.
//!
//! ```text
//! #hulm-corpus v1
//! <author_id>\t<timestamp>\t<attributes json>\t<doc_labels json>\t<text>
//! ```
//!
//! `author_id` and `text` escape backslash, tab, newline and carriage return
//! as `\\`, `\t`, `\n`, `\r`. The JSON fields are compact objects with sorted
//! keys; attribute values are numbers, label values strings (numbers are
//! accepted on input and kept as their JSON text). An empty field means `{}`.
//! Attributes may repeat on every line of an author but must agree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "#hulm-corpus v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub text: String,
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuthorRecord {
    pub author_id: String,
    /// Ascending by timestamp.
    pub documents: Vec<Document>,
    pub attributes: BTreeMap<String, f64>,
}

impl AuthorRecord {
    pub fn attribute(&self, name: &str) -> Option<f64> {
        self.attributes.get(name).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub authors: Vec<AuthorRecord>,
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => return Err(format!("unknown escape \\{o}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

fn parse_attrs(field: &str, line: usize) -> Result<BTreeMap<String, f64>> {
    if field.is_empty() {
        return Ok(BTreeMap::new());
    }
    let obj: BTreeMap<String, Value> = serde_json::from_str(field).map_err(|e| Error::Parse {
        line,
        msg: format!("attributes: {e}"),
    })?;
    obj.into_iter()
        .map(|(k, v)| match v.as_f64() {
            Some(x) => Ok((k, x)),
            None => Err(Error::Parse {
                line,
                msg: format!("attribute {k:?} is not a number"),
            }),
        })
        .collect()
}

fn parse_labels(field: &str, line: usize) -> Result<BTreeMap<String, String>> {
    if field.is_empty() {
        return Ok(BTreeMap::new());
    }
    let obj: BTreeMap<String, Value> = serde_json::from_str(field).map_err(|e| Error::Parse {
        line,
        msg: format!("doc_labels: {e}"),
    })?;
    obj.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            Value::Number(n) => Ok((k, n.to_string())),
            other => Err(Error::Parse {
                line,
                msg: format!("label {k:?} has unsupported value {other}"),
            }),
        })
        .collect()
}

impl Corpus {
    pub fn new(authors: Vec<AuthorRecord>) -> Self {
        Self { authors }
    }

    pub fn num_documents(&self) -> usize {
        self.authors.iter().map(|a| a.documents.len()).sum()
    }

    pub fn author(&self, id: &str) -> Option<&AuthorRecord> {
        self.authors.iter().find(|a| a.author_id == id)
    }

    /// Parses corpus text: groups lines by author (first-appearance order)
    /// and sorts each author's documents by timestamp.
    pub fn parse(text: &str) -> Result<Self> {
        let mut authors: Vec<AuthorRecord> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if !saw_header {
                if raw.trim().is_empty() {
                    continue;
                }
                if raw != CORPUS_HEADER {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("expected header {CORPUS_HEADER:?}"),
                    });
                }
                saw_header = true;
                continue;
            }
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.splitn(5, '\t').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let bad = |msg: String| Error::Parse { line: line_no, msg };
            let author_id = unescape_field(fields[0]).map_err(&bad)?;
            if author_id.is_empty() {
                return Err(bad("empty author_id".into()));
            }
            let timestamp: i64 = fields[1]
                .parse()
                .map_err(|e| bad(format!("timestamp {:?}: {e}", fields[1])))?;
            let attrs = parse_attrs(fields[2], line_no)?;
            let labels = parse_labels(fields[3], line_no)?;
            let text = unescape_field(fields[4]).map_err(&bad)?;

            let slot = *index.entry(author_id.clone()).or_insert_with(|| {
                authors.push(AuthorRecord {
                    author_id: author_id.clone(),
                    documents: Vec::new(),
                    attributes: BTreeMap::new(),
                });
                authors.len() - 1
            });
            let author = &mut authors[slot];
            for (k, v) in attrs {
                match author.attributes.get(&k) {
                    Some(old) if old.to_bits() != v.to_bits() => {
                        return Err(Error::data(format!(
                            "line {line_no}: author {author_id:?} attribute {k:?} is {v} but was {old} earlier"
                        )));
                    }
                    _ => {
                        author.attributes.insert(k, v);
                    }
                }
            }
            author.documents.push(Document {
                timestamp,
                text,
                labels,
            });
        }
        for a in &mut authors {
            a.documents.sort_by_key(|d| d.timestamp);
        }
        Ok(Self { authors })
    }

    pub fn ingest(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in the canonical layout; output is a pure function of the
    /// corpus contents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CORPUS_HEADER);
        out.push('\n');
        for a in &self.authors {
            let attrs = serde_json::to_string(&a.attributes).expect("finite attributes serialize");
            for d in &a.documents {
                let labels = serde_json::to_string(&d.labels).expect("string map serializes");
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    escape_field(&a.author_id),
                    d.timestamp,
                    attrs,
                    labels,
                    escape_field(&d.text)
                );
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Names of attributes present on every author.
    pub fn has_attribute(&self, name: &str) -> bool {
        !self.authors.is_empty() && self.authors.iter().all(|a| a.attributes.contains_key(name))
    }
}
