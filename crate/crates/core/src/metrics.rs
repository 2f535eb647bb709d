//! Newline-delimited metrics records.
//!
//! One record per line: `run=<id> stage=<stage>` followed by `key=value`
//! fields, separated by single spaces. Space, `=`, `%` and control
//! characters inside keys and values are percent-escaped, so every record
//! parses back to exactly what was written. Reals use Rust's shortest
//! round-trip formatting.

use std::fmt;
use std::hash::Hasher;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsRecord {
    pub run: String,
    pub stage: String,
    pub fields: Vec<(String, String)>,
}

impl MetricsRecord {
    pub fn new(run: impl Into<String>, stage: impl Into<String>) -> Self {
        Self {
            run: run.into(),
            stage: stage.into(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split(' ');
        let mut head = |want: &str| -> Result<String> {
            let tok = parts.next().unwrap_or("");
            match tok.split_once('=') {
                Some((k, v)) if k == want => unescape(v),
                _ => Err(Error::format(
                    "metrics record",
                    format!("expected `{want}=` field, found {tok:?}"),
                )),
            }
        };
        let run = head("run")?;
        let stage = head("stage")?;
        let fields = parts
            .map(|tok| {
                let (k, v) = tok.split_once('=').ok_or_else(|| {
                    Error::format("metrics record", format!("field {tok:?} has no `=`"))
                })?;
                if k.is_empty() {
                    return Err(Error::format("metrics record", "empty key"));
                }
                Ok((unescape(k)?, unescape(v)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { run, stage, fields })
    }

    /// Parses every non-empty line.
    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .filter(|l| !l.is_empty())
            .map(Self::parse)
            .collect()
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run={} stage={}", escape(&self.run), escape(&self.stage))?;
        for (k, v) in &self.fields {
            write!(f, " {}={}", escape(k), escape(v))?;
        }
        Ok(())
    }
}

/// Stable run identifier: FNV-1a of the resolved config text, in hex.
pub fn run_id(resolved_config: &str) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(resolved_config.as_bytes());
    format!("{:016x}", h.finish())
}

fn needs_escape(c: char) -> bool {
    c == ' ' || c == '=' || c == '%' || c.is_control()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if needs_escape(c) {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                out.push_str(&format!("%{b:02X}"));
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = bytes
                .get(i + 1..i + 3)
                .and_then(|h| std::str::from_utf8(h).ok())
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::format("metrics record", format!("bad escape in {s:?}")))?;
            out.push(hex);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out)
        .map_err(|_| Error::format("metrics record", format!("escape in {s:?} is not UTF-8")))
}
