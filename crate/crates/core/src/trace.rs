//! Parameter traces and their on-disk text format.
//!
//! A trace file looks like this:
//!
//! ```text
//! traceinv-trace 1
//! eta 0.1
//! n 1
//! epochs 2
//! [params]
//! 0 0.5 0.5
//! 1 0.48899532750603825 0.48165887917673045
//! [debug]
//! 0 0.026908061999907074 0.664036770267849
//! 1 0.022457977271397256 0.6500573037855932
//! ```
//!
//! The first line is the magic and format version. Header lines are
//! `key value`. Each `[params]` row is `epoch w b`; each optional `[debug]`
//! row is `epoch loss ŷ₀ … ŷₙ₋₁`. Blank lines and `#` comments are ignored.
//!
//! Floats are written in Rust's shortest round-trip form by default, so a
//! save/load cycle is bit-exact. [`FloatFormat::Significant`] rounds `w`,
//! `b` and the debug values to a fixed number of significant digits before
//! writing them.
//!
//! The same document layout (magic line, header, `[section]` rows) is
//! shared by the dataset and report files written by the CLI; see
//! [`Document`].

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::Params;

pub const TRACE_MAGIC: &str = "traceinv-trace";
pub const FORMAT_VERSION: u32 = 1;

/// Per-epoch values that a trainer knows but an observer of the parameters does not.
#[derive(Debug, Clone, PartialEq)]
pub struct DebugRecord {
    pub yhat: Vec<f64>,
    pub loss: f64,
}

/// The observer's view of a training run: public `eta` and `n`, plus the
/// parameters of every epoch starting at epoch 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTrace {
    eta: f64,
    n: usize,
    entries: Vec<Params>,
    debug: Option<Vec<DebugRecord>>,
}

impl ParamTrace {
    pub fn new(eta: f64, n: usize, entries: Vec<Params>) -> Result<Self> {
        let trace = Self {
            eta,
            n,
            entries,
            debug: None,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn with_debug(
        eta: f64,
        n: usize,
        entries: Vec<Params>,
        debug: Vec<DebugRecord>,
    ) -> Result<Self> {
        let trace = Self {
            eta,
            n,
            entries,
            debug: Some(debug),
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Validation(format!(
                "eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.n == 0 {
            return Err(Error::Validation("n must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::Validation(
                "trace must contain at least epoch 0".into(),
            ));
        }
        if let Some((j, p)) = self
            .entries
            .iter()
            .enumerate()
            .find(|(_, p)| !p.w.is_finite() || !p.b.is_finite())
        {
            return Err(Error::Validation(format!(
                "epoch {j} has non-finite parameters ({}, {})",
                p.w, p.b
            )));
        }
        if let Some(debug) = &self.debug {
            if debug.len() != self.entries.len() {
                return Err(Error::Validation(format!(
                    "debug block has {} records for {} epochs",
                    debug.len(),
                    self.entries.len()
                )));
            }
            for (j, rec) in debug.iter().enumerate() {
                if rec.yhat.len() != self.n {
                    return Err(Error::Validation(format!(
                        "debug record for epoch {j} has {} predictions, expected n={}",
                        rec.yhat.len(),
                        self.n
                    )));
                }
                if !rec.loss.is_finite() || rec.yhat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "debug record for epoch {j} is not finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of recorded epochs `E`.
    pub fn epochs(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Params] {
        &self.entries
    }

    pub fn debug(&self) -> Option<&[DebugRecord]> {
        self.debug.as_deref()
    }

    pub fn without_debug(mut self) -> Self {
        self.debug = None;
        self
    }

    /// Keeps the first `epochs` entries.
    pub fn truncated(&self, epochs: usize) -> Result<Self> {
        if epochs == 0 || epochs > self.epochs() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-epoch trace to {epochs} epochs",
                self.epochs()
            )));
        }
        Ok(Self {
            eta: self.eta,
            n: self.n,
            entries: self.entries[..epochs].to_vec(),
            debug: self.debug.as_ref().map(|d| d[..epochs].to_vec()),
        })
    }

    /// Applies `format` to every recorded value, as a save/load cycle would.
    pub fn rounded(&self, format: FloatFormat) -> Self {
        let r = |v: f64| format.round(v);
        Self {
            eta: self.eta,
            n: self.n,
            entries: self
                .entries
                .iter()
                .map(|p| Params {
                    w: r(p.w),
                    b: r(p.b),
                })
                .collect(),
            debug: self.debug.as_ref().map(|d| {
                d.iter()
                    .map(|rec| DebugRecord {
                        yhat: rec.yhat.iter().copied().map(r).collect(),
                        loss: r(rec.loss),
                    })
                    .collect()
            }),
        }
    }
}

/// How floats are rendered when saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatFormat {
    /// Shortest decimal that parses back to the same `f64`.
    #[default]
    Shortest,
    /// Rounded to this many significant digits (1..=17).
    Significant(u8),
}

impl FloatFormat {
    pub fn significant(digits: u8) -> Result<Self> {
        if !(1..=17).contains(&digits) {
            return Err(Error::InvalidArgument(format!(
                "significant digits must be in 1..=17, got {digits}"
            )));
        }
        Ok(Self::Significant(digits))
    }

    pub fn round(self, v: f64) -> f64 {
        match self {
            Self::Shortest => v,
            Self::Significant(d) => {
                let digits = d.clamp(1, 17) as usize;
                format!("{:.*e}", digits - 1, v).parse().unwrap_or(v)
            }
        }
    }

    pub fn render(self, v: f64) -> String {
        format!("{}", self.round(v))
    }
}

pub fn save_trace<W: Write>(trace: &ParamTrace, destination: W) -> Result<()> {
    save_trace_with(trace, FloatFormat::Shortest, destination)
}

pub fn save_trace_with<W: Write>(
    trace: &ParamTrace,
    format: FloatFormat,
    mut destination: W,
) -> Result<()> {
    destination.write_all(render_trace(trace, format).as_bytes())?;
    destination.flush()?;
    Ok(())
}

pub fn render_trace(trace: &ParamTrace, format: FloatFormat) -> String {
    let mut doc = Document::new(TRACE_MAGIC);
    if let FloatFormat::Significant(d) = format {
        doc.comment(format!("parameters rounded to {d} significant digits"));
    }
    doc.key("eta", trace.eta.to_string());
    doc.key("n", trace.n.to_string());
    doc.key("epochs", trace.epochs().to_string());
    let params = trace
        .entries
        .iter()
        .enumerate()
        .map(|(j, p)| format!("{j} {} {}", format.render(p.w), format.render(p.b)))
        .collect();
    doc.section("params", params);
    if let Some(debug) = &trace.debug {
        let rows = debug
            .iter()
            .enumerate()
            .map(|(j, rec)| {
                let mut row = format!("{j} {}", format.render(rec.loss));
                for &v in &rec.yhat {
                    let _ = write!(row, " {}", format.render(v));
                }
                row
            })
            .collect();
        doc.section("debug", rows);
    }
    doc.render()
}

pub fn load_trace<R: Read>(mut source: R) -> Result<ParamTrace> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<ParamTrace> {
    let doc = Document::parse(text)?;
    doc.expect_magic(TRACE_MAGIC)?;

    let eta: f64 = doc.required("eta")?;
    let n: usize = doc.required("n")?;
    let epochs: usize = doc.required("epochs")?;

    let rows = doc
        .rows("params")
        .ok_or_else(|| Error::Validation("missing [params] section".into()))?;
    let mut entries = Vec::with_capacity(rows.len());
    for (j, row) in rows.iter().enumerate() {
        let fields = row.numbers(3)?;
        check_epoch_index(row, fields[0], j)?;
        entries.push(Params {
            w: fields[1],
            b: fields[2],
        });
    }
    if entries.len() != epochs {
        return Err(Error::Validation(format!(
            "header declares {epochs} epochs but [params] has {} rows",
            entries.len()
        )));
    }

    let debug = match doc.rows("debug") {
        None => None,
        Some(rows) => {
            let mut records = Vec::with_capacity(rows.len());
            for (j, row) in rows.iter().enumerate() {
                let fields = row.numbers(n + 2)?;
                check_epoch_index(row, fields[0], j)?;
                records.push(DebugRecord {
                    loss: fields[1],
                    yhat: fields[2..].to_vec(),
                });
            }
            Some(records)
        }
    };

    let trace = ParamTrace {
        eta,
        n,
        entries,
        debug,
    };
    trace.validate()?;
    Ok(trace)
}

fn check_epoch_index(row: &Row, value: f64, expected: usize) -> Result<()> {
    if value != expected as f64 {
        return Err(Error::Validation(format!(
            "line {}: epoch indices must be contiguous from 0, expected {expected}, found {value}",
            row.line
        )));
    }
    Ok(())
}

/// A magic line, `key value` header lines, then named sections of rows.
#[derive(Debug, Clone, Default)]
pub struct Document {
    magic: String,
    version: u32,
    comments: Vec<String>,
    keys: Vec<(String, String, usize)>,
    sections: Vec<(String, Vec<Row>)>,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub line: usize,
    pub text: String,
}

impl Row {
    /// Parses exactly `count` whitespace-separated floats.
    pub fn numbers(&self, count: usize) -> Result<Vec<f64>> {
        let fields: Vec<&str> = self.text.split_whitespace().collect();
        if fields.len() != count {
            return Err(Error::Parse {
                line: self.line,
                message: format!("expected {count} fields, found {}", fields.len()),
            });
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: self.line,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect()
    }
}

impl Document {
    pub fn new(magic: &str) -> Self {
        Self {
            magic: magic.to_string(),
            version: FORMAT_VERSION,
            ..Default::default()
        }
    }

    pub fn comment(&mut self, text: impl Into<String>) {
        self.comments.push(text.into());
    }

    pub fn key(&mut self, key: &str, value: impl Into<String>) {
        self.keys.push((key.to_string(), value.into(), 0));
    }

    pub fn section(&mut self, name: &str, rows: Vec<String>) {
        let rows = rows.into_iter().map(|text| Row { line: 0, text }).collect();
        self.sections.push((name.to_string(), rows));
    }

    pub fn render(&self) -> String {
        let mut out = format!("{} {}\n", self.magic, self.version);
        for c in &self.comments {
            let _ = writeln!(out, "# {c}");
        }
        for (k, v, _) in &self.keys {
            let _ = writeln!(out, "{k} {v}");
        }
        for (name, rows) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for row in rows {
                let _ = writeln!(out, "{}", row.text);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (line, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let mut parts = first.split_whitespace();
        let magic = parts.next().unwrap_or_default().to_string();
        let version = parts
            .next()
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `<magic> <version>`, found {first:?}"),
            })?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line,
                message: "trailing text after format version".into(),
            });
        }
        if version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported format version {version}"
            )));
        }

        let mut doc = Self {
            magic,
            version,
            ..Default::default()
        };
        for (line, text) in lines {
            if let Some(name) = text.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unterminated section header {text:?}"),
                })?;
                if doc.sections.iter().any(|(n, _)| n == name) {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate section [{name}]"),
                    });
                }
                doc.sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, rows)) = doc.sections.last_mut() {
                rows.push(Row {
                    line,
                    text: text.to_string(),
                });
            } else {
                let (key, value) =
                    text.split_once(char::is_whitespace)
                        .ok_or_else(|| Error::Parse {
                            line,
                            message: format!("expected `key value`, found {text:?}"),
                        })?;
                if doc.keys.iter().any(|(k, _, _)| k == key) {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate key {key:?}"),
                    });
                }
                doc.keys
                    .push((key.to_string(), value.trim().to_string(), line));
            }
        }
        Ok(doc)
    }

    pub fn magic(&self) -> &str {
        &self.magic
    }

    pub fn expect_magic(&self, magic: &str) -> Result<()> {
        if self.magic != magic {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected a {magic:?} file, found {:?}", self.magic),
            });
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.keys
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    /// Parses a required header value; a missing key is a validation error.
    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (_, value, line) = self
            .keys
            .iter()
            .find(|(k, _, _)| k == key)
            .ok_or_else(|| Error::Validation(format!("missing required field `{key}`")))?;
        value.parse().map_err(|_| Error::Parse {
            line: *line,
            message: format!("invalid value for `{key}`: {value:?}"),
        })
    }

    pub fn rows(&self, section: &str) -> Option<&[Row]> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .map(|(_, r)| r.as_slice())
    }
}
