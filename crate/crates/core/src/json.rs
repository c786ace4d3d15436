//! Canonical JSON output: deterministic layout, fixed float precision, atomic writes.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{Error, Result};

/// Formats a float with at most six fractional digits, trimming trailing zeros.
pub fn format_fixed6(value: f64) -> String {
    let mut s = format!("{value:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.push('0');
        }
    }
    if s == "-0.0" {
        s = "0.0".to_string();
    }
    s
}

/// Rounds to the value that `format_fixed6` would write.
pub fn round6(value: f64) -> f64 {
    format_fixed6(value).parse().unwrap_or(value)
}

/// Two levels of indentation (document and top-level arrays); records
/// below that are written on one line.
#[derive(Default)]
struct CanonicalFormatter {
    precise: bool,
    has_value: Vec<bool>,
}

const PRETTY_DEPTH: usize = 2;

impl CanonicalFormatter {
    fn pretty(&self) -> bool {
        self.has_value.len() <= PRETTY_DEPTH
    }

    fn indent<W: ?Sized + Write>(&self, w: &mut W) -> io::Result<()> {
        for _ in 0..self.has_value.len() {
            w.write_all(b"  ")?;
        }
        Ok(())
    }

    fn open<W: ?Sized + Write>(&mut self, w: &mut W, c: &[u8]) -> io::Result<()> {
        self.has_value.push(false);
        w.write_all(c)
    }

    fn close<W: ?Sized + Write>(&mut self, w: &mut W, c: &[u8]) -> io::Result<()> {
        let pretty = self.pretty();
        let had = self.has_value.pop().unwrap_or(false);
        if pretty && had {
            w.write_all(b"\n")?;
            self.indent(w)?;
        }
        w.write_all(c)
    }

    fn element<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        if self.pretty() {
            w.write_all(b"\n")?;
            self.indent(w)?;
        }
        Ok(())
    }

    fn mark(&mut self) {
        if let Some(last) = self.has_value.last_mut() {
            *last = true;
        }
    }
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if self.precise {
            let mut buf = shortest_repr(value);
            if !buf.contains(['.', 'e', 'E']) {
                buf.push_str(".0");
            }
            w.write_all(buf.as_bytes())
        } else {
            w.write_all(format_fixed6(value).as_bytes())
        }
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.open(w, b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.close(w, b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.element(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.mark();
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.open(w, b"{")
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.close(w, b"}")
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.element(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.pretty() {
            w.write_all(b": ")
        } else {
            w.write_all(b":")
        }
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.mark();
        Ok(())
    }
}

fn shortest_repr(value: f64) -> String {
    // `Display` for f64 prints the shortest round-tripping decimal.
    if value.is_finite() {
        format!("{value}")
    } else {
        "null".to_string()
    }
}

fn render<T: Serialize>(value: &T, precise: bool) -> Result<String> {
    let mut out = Vec::new();
    let fmt = CanonicalFormatter {
        precise,
        has_value: Vec::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
}

/// Dataset layout: floats limited to six fractional digits.
pub fn to_fixed6_string<T: Serialize>(value: &T) -> Result<String> {
    render(value, false)
}

/// Same layout, floats written with full round-trip precision.
pub fn to_precise_string<T: Serialize>(value: &T) -> Result<String> {
    render(value, true)
}

/// Writes through a temporary file in the destination directory and renames it
/// into place, so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_precise_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_precise_string(value)?.as_bytes())
}
