//! JSON output with every float written at 17 significant digits.
//!
//! `serde_json` normally emits the shortest round-tripping representation;
//! the on-disk formats here pin the digit count instead, so output bytes do
//! not depend on the float printer and files diff cleanly.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::{Error, Result};

/// Scientific notation with 17 significant digits, always `.` as separator.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

struct Sig17<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );
}

pub fn to_string_compact<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(CompactFormatter));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn to_string_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Reads a whole file; the error names the path.
pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(e, path))
}

/// Writes a whole file; the error names the path.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| with_path(e, path))
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn decode<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Decode {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &to_string_pretty(value)?)
}

pub fn write_compact<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = to_string_compact(value)?;
    s.push('\n');
    write_file(path, &s)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode(&read_file(path)?, path)
}

/// One compact JSON document per line.
pub fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_string_compact(item)?);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_file(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| decode(l, path))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_use_seventeen_digits() {
        assert_eq!(format_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(format_f64(-3.0), "-3.0000000000000000e0");
        assert_eq!(
            to_string_compact(&vec![0.1, 1.0]).unwrap(),
            "[1.0000000000000001e-1,1.0000000000000000e0]"
        );
        assert_eq!(to_string_compact(&f64::NAN).unwrap(), "null");
    }

    #[test]
    fn parse_back_is_exact() {
        let xs = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            5e-324,
        ];
        let s = to_string_compact(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
