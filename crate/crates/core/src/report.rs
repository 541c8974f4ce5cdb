//! Deterministic report cleanup: separates per-polyp findings from
//! non-diagnostic text and encodes each finding as an attribute vector.
//!
//! A finding is a sentence that starts (at column zero, case-sensitively)
//! with `Polyp <n>:` followed by `aspect=value` pairs separated by `;`:
//!
//! ```text
//! Polyp 1: size-class=small; Paris-shape=sessile; color=pale.
//! ```
//!
//! Anything else is discarded.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::MedicalCase;
use crate::schema::{AttributeSchema, AttributeVector};

pub const POSITIVE_SENTENCE: &str = "This is a colon with polyps.";
pub const NEGATIVE_SENTENCE: &str = "This is a normal background.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolypSentence {
    pub text: String,
    pub attributes: AttributeVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedReport {
    pub case_id: String,
    pub polyp_sentences: Vec<PolypSentence>,
    pub discarded: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Renders the finding for polyp number `ordinal` (1-based).
pub fn render_polyp_sentence(
    schema: &AttributeSchema,
    ordinal: usize,
    attributes: &AttributeVector,
) -> String {
    let parts: Vec<String> = schema
        .aspects
        .iter()
        .enumerate()
        .filter_map(|(a, aspect)| {
            attributes
                .category(schema, a)
                .map(|v| format!("{}={}", aspect.name, aspect.values[v]))
        })
        .collect();
    format!("Polyp {ordinal}: {}.", parts.join("; "))
}

/// Returns the body after a `Polyp <digits>:` prefix.
fn polyp_body(sentence: &str) -> Option<&str> {
    let rest = sentence.strip_prefix("Polyp ")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    rest[digits..].strip_prefix(':')
}

fn parse_body(index: usize, body: &str, schema: &AttributeSchema) -> Result<AttributeVector> {
    let body = body.trim();
    let body = body.strip_suffix('.').unwrap_or(body);
    let offsets = schema.offsets();
    let mut bits = vec![0u8; schema.total_bits()];
    let mut seen = HashSet::new();
    for pair in body.split(';') {
        let pair = pair.trim();
        let parse_err = || Error::Parse {
            sentence: index,
            token: pair.to_string(),
        };
        let (name, value) = pair.split_once('=').ok_or_else(parse_err)?;
        let a = schema.aspect_index(name).ok_or_else(|| Error::Parse {
            sentence: index,
            token: name.to_string(),
        })?;
        let v = schema.value_index(a, value).ok_or_else(|| Error::Parse {
            sentence: index,
            token: value.to_string(),
        })?;
        if !seen.insert(a) {
            return Err(Error::Parse {
                sentence: index,
                token: name.to_string(),
            });
        }
        bits[offsets[a] + v] = 1;
    }
    Ok(AttributeVector {
        bits,
        schema_version: schema.version.clone(),
        union: false,
    })
}

/// Splits raw report sentences into parsed findings and discarded text,
/// preserving order within each list.
pub fn parse_report<S: AsRef<str>>(raw: &[S], schema: &AttributeSchema) -> Result<ParsedReport> {
    let mut report = ParsedReport {
        case_id: String::new(),
        polyp_sentences: Vec::new(),
        discarded: Vec::new(),
        fingerprint: None,
    };
    for (i, s) in raw.iter().enumerate() {
        let s = s.as_ref().trim_end();
        match polyp_body(s) {
            Some(body) => report.polyp_sentences.push(PolypSentence {
                text: s.to_string(),
                attributes: parse_body(i, body, schema)?,
            }),
            None => report.discarded.push(s.to_string()),
        }
    }
    Ok(report)
}

/// Parses a case's raw report and tags the result with its id.
pub fn parse_case(case: &MedicalCase, schema: &AttributeSchema) -> Result<ParsedReport> {
    let mut r = parse_report(&case.report, schema)?;
    r.case_id = case.case_id.clone();
    r.fingerprint = case.fingerprint.clone();
    Ok(r)
}

pub fn standardized_sentence(report: &ParsedReport) -> &'static str {
    standardized_for(!report.polyp_sentences.is_empty())
}

pub fn standardized_for(polyp_positive: bool) -> &'static str {
    if polyp_positive {
        POSITIVE_SENTENCE
    } else {
        NEGATIVE_SENTENCE
    }
}

/// Bitwise OR of attribute vectors sharing one schema version.
pub fn union_attributes(vectors: &[AttributeVector]) -> Result<AttributeVector> {
    let first = vectors
        .first()
        .ok_or(Error::EmptyInput("union_attributes"))?;
    let mut out = first.clone();
    for v in &vectors[1..] {
        if v.schema_version != out.schema_version || v.bits.len() != out.bits.len() {
            return Err(Error::Schema(format!(
                "cannot combine `{}` with `{}`",
                out.schema_version, v.schema_version
            )));
        }
        for (o, b) in out.bits.iter_mut().zip(&v.bits) {
            *o |= b;
        }
        out.union = true;
    }
    Ok(out)
}
