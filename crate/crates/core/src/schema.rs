//! The nine-aspect polyp attribute schema and multi-hot attribute vectors.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "polyp-attributes/1";
pub const ASPECT_COUNT: usize = 9;

/// Aspect whose value doubles as the binary malignancy label in evaluation.
pub const MALIGNANCY_ASPECT: &str = "pit-pattern-class";
pub const MALIGNANT_VALUE: &str = "malignant";

/// Aspect filled from the number of polyps in a case rather than sampled.
pub const COUNT_ASPECT: &str = "count-context";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub version: String,
    pub aspects: Vec<Aspect>,
}

fn aspect(name: &str, values: &[&str]) -> Aspect {
    Aspect {
        name: name.to_string(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION.to_string(),
            aspects: vec![
                aspect("size-class", &["diminutive", "small", "large"]),
                aspect("Paris-shape", &["pedunculated", "sessile", "flat"]),
                aspect("surface-pattern", &["smooth", "lobulated", "granular"]),
                aspect("color", &["reddish", "pale", "isochromatic"]),
                aspect("boundary", &["clear", "unclear"]),
                aspect(
                    "location-segment",
                    &["rectum", "sigmoid", "descending", "proximal"],
                ),
                aspect(MALIGNANCY_ASPECT, &["benign", MALIGNANT_VALUE]),
                aspect("vascularity", &["regular", "irregular", "absent"]),
                aspect(COUNT_ASPECT, &["solitary", "multiple"]),
            ],
        }
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.aspects.len() != ASPECT_COUNT {
            return Err(Error::Schema(format!(
                "expected {ASPECT_COUNT} aspects, found {}",
                self.aspects.len()
            )));
        }
        let mut names = HashSet::new();
        for a in &self.aspects {
            if !valid_token(&a.name) || !names.insert(a.name.as_str()) {
                return Err(Error::Schema(format!(
                    "bad or duplicate aspect `{}`",
                    a.name
                )));
            }
            if !(2..=4).contains(&a.values.len()) {
                return Err(Error::Schema(format!(
                    "aspect `{}` has {} categories, expected 2 to 4",
                    a.name,
                    a.values.len()
                )));
            }
            let mut seen = HashSet::new();
            for v in &a.values {
                if !valid_token(v) || !seen.insert(v.as_str()) {
                    return Err(Error::Schema(format!(
                        "bad or duplicate value `{v}` in aspect `{}`",
                        a.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads a bare schema or a corpus schema sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let mut value: serde_json::Value = crate::json::read(path)?;
        if let Some(inner) = value.get_mut("schema") {
            value = inner.take();
        }
        let schema: Self = serde_json::from_value(value)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn total_bits(&self) -> usize {
        self.aspects.iter().map(|a| a.values.len()).sum()
    }

    /// First bit of each aspect's block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.aspects
            .iter()
            .map(|a| {
                let o = acc;
                acc += a.values.len();
                o
            })
            .collect()
    }

    pub fn aspect_index(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, aspect: usize, value: &str) -> Option<usize> {
        self.aspects[aspect].values.iter().position(|v| v == value)
    }

    /// Bit index of `value` within the full vector.
    pub fn bit(&self, aspect: usize, value: usize) -> usize {
        self.offsets()[aspect] + value
    }

    /// Encodes one category index per aspect.
    pub fn encode(&self, assignment: &[usize]) -> Result<AttributeVector> {
        if assignment.len() != self.aspects.len() {
            return Err(Error::InvalidAttribute(format!(
                "assignment has {} entries for {} aspects",
                assignment.len(),
                self.aspects.len()
            )));
        }
        let mut bits = vec![0u8; self.total_bits()];
        for (a, (&v, off)) in assignment.iter().zip(self.offsets()).enumerate() {
            if v >= self.aspects[a].values.len() {
                return Err(Error::InvalidAttribute(format!(
                    "category {v} out of range for aspect `{}`",
                    self.aspects[a].name
                )));
            }
            bits[off + v] = 1;
        }
        Ok(AttributeVector {
            bits,
            schema_version: self.version.clone(),
            union: false,
        })
    }
}

/// Multi-hot encoding over the schema, one block of bits per aspect.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeVector {
    pub bits: Vec<u8>,
    pub schema_version: String,
    /// Set on OR-combined vectors, which may carry several bits per block.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub union: bool,
}

impl AttributeVector {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_zero(&self) -> bool {
        self.popcount() == 0
    }

    /// Cosine similarity of the raw 0/1 vectors.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        if self.bits.len() != other.bits.len() {
            return Err(Error::InvalidAttribute(format!(
                "length {} vs {}",
                self.bits.len(),
                other.bits.len()
            )));
        }
        let (a, b) = (self.popcount(), other.popcount());
        if a == 0 || b == 0 {
            return Err(Error::InvalidAttribute("all-zero attribute vector".into()));
        }
        let shared = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(x, y)| **x != 0 && **y != 0)
            .count();
        Ok(shared as f64 / ((a * b) as f64).sqrt())
    }

    /// Checks bit values and, unless this is a union, the one-bit-per-aspect
    /// rule.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.schema_version != schema.version {
            return Err(Error::Schema(format!(
                "vector has schema `{}`, expected `{}`",
                self.schema_version, schema.version
            )));
        }
        if self.bits.len() != schema.total_bits() || self.bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidAttribute("malformed bit vector".into()));
        }
        if !self.union {
            for (a, off) in schema.offsets().into_iter().enumerate() {
                let n = schema.aspects[a].values.len();
                if self.bits[off..off + n].iter().filter(|&&b| b == 1).count() > 1 {
                    return Err(Error::InvalidAttribute(format!(
                        "several bits set in aspect `{}`",
                        schema.aspects[a].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Category index set for `aspect`, if any.
    pub fn category(&self, schema: &AttributeSchema, aspect: usize) -> Option<usize> {
        let off = schema.offsets()[aspect];
        let n = schema.aspects[aspect].values.len();
        self.bits[off..off + n].iter().position(|&b| b == 1)
    }
}
