use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// News label. `0` is real, `1` is fake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Real
        } else {
            Label::Fake
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

/// One news item: pre-extracted text and visual embeddings, an optional
/// backbone class-probability vector for the image, its domain and label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub domain_id: usize,
    pub text_raw: Vec<f64>,
    pub visual_raw: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl SampleRecord {
    /// Checks embedding widths and the probability-vector invariant.
    pub fn validate(&self, text_dim: usize, visual_dim: usize, hv_dim: Option<usize>) -> Result<()> {
        let fail = |reason: String| Error::Record {
            id: self.id.clone(),
            reason,
        };
        if self.text_raw.len() != text_dim {
            return Err(fail(format!("text_raw has {} values, expected {text_dim}", self.text_raw.len())));
        }
        if self.visual_raw.len() != visual_dim {
            return Err(fail(format!(
                "visual_raw has {} values, expected {visual_dim}",
                self.visual_raw.len()
            )));
        }
        if self.text_raw.iter().chain(&self.visual_raw).any(|v| !v.is_finite()) {
            return Err(fail("non-finite embedding value".into()));
        }
        if let Some(hv) = &self.hv {
            if let Some(d) = hv_dim {
                if hv.len() != d {
                    return Err(fail(format!("hv has {} values, expected {d}", hv.len())));
                }
            }
            if hv.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(fail("hv must be nonnegative".into()));
            }
            let total: f64 = hv.iter().sum();
            if (total - 1.0).abs() > 1e-4 {
                return Err(fail(format!("hv sums to {total}, expected 1")));
            }
        }
        Ok(())
    }

    /// Parses one JSON-lines entry, naming the record in any error.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Record {
            id: "<unparseable>".into(),
            reason: e.to_string(),
        })?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing id>")
            .to_owned();
        serde_json::from_value(value).map_err(|e| Error::Record {
            id,
            reason: e.to_string(),
        })
    }
}
