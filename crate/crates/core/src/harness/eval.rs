use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, SampleRecord, TestSplit};
use crate::error::{Error, Result};
use crate::lus::write_lines;
use crate::mefn::ModelState;

/// Classification metrics with fake as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// F1 from counts; 0 when the class never appears in truth or prediction.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

impl Metrics {
    pub fn from_labels(truth: &[Label], pred: &[Label]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim("predictions", truth.len(), pred.len()));
        }
        if truth.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (t, p) in truth.iter().zip(pred) {
            match (t, p) {
                (Label::Fake, Label::Fake) => tp += 1,
                (Label::Real, Label::Fake) => fp += 1,
                (Label::Fake, Label::Real) => fn_ += 1,
                (Label::Real, Label::Real) => tn += 1,
            }
        }
        Ok(Metrics {
            n: truth.len(),
            accuracy: (tp + tn) as f64 / truth.len() as f64,
            f1_fake: f1(tp, fp, fn_),
            f1_real: f1(tn, fn_, fp),
            tp,
            fp,
            fn_,
            tn,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: Label,
    pub pred: Label,
    pub p_fake: f64,
}

/// Fused-argmax predictions on labeled records (ties go to real).
pub fn predict_labeled(state: &ModelState, records: &[SampleRecord]) -> Result<Vec<Prediction>> {
    let views = state.encode_records(records)?;
    let probs = state.predict(&views)?;
    records
        .iter()
        .zip(probs)
        .map(|(r, p)| {
            let truth = r.label.ok_or_else(|| Error::Record {
                id: r.id.clone(),
                reason: "evaluation record has no label".into(),
            })?;
            Ok(Prediction {
                id: r.id.clone(),
                truth,
                pred: if p[1] > p[0] { Label::Fake } else { Label::Real },
                p_fake: p[1],
            })
        })
        .collect()
}

/// Accuracy and per-class F1 on the held-out split.
pub fn evaluate(state: &ModelState, test: &TestSplit) -> Result<(Metrics, Vec<Prediction>)> {
    let preds = predict_labeled(state, &test.records)?;
    let truth: Vec<Label> = preds.iter().map(|p| p.truth).collect();
    let pred: Vec<Label> = preds.iter().map(|p| p.pred).collect();
    Ok((Metrics::from_labels(&truth, &pred)?, preds))
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let rows = preds
        .iter()
        .map(|p| format!("{},{},{},{}", p.id, p.truth.index(), p.pred.index(), p.p_fake));
    write_lines(path, "id,true,pred,P_fake", rows)
}
