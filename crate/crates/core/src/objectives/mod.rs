//! Training losses.
//!
//! The public loss functions take probability pairs or feature vectors and
//! return values; they are what evaluation code and tests call. The
//! [`grad`] submodule holds the logit-space versions with analytic gradients
//! that the training step uses.

pub mod grad;
mod metrics;

pub use metrics::{MetricsLog, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Probability pair `(P(real), P(fake))`.
pub type ProbPair = [f64; 2];

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the per-classifier cross-entropy inside the supervised term.
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_t: f64,
    pub lambda_n: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Negative-filter similarity threshold.
    pub beta: f64,
    /// L2-normalise the alignment features before the contrastive dot products.
    pub normalize_contrastive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 0.5,
            lambda_a: 0.2,
            lambda_t: 0.5,
            lambda_n: 0.2,
            tau: 0.5,
            beta: 0.8,
            normalize_contrastive: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_c, self.lambda_a, self.lambda_t, self.lambda_n];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.tau)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_efn: f64,
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_ctr: f64,
    pub l_nego: f64,
    pub total: f64,
}

/// `total = (l_efn + λ_c·l_cls) + λ_a·l_adv + λ_t·l_ctr + λ_n·l_nego`.
pub fn total_loss(l_efn: f64, l_cls: f64, l_adv: f64, l_ctr: f64, l_nego: f64, w: &LossWeights) -> LossBreakdown {
    let supervised = l_efn + w.lambda_c * l_cls;
    LossBreakdown {
        l_efn,
        l_cls,
        l_adv,
        l_ctr,
        l_nego,
        total: supervised + w.lambda_a * l_adv + w.lambda_t * l_ctr + w.lambda_n * l_nego,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassificationLoss {
    pub l_efn: f64,
    pub l_cls: f64,
    /// How many true-label probabilities had to be raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Fused and per-classifier cross-entropy, averaged over labeled samples.
/// Unlabeled entries (`None`) are skipped.
pub fn classification_loss(
    p_mefn: &[ProbPair],
    p_t: &[ProbPair],
    p_v: &[ProbPair],
    p_c: &[ProbPair],
    labels: &[Option<Label>],
) -> Result<ClassificationLoss> {
    let n = labels.len();
    for (name, p) in [("fused", p_mefn), ("text", p_t), ("visual", p_v), ("cross", p_c)] {
        if p.len() != n {
            return Err(Error::dim(format!("{name} probabilities"), n, p.len()));
        }
        check_probs(name, p)?;
    }
    let mut out = ClassificationLoss::default();
    let mut count = 0usize;
    let mut nll = |p: f64| {
        if p < PROB_FLOOR {
            out.clamped += 1;
            -PROB_FLOOR.ln()
        } else {
            -p.ln()
        }
    };
    let (mut efn, mut cls) = (0.0, 0.0);
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = label else { continue };
        let y = y.index();
        count += 1;
        efn += nll(p_mefn[i][y]);
        cls += nll(p_t[i][y]) + nll(p_v[i][y]) + nll(p_c[i][y]);
    }
    if out.clamped > 0 {
        log::warn!("{} probabilities clamped to {PROB_FLOOR} in classification loss", out.clamped);
    }
    if count > 0 {
        out.l_efn = efn / count as f64;
        out.l_cls = cls / count as f64;
    }
    Ok(out)
}

/// Sum of the textual and visual discriminator cross-entropies, each a mean
/// over the batch. Inputs are per-sample log-probabilities over domains.
pub fn adversarial_loss(logp_t: &[Vec<f64>], logp_v: &[Vec<f64>], domains: &[usize]) -> Result<f64> {
    let n = domains.len();
    if logp_t.len() != n || logp_v.len() != n {
        return Err(Error::dim("domain log-probabilities", n, logp_t.len().min(logp_v.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for lp in [logp_t, logp_v] {
        let mut sum = 0.0;
        for (row, &d) in lp.iter().zip(domains) {
            let v = row.get(d).ok_or_else(|| {
                Error::InvalidInput(format!("domain label {d} outside 0..{}", row.len()))
            })?;
            sum -= v;
        }
        total += sum / n as f64;
    }
    Ok(total)
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Rescaled similarity `(cos + 1) / 2`. A zero vector counts as cosine 0.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let cos = cosine(a, b).unwrap_or_else(|| {
        log::debug!("zero-norm vector in similarity; using cosine 0");
        0.0
    });
    (cos + 1.0) / 2.0
}

/// Negative-pair weight: `0` when the pair is at least `beta` similar,
/// otherwise `beta - sim`.
pub fn negative_weight(hv_i: &[f64], hv_j: &[f64], beta: f64) -> f64 {
    let sim = similarity(hv_i, hv_j);
    if sim >= beta {
        0.0
    } else {
        beta - sim
    }
}

/// Weight matrix over all ordered pairs of a batch. The diagonal is unused.
pub fn negative_weights(vectors: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|a| vectors.iter().map(|b| negative_weight(a, b, beta)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Number of real posts used as anchors.
    pub anchors: usize,
}

/// Contrastive alignment loss with filtered negatives, anchored on real
/// posts and averaged over anchors. A batch without real posts contributes 0.
pub fn contrastive_loss(
    x_t: &[Vec<f64>],
    x_v: &[Vec<f64>],
    labels: &[Label],
    sim_vectors: &[Vec<f64>],
    w: &LossWeights,
) -> Result<ContrastiveLoss> {
    let b = labels.len();
    if x_t.len() != b || x_v.len() != b || sim_vectors.len() != b {
        return Err(Error::dim("contrastive batch", b, x_t.len()));
    }
    let prep = |x: &Vec<f64>| -> Vec<f64> {
        if !w.normalize_contrastive {
            return x.clone();
        }
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            x.clone()
        } else {
            x.iter().map(|v| v / n).collect()
        }
    };
    let t: Vec<Vec<f64>> = x_t.iter().map(prep).collect();
    let v: Vec<Vec<f64>> = x_v.iter().map(prep).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut total = 0.0;
    let mut anchors = 0;
    for i in (0..b).filter(|&i| labels[i] == Label::Real) {
        anchors += 1;
        let pos = dot(&t[i], &v[i]) / w.tau;
        // log(e^pos + Σ w e^s) - pos, shifted by the largest active logit
        let mut terms = vec![(1.0, pos)];
        for j in (0..b).filter(|&j| j != i) {
            let wij = negative_weight(&sim_vectors[i], &sim_vectors[j], w.beta);
            if wij > 0.0 {
                terms.push((wij, dot(&t[i], &v[j]) / w.tau));
            }
        }
        let shift = terms.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = terms.iter().map(|(wt, s)| wt * (s - shift).exp()).sum();
        total += shift + denom.ln() - pos;
    }
    if anchors == 0 {
        log::debug!("contrastive batch without real posts");
        return Ok(ContrastiveLoss::default());
    }
    Ok(ContrastiveLoss {
        value: total / anchors as f64,
        anchors,
    })
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).ln();
        }
    }
    acc.max(0.0)
}

/// Agreement loss between the unimodal classifiers and the cross-modal one
/// on labeled real posts: `(1 / 2N⁺) Σ [JS(P_t‖P_c) + JS(P_v‖P_c)]`.
pub fn negotiation_loss(p_t: &[ProbPair], p_v: &[ProbPair], p_c: &[ProbPair], labels: &[Option<Label>]) -> Result<f64> {
    let n = labels.len();
    if p_t.len() != n || p_v.len() != n || p_c.len() != n {
        return Err(Error::dim("negotiation probabilities", n, p_t.len()));
    }
    for (name, p) in [("text", p_t), ("visual", p_v), ("cross", p_c)] {
        check_probs(name, p)?;
    }
    let mut sum = 0.0;
    let mut positives = 0usize;
    for i in (0..n).filter(|&i| labels[i] == Some(Label::Real)) {
        positives += 1;
        sum += js_divergence(&p_t[i], &p_c[i]) + js_divergence(&p_v[i], &p_c[i]);
    }
    Ok(if positives == 0 { 0.0 } else { sum / (2.0 * positives as f64) })
}

fn check_probs(name: &str, p: &[ProbPair]) -> Result<()> {
    for pair in p {
        if pair.iter().any(|v| !v.is_finite() || *v < 0.0) || (pair[0] + pair[1] - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("{name} probabilities {pair:?} are not a distribution")));
        }
    }
    Ok(())
}
