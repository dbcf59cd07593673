use serde::{Deserialize, Serialize};

use crate::diffcore::{log_softmax, log_sum_exp, softmax};
use crate::error::{Error, Result};
use crate::objectives::ProbPair;

/// How the three classifiers' outputs are combined.
///
/// Both modes start from `score_y = Σ_cls log P_cls(y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `softmax(score)`: a product of experts.
    #[default]
    ProductOfExperts,
    /// `softmax(score / log Σ exp(score))`. The divisor is a log-probability
    /// sum and can be close to zero or negative, so this mode is only kept
    /// for comparison.
    Normalized,
}

fn scores(logits: [&[f64]; 3]) -> Result<[f64; 2]> {
    let mut s = [0.0; 2];
    for l in logits {
        if l.len() != 2 {
            return Err(Error::dim("classifier logits", 2, l.len()));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("classifier logits {l:?}")));
        }
        let lp = log_softmax(l);
        s[0] += lp[0];
        s[1] += lp[1];
    }
    Ok(s)
}

fn fuse_scores(s: [f64; 2], mode: FusionMode) -> [f64; 2] {
    let z = match mode {
        FusionMode::ProductOfExperts => s,
        FusionMode::Normalized => {
            let l = log_sum_exp(&s);
            [s[0] / l, s[1] / l]
        }
    };
    let p = softmax(&z);
    [p[0], p[1]]
}

/// Fused probability pair from the text, visual and cross-modal logits.
pub fn fuse_logits(lt: &[f64], lv: &[f64], lc: &[f64], mode: FusionMode) -> Result<ProbPair> {
    let p = fuse_scores(scores([lt, lv, lc])?, mode);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("fused probabilities {p:?}")));
    }
    Ok(p)
}

/// `-log P_fused(target)` and its gradient with respect to each classifier's
/// logits (the same vector for all three).
pub(crate) fn fused_nll_grad(lt: &[f64], lv: &[f64], lc: &[f64], target: usize, mode: FusionMode) -> Result<(f64, [[f64; 2]; 3])> {
    let logits = [lt, lv, lc];
    let s = scores(logits)?;
    let p = fuse_scores(s, mode);
    let nll = -p[target].max(f64::MIN_POSITIVE).ln();
    // d nll / d z where P = softmax(z)
    let dz = [p[0] - (target == 0) as u8 as f64, p[1] - (target == 1) as u8 as f64];
    let ds = match mode {
        FusionMode::ProductOfExperts => dz,
        FusionMode::Normalized => {
            // z_y = s_y / L, L = lse(s): dz_y/ds_k = δ_yk / L - s_y q_k / L²
            let l = log_sum_exp(&s);
            let q = softmax(&s);
            let cross = dz[0] * s[0] + dz[1] * s[1];
            [dz[0] / l - cross * q[0] / (l * l), dz[1] / l - cross * q[1] / (l * l)]
        }
    };
    let total: f64 = ds[0] + ds[1];
    let mut grads = [[0.0; 2]; 3];
    for (g, l) in grads.iter_mut().zip(logits) {
        let pc = softmax(l);
        // s_y = Σ log_softmax(l)_y  ⇒  ds_y/dl_k = δ_yk − p_k
        *g = [ds[0] - total * pc[0], ds[1] - total * pc[1]];
    }
    Ok((nll, grads))
}
