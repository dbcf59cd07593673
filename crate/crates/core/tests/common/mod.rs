#![allow(dead_code)]

use adose::corpus::Label;
use adose::diffcore::{softmax_rows, AdamConfig};
use adose::mefn::{LossScales, ModelConfig, ModelState, NetId, TrainBatch};
use adose::objectives::{adversarial_loss, classification_loss, contrastive_loss, negotiation_loss, LossWeights};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model whose widest layer is 8 (the cross classifier input). Biases are
/// randomised too: with zero biases a dead hidden layer puts the next
/// pre-activation exactly on the relu kink.
pub fn tiny_model(seed: u64) -> ModelState {
    let cfg = ModelConfig {
        d: 4,
        encoder_hidden: 5,
        classifier_hidden: 4,
        discriminator_hidden: 4,
        ..ModelConfig::default()
    };
    let mut m = ModelState::new(cfg, 3, 4, 4, AdamConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in NetId::ALL {
        for p in m.net_mut(id).params_mut() {
            *p += rng.random_range(-0.3f32..0.3);
        }
    }
    m
}

/// Four rows: two real, one fake, one unlabeled, one per domain.
pub fn tiny_batch(seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hv = || {
        let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let similarity = (0..4).map(|_| hv()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    TrainBatch {
        text: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.5..1.5)),
        visual: Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.5..1.5)),
        labels: vec![Some(Label::Real), Some(Label::Fake), Some(Label::Real), None],
        domains: vec![0, 1, 2, 3],
        similarity,
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn pairs(logits: &Array2<f64>) -> Vec<[f64; 2]> {
    softmax_rows(logits.view()).rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Scaled objective computed only through the per-sample value functions,
/// independent of the batched backward pass.
pub fn objective(m: &ModelState, b: &TrainBatch, w: &LossWeights, s: &LossScales) -> f64 {
    let views = m.encode_batch(b.text.view(), b.visual.view()).unwrap();
    let fused = m.predict(&views).unwrap();
    let (pt, pv, pc) = (pairs(&views.logits_t), pairs(&views.logits_v), pairs(&views.logits_c));
    let cls = classification_loss(&fused, &pt, &pv, &pc, &b.labels).unwrap();
    let nego = negotiation_loss(&pt, &pv, &pc, &b.labels).unwrap();
    let (dt, dv) = m.discriminate_batch(&views, 1.0).unwrap();
    let adv = adversarial_loss(&rows(&dt), &rows(&dv), &b.domains).unwrap();
    let keep: Vec<usize> = (0..b.labels.len()).filter(|&i| b.labels[i].is_some()).collect();
    let pick = |a: &Array2<f64>| keep.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>();
    let ctr = contrastive_loss(
        &pick(&views.x_t),
        &pick(&views.x_v),
        &keep.iter().map(|&i| b.labels[i].unwrap()).collect::<Vec<_>>(),
        &keep.iter().map(|&i| b.similarity[i].clone()).collect::<Vec<_>>(),
        w,
    )
    .unwrap();
    s.efn * cls.l_efn + s.cls * cls.l_cls + s.adv * adv + s.ctr * ctr.value + s.nego * nego
}

/// Encoder parameters receive the adversarial gradient through the
/// reversal layer, so their analytic value is `-coeff` times the true one.
pub fn reversal_factor(id: NetId, s: &LossScales, coeff: f64) -> Option<f64> {
    let encoder = matches!(id, NetId::TextEncoder | NetId::VisualEncoder);
    let others = s.efn != 0.0 || s.cls != 0.0 || s.ctr != 0.0 || s.nego != 0.0;
    match (encoder, s.adv != 0.0, others) {
        (false, _, _) | (true, false, _) => Some(1.0),
        (true, true, false) => Some(-coeff),
        // mixed objective on an encoder: no single factor
        (true, true, true) => None,
    }
}

/// Central difference of `f` with respect to parameter `k` of net `id`.
/// The realised step is measured after rounding to f32. When the relu
/// pattern changes inside the interval, the step is shrunk.
pub fn central_difference<F>(m: &ModelState, id: NetId, k: usize, f: F) -> f64
where
    F: Fn(&ModelState) -> f64,
{
    let at = |step: f32| {
        let mut mm = m.clone();
        let p = mm.net_mut(id).params_mut().nth(k).unwrap();
        let before = *p;
        *p = before + step;
        let real = f64::from(*p - before);
        (f(&mm), real)
    };
    let estimate = |h: f32| {
        let (fp, hp) = at(h);
        let (fm, hm) = at(-h);
        (fp - fm) / (hp - hm)
    };
    // Richardson-style agreement check between two step sizes guards
    // against a kink between the evaluation points.
    let mut h = 1e-3f32;
    let mut prev = estimate(h);
    while h > 1e-6 {
        let next = estimate(h / 4.0);
        if (next - prev).abs() <= 1e-6 * (1.0 + next.abs()) {
            return next;
        }
        prev = next;
        h /= 4.0;
    }
    prev
}

/// Relative error with a floor so that two vanishing gradients agree.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for t in i..=j {
            r[idx[t]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
