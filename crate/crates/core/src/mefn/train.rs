use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::fusion::fused_nll_grad;
use super::{stack_inputs, ModelState, NetId};
use crate::corpus::{Label, Minibatch, SampleRecord};
use crate::diffcore::{grl_backward_batch, GradTape, NetGrads};
use crate::error::{Error, Result};
use crate::objectives::grad::{contrastive, cross_entropy, negotiation};
use crate::objectives::{negative_weights, total_loss, LossBreakdown, LossWeights};

/// Which vectors decide how similar two posts are when weighting negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilaritySource {
    /// Visual topic distributions when every record has one, raw visual
    /// features otherwise.
    #[default]
    Auto,
    Hv,
    VisualRaw,
}

/// One batch ready for a training step.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub text: Array2<f64>,
    pub visual: Array2<f64>,
    pub labels: Vec<Option<Label>>,
    pub domains: Vec<usize>,
    /// Per-row vectors for negative weighting.
    pub similarity: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn from_records(records: &[&SampleRecord], source: SimilaritySource) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::InvalidInput("empty training batch".into()));
        };
        let (text, visual) = stack_inputs(records.iter().copied(), first.text_raw.len(), first.visual_raw.len())?;
        let use_hv = match source {
            SimilaritySource::Hv => {
                if let Some(r) = records.iter().find(|r| r.hv.is_none()) {
                    return Err(Error::Record {
                        id: r.id.clone(),
                        reason: "hv required for negative weighting".into(),
                    });
                }
                true
            }
            SimilaritySource::VisualRaw => false,
            SimilaritySource::Auto => records.iter().all(|r| r.hv.is_some()),
        };
        let similarity = records
            .iter()
            .map(|r| match (&r.hv, use_hv) {
                (Some(hv), true) => hv.clone(),
                _ => r.visual_raw.clone(),
            })
            .collect();
        Ok(TrainBatch {
            text,
            visual,
            labels: records.iter().map(|r| r.label).collect(),
            domains: records.iter().map(|r| r.domain_id).collect(),
            similarity,
        })
    }

    /// Source, unlabeled target and labeled target rows, in that order.
    pub fn from_minibatch(batch: &Minibatch, source: SimilaritySource) -> Result<Self> {
        let rows: Vec<&SampleRecord> = batch
            .source
            .iter()
            .chain(&batch.target_unlabeled)
            .chain(&batch.target_labeled)
            .copied()
            .collect();
        Self::from_records(&rows, source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A single loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Efn,
    Cls,
    Adv,
    Ctr,
    Nego,
}

/// Multipliers applied to each loss term's gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScales {
    pub efn: f64,
    pub cls: f64,
    pub adv: f64,
    pub ctr: f64,
    pub nego: f64,
}

impl LossScales {
    /// The training objective: fused cross-entropy plus the weighted terms.
    pub fn from_weights(w: &LossWeights) -> Self {
        LossScales {
            efn: 1.0,
            cls: w.lambda_c,
            adv: w.lambda_a,
            ctr: w.lambda_t,
            nego: w.lambda_n,
        }
    }

    /// Unit weight on one term, zero elsewhere.
    pub fn only(c: Component) -> Self {
        let mut s = LossScales {
            efn: 0.0,
            cls: 0.0,
            adv: 0.0,
            ctr: 0.0,
            nego: 0.0,
        };
        match c {
            Component::Efn => s.efn = 1.0,
            Component::Cls => s.cls = 1.0,
            Component::Adv => s.adv = 1.0,
            Component::Ctr => s.ctr = 1.0,
            Component::Nego => s.nego = 1.0,
        }
        s
    }
}

/// Parameter gradients of all nine networks, indexed by [`NetId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub nets: Vec<NetGrads>,
}

impl ModelGrads {
    pub fn get(&self, id: NetId) -> &NetGrads {
        &self.nets[id.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(NetGrads::is_finite)
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub grads: ModelGrads,
    /// Real posts used as contrastive anchors.
    pub anchors: usize,
}

impl ModelState {
    /// Loss values and parameter gradients of `scales`-weighted terms on one
    /// batch. Discriminator gradients reach the encoders reversed and scaled
    /// by the configured reversal coefficient; everything else flows
    /// unchanged.
    pub fn loss_and_grads(&self, batch: &TrainBatch, weights: &LossWeights, scales: &LossScales) -> Result<StepOutput> {
        weights.validate()?;
        let n = batch.len();
        if batch.domains.len() != n || batch.similarity.len() != n || batch.text.nrows() != n || batch.visual.nrows() != n {
            return Err(Error::dim("training batch rows", n, batch.text.nrows()));
        }
        if let Some(&d) = batch.domains.iter().find(|&&d| d >= self.domains()) {
            return Err(Error::InvalidInput(format!("domain label {d} outside 0..{}", self.domains())));
        }
        let mut tapes: Vec<GradTape> = self.nets().iter().map(GradTape::new).collect();
        let tape = |id: NetId| id.index();

        let e_t = self.net(NetId::TextEncoder).forward_recorded(batch.text.view(), &mut tapes[tape(NetId::TextEncoder)])?;
        let e_v = self.net(NetId::VisualEncoder).forward_recorded(batch.visual.view(), &mut tapes[tape(NetId::VisualEncoder)])?;
        let x_t = self.net(NetId::TextAlign).forward_recorded(e_t.view(), &mut tapes[tape(NetId::TextAlign)])?;
        let x_v = self.net(NetId::VisualAlign).forward_recorded(e_v.view(), &mut tapes[tape(NetId::VisualAlign)])?;
        let x_c = concatenate(Axis(1), &[x_t.view(), x_v.view()]).expect("same rows");
        let lt = self.net(NetId::TextClassifier).forward_recorded(e_t.view(), &mut tapes[tape(NetId::TextClassifier)])?;
        let lv = self.net(NetId::VisualClassifier).forward_recorded(e_v.view(), &mut tapes[tape(NetId::VisualClassifier)])?;
        let lc = self.net(NetId::CrossClassifier).forward_recorded(x_c.view(), &mut tapes[tape(NetId::CrossClassifier)])?;
        let dt = self.net(NetId::TextDiscriminator).forward_recorded(e_t.view(), &mut tapes[tape(NetId::TextDiscriminator)])?;
        let dv = self.net(NetId::VisualDiscriminator).forward_recorded(e_v.view(), &mut tapes[tape(NetId::VisualDiscriminator)])?;

        // fused cross-entropy over labeled rows
        let targets: Vec<Option<usize>> = batch.labels.iter().map(|l| l.map(Label::index)).collect();
        let labeled = targets.iter().flatten().count();
        let mut g_lt = Array2::<f64>::zeros(lt.raw_dim());
        let mut g_lv = Array2::<f64>::zeros(lv.raw_dim());
        let mut g_lc = Array2::<f64>::zeros(lc.raw_dim());
        let mut l_efn = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = |a: &Array2<f64>| a.row(i).to_vec();
            let (nll, g) = fused_nll_grad(&row(&lt), &row(&lv), &row(&lc), t, self.config().fusion)?;
            l_efn += nll;
            let k = scales.efn / labeled as f64;
            for c in 0..2 {
                g_lt[[i, c]] += k * g[0][c];
                g_lv[[i, c]] += k * g[1][c];
                g_lc[[i, c]] += k * g[2][c];
            }
        }
        if labeled > 0 {
            l_efn /= labeled as f64;
        }

        // per-classifier cross-entropy
        let mut l_cls = 0.0;
        for (logits, acc) in [(&lt, &mut g_lt), (&lv, &mut g_lv), (&lc, &mut g_lc)] {
            let (l, g) = cross_entropy(logits.view(), &targets)?;
            l_cls += l;
            acc.scaled_add(scales.cls, &g);
        }

        // negotiation
        let (l_nego, [gn_t, gn_v, gn_c]) = negotiation(lt.view(), lv.view(), lc.view(), &batch.labels)?;
        g_lt.scaled_add(scales.nego, &gn_t);
        g_lv.scaled_add(scales.nego, &gn_v);
        g_lc.scaled_add(scales.nego, &gn_c);

        // domain adversarial
        let dom: Vec<Option<usize>> = batch.domains.iter().map(|&d| Some(d)).collect();
        let (adv_t, gd_t) = cross_entropy(dt.view(), &dom)?;
        let (adv_v, gd_v) = cross_entropy(dv.view(), &dom)?;
        let l_adv = adv_t + adv_v;

        // contrastive alignment
        let neg = negative_weights(&batch.similarity, weights.beta);
        let ctr = contrastive(x_t.view(), x_v.view(), &batch.labels, &neg, weights)?;

        let mut g_xt = ctr.grad_t * scales.ctr;
        let mut g_xv = ctr.grad_v * scales.ctr;
        let g_xc = self.net(NetId::CrossClassifier).backward(&mut tapes[tape(NetId::CrossClassifier)], g_lc.view())?;
        let d = x_t.ncols();
        g_xt += &g_xc.slice(s![.., ..d]);
        g_xv += &g_xc.slice(s![.., d..]);

        let coeff = self.config().grl_coeff;
        let mut g_et = self.net(NetId::TextClassifier).backward(&mut tapes[tape(NetId::TextClassifier)], g_lt.view())?;
        g_et += &self.net(NetId::TextAlign).backward(&mut tapes[tape(NetId::TextAlign)], g_xt.view())?;
        let gd = self.net(NetId::TextDiscriminator).backward(&mut tapes[tape(NetId::TextDiscriminator)], (gd_t * scales.adv).view())?;
        g_et += &grl_backward_batch(&gd, coeff);
        let mut g_ev = self.net(NetId::VisualClassifier).backward(&mut tapes[tape(NetId::VisualClassifier)], g_lv.view())?;
        g_ev += &self.net(NetId::VisualAlign).backward(&mut tapes[tape(NetId::VisualAlign)], g_xv.view())?;
        let gd = self.net(NetId::VisualDiscriminator).backward(&mut tapes[tape(NetId::VisualDiscriminator)], (gd_v * scales.adv).view())?;
        g_ev += &grl_backward_batch(&gd, coeff);
        self.net(NetId::TextEncoder).backward(&mut tapes[tape(NetId::TextEncoder)], g_et.view())?;
        self.net(NetId::VisualEncoder).backward(&mut tapes[tape(NetId::VisualEncoder)], g_ev.view())?;

        let losses = total_loss(l_efn, l_cls, l_adv, ctr.value, l_nego, weights);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {losses:?}")));
        }
        Ok(StepOutput {
            losses,
            grads: ModelGrads {
                nets: tapes.into_iter().map(|t| t.grads).collect(),
            },
            anchors: ctr.anchors,
        })
    }

    /// Applies one optimiser step to every network. Nothing changes if any
    /// gradient is non-finite.
    pub fn apply_grads(&mut self, grads: &ModelGrads) -> Result<()> {
        if grads.nets.len() != 9 {
            return Err(Error::dim("network gradients", 9, grads.nets.len()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient; optimiser step skipped".into()));
        }
        for (i, g) in grads.nets.iter().enumerate() {
            self.optim[i].step(&mut self.nets[i], g)?;
        }
        Ok(())
    }

    /// One optimisation step on the full objective.
    pub fn train_step(&mut self, batch: &TrainBatch, weights: &LossWeights) -> Result<LossBreakdown> {
        let out = self.loss_and_grads(batch, weights, &LossScales::from_weights(weights))?;
        self.apply_grads(&out.grads)?;
        Ok(out.losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mefn::tests::small_model;
    use crate::mefn::{FusionMode, ModelConfig};
    use crate::diffcore::AdamConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let labels = vec![
            Some(Label::Real),
            Some(Label::Fake),
            Some(Label::Real),
            None,
            Some(Label::Real),
            None,
            Some(Label::Fake),
            Some(Label::Real),
        ];
        let mut hv = || {
            let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let similarity = (0..n).map(|_| hv()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        TrainBatch {
            text: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.5..1.5)),
            visual: Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.5..1.5)),
            labels,
            domains: vec![0, 1, 2, 3, 3, 3, 0, 1],
            similarity,
        }
    }

    /// Total value through the public per-sample functions.
    fn objective(m: &ModelState, b: &TrainBatch, w: &LossWeights, s: &LossScales) -> f64 {
        use crate::objectives::{adversarial_loss, classification_loss, contrastive_loss, negotiation_loss};
        let views = m.encode_batch(b.text.view(), b.visual.view()).unwrap();
        let fused = m.predict(&views).unwrap();
        let pr = |l: &Array2<f64>| crate::diffcore::softmax_rows(l.view()).rows().into_iter().map(|r| [r[0], r[1]]).collect::<Vec<_>>();
        let (pt, pv, pc) = (pr(&views.logits_t), pr(&views.logits_v), pr(&views.logits_c));
        let cls = classification_loss(&fused, &pt, &pv, &pc, &b.labels).unwrap();
        let nego = negotiation_loss(&pt, &pv, &pc, &b.labels).unwrap();
        let (dt, dv) = m.discriminate_batch(&views, 1.0).unwrap();
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let adv = adversarial_loss(&rows(&dt), &rows(&dv), &b.domains).unwrap();
        let keep: Vec<usize> = (0..b.len()).filter(|&i| b.labels[i].is_some()).collect();
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

    #[test]
    fn values_agree_with_per_sample_functions() {
        let m = small_model(3);
        let b = batch(1);
        let w = LossWeights::default();
        let out = m.loss_and_grads(&b, &w, &LossScales::from_weights(&w)).unwrap();
        let adv_free = LossScales { adv: 0.0, ..LossScales::from_weights(&w) };
        let reference = objective(&m, &b, &w, &adv_free) + w.lambda_a * out.losses.l_adv;
        assert!((out.losses.total - reference).abs() < 1e-10);
        let adv = objective(&m, &b, &w, &LossScales::only(Component::Adv));
        assert!((out.losses.l_adv - adv).abs() < 1e-10);
    }

    #[test]
    fn spot_check_gradients_against_central_differences() {
        for fusion in [FusionMode::ProductOfExperts, FusionMode::Normalized] {
            let mut m = small_model(11);
            m.set_fusion(fusion);
            let b = batch(2);
            let w = LossWeights::default();
            for comp in [Component::Efn, Component::Cls, Component::Adv, Component::Ctr, Component::Nego] {
                let s = LossScales::only(comp);
                let out = m.loss_and_grads(&b, &w, &s).unwrap();
                for id in [NetId::TextEncoder, NetId::VisualAlign, NetId::CrossClassifier, NetId::TextDiscriminator] {
                    let analytic: Vec<f64> = out.grads.get(id).values().copied().collect();
                    for k in [0usize, 3, 7] {
                        let h = 1e-3f32;
                        let shifted = |sign: f32| {
                            let mut mm = m.clone();
                            let p = mm.net_mut(id).params_mut().nth(k).unwrap();
                            let before = *p;
                            *p = before + sign * h;
                            let real = f64::from(*p - before);
                            (objective(&mm, &b, &w, &s), real)
                        };
                        let (fp, hp) = shifted(1.0);
                        let (fm, hm) = shifted(-1.0);
                        let mut num = (fp - fm) / (hp - hm);
                        let reversed = matches!(id, NetId::TextEncoder) && comp == Component::Adv;
                        if reversed {
                            num *= -m.config().grl_coeff;
                        }
                        let a = analytic[k];
                        assert!(
                            (a - num).abs() <= 2e-4 * (1.0 + a.abs().max(num.abs())),
                            "{fusion:?} {comp:?} {id:?}[{k}]: analytic {a} numeric {num}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reversal_coefficient_scales_encoder_adversarial_gradient() {
        let b = batch(4);
        let w = LossWeights::default();
        let mut m = small_model(5);
        let base = m.loss_and_grads(&b, &w, &LossScales::only(Component::Adv)).unwrap();
        let mut cfg: ModelConfig = m.config().clone();
        cfg.grl_coeff = 0.25;
        m = ModelState::from_nets(cfg, m.nets().clone(), AdamConfig::default()).unwrap();
        let scaled = m.loss_and_grads(&b, &w, &LossScales::only(Component::Adv)).unwrap();
        for (a, c) in base.grads.get(NetId::VisualEncoder).values().zip(scaled.grads.get(NetId::VisualEncoder).values()) {
            assert!((a * 0.25 - c).abs() < 1e-12);
        }
        assert_eq!(base.grads.get(NetId::TextDiscriminator), scaled.grads.get(NetId::TextDiscriminator));
    }

    #[test]
    fn unlabeled_rows_only_feed_the_discriminators() {
        let m = small_model(6);
        let mut b = batch(3);
        for l in &mut b.labels {
            *l = None;
        }
        let w = LossWeights::default();
        let out = m.loss_and_grads(&b, &w, &LossScales::from_weights(&w)).unwrap();
        assert_eq!(out.losses.l_efn, 0.0);
        assert_eq!(out.losses.l_ctr, 0.0);
        assert!(out.grads.get(NetId::CrossClassifier).values().all(|g| *g == 0.0));
        assert!(out.grads.get(NetId::TextDiscriminator).values().any(|g| *g != 0.0));
    }

    #[test]
    fn training_reduces_the_supervised_loss() {
        let mut m = small_model(8);
        let b = batch(5);
        let w = LossWeights::default();
        let first = m.loss_and_grads(&b, &w, &LossScales::from_weights(&w)).unwrap().losses;
        m.reset_optimizer(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        for _ in 0..200 {
            m.train_step(&b, &w).unwrap();
        }
        let last = m.loss_and_grads(&b, &w, &LossScales::from_weights(&w)).unwrap().losses;
        assert!(last.l_efn < first.l_efn * 0.5, "{first:?} -> {last:?}");
        assert_eq!(m.optimizer_steps(), 200);
    }

    #[test]
    fn batch_from_records_uses_hv_when_available() {
        let mut a = crate::mefn::tests::sample("a", [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let mut b = crate::mefn::tests::sample("b", [0.0; 3], [0.0, 1.0, 0.0, 0.0]);
        let tb = TrainBatch::from_records(&[&a, &b], SimilaritySource::Auto).unwrap();
        assert_eq!(tb.similarity[0], a.visual_raw);
        a.hv = Some(vec![0.5, 0.5]);
        b.hv = Some(vec![1.0, 0.0]);
        let tb = TrainBatch::from_records(&[&a, &b], SimilaritySource::Auto).unwrap();
        assert_eq!(tb.similarity[1], vec![1.0, 0.0]);
        b.hv = None;
        assert!(TrainBatch::from_records(&[&a, &b], SimilaritySource::Hv).is_err());
    }
}
