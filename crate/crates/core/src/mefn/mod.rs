//! Two-view detector: per-view encoders, alignment heads, domain
//! discriminators behind gradient reversal, three expert classifiers and
//! their fused prediction.

mod card;
mod fusion;
mod train;

pub use card::{config_hash, load_model, save_model, ModelCard};
pub use fusion::{fuse_logits, FusionMode};
pub use train::{Component, LossScales, ModelGrads, SimilaritySource, StepOutput, TrainBatch};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::diffcore::{log_softmax, Activation, AdamConfig, AdamState, DenseNet};
use crate::error::{Error, Result};
use crate::objectives::ProbPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the encoded views and alignment features.
    pub d: usize,
    pub encoder_hidden: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub fusion: FusionMode,
    /// Gradient reversal strength between discriminators and encoders.
    pub grl_coeff: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            encoder_hidden: 256,
            classifier_hidden: 128,
            discriminator_hidden: 128,
            fusion: FusionMode::ProductOfExperts,
            grl_coeff: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d, self.encoder_hidden, self.classifier_hidden, self.discriminator_hidden].contains(&0) {
            return Err(Error::InvalidConfig("model widths must be positive".into()));
        }
        if !(self.grl_coeff.is_finite() && self.grl_coeff >= 0.0) {
            return Err(Error::InvalidConfig(format!("grl coefficient {} must be >= 0", self.grl_coeff)));
        }
        Ok(())
    }
}

/// The nine networks, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetId {
    TextEncoder,
    VisualEncoder,
    TextAlign,
    VisualAlign,
    TextDiscriminator,
    VisualDiscriminator,
    TextClassifier,
    VisualClassifier,
    CrossClassifier,
}

impl NetId {
    pub const ALL: [NetId; 9] = [
        NetId::TextEncoder,
        NetId::VisualEncoder,
        NetId::TextAlign,
        NetId::VisualAlign,
        NetId::TextDiscriminator,
        NetId::VisualDiscriminator,
        NetId::TextClassifier,
        NetId::VisualClassifier,
        NetId::CrossClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetId::TextEncoder => "text_encoder",
            NetId::VisualEncoder => "visual_encoder",
            NetId::TextAlign => "text_align",
            NetId::VisualAlign => "visual_align",
            NetId::TextDiscriminator => "text_discriminator",
            NetId::VisualDiscriminator => "visual_discriminator",
            NetId::TextClassifier => "text_classifier",
            NetId::VisualClassifier => "visual_classifier",
            NetId::CrossClassifier => "cross_classifier",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// All trainable state of the detector.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    text_dim: usize,
    visual_dim: usize,
    domains: usize,
    nets: [DenseNet; 9],
    optim: Vec<AdamState>,
}

impl ModelState {
    /// Freshly initialised model for `domains = M + 1` domain labels.
    pub fn new(config: ModelConfig, text_dim: usize, visual_dim: usize, domains: usize, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if text_dim == 0 || visual_dim == 0 || domains < 2 {
            return Err(Error::InvalidConfig(format!(
                "need positive view widths and at least two domains, got {text_dim}, {visual_dim}, {domains}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, hid, ch, dh) = (config.d, config.encoder_hidden, config.classifier_hidden, config.discriminator_hidden);
        let relu = Activation::Relu;
        let id = Activation::Identity;
        let nets = [
            DenseNet::mlp(&[text_dim, hid, d], relu, relu, &mut rng)?,
            DenseNet::mlp(&[visual_dim, hid, d], relu, relu, &mut rng)?,
            DenseNet::mlp(&[d, d], id, id, &mut rng)?,
            DenseNet::mlp(&[d, d], id, id, &mut rng)?,
            DenseNet::mlp(&[d, dh, domains], relu, id, &mut rng)?,
            DenseNet::mlp(&[d, dh, domains], relu, id, &mut rng)?,
            DenseNet::mlp(&[d, ch, 2], relu, id, &mut rng)?,
            DenseNet::mlp(&[d, ch, 2], relu, id, &mut rng)?,
            DenseNet::mlp(&[2 * d, ch, 2], relu, id, &mut rng)?,
        ];
        Self::from_nets(config, nets, adam)
    }

    /// Assembles a model from existing networks, checking that they fit together.
    pub fn from_nets(config: ModelConfig, nets: [DenseNet; 9], adam: AdamConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let text_dim = nets[0].in_dim();
        let visual_dim = nets[1].in_dim();
        let domains = nets[4].out_dim();
        let expect = |id: NetId, input: usize, output: usize, depth: Option<usize>| -> Result<()> {
            let net = &nets[id.index()];
            if net.in_dim() != input || net.out_dim() != output {
                return Err(Error::InvalidConfig(format!(
                    "{} maps {}→{}, expected {input}→{output}",
                    id.name(),
                    net.in_dim(),
                    net.out_dim()
                )));
            }
            if depth.is_some_and(|k| net.depth() != k) {
                return Err(Error::InvalidConfig(format!("{} must have exactly two layers", id.name())));
            }
            Ok(())
        };
        expect(NetId::TextEncoder, text_dim, d, None)?;
        expect(NetId::VisualEncoder, visual_dim, d, None)?;
        expect(NetId::TextAlign, d, d, None)?;
        expect(NetId::VisualAlign, d, d, None)?;
        expect(NetId::TextDiscriminator, d, domains, None)?;
        expect(NetId::VisualDiscriminator, d, domains, None)?;
        expect(NetId::TextClassifier, d, 2, Some(2))?;
        expect(NetId::VisualClassifier, d, 2, Some(2))?;
        expect(NetId::CrossClassifier, 2 * d, 2, Some(2))?;
        let optim = nets.iter().map(|n| AdamState::new(n, adam)).collect();
        Ok(ModelState {
            config,
            text_dim,
            visual_dim,
            domains,
            nets,
            optim,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    /// Number of domain labels (`M + 1`).
    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn net(&self, id: NetId) -> &DenseNet {
        &self.nets[id.index()]
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut DenseNet {
        &mut self.nets[id.index()]
    }

    pub fn nets(&self) -> &[DenseNet; 9] {
        &self.nets
    }

    pub fn set_fusion(&mut self, mode: FusionMode) {
        self.config.fusion = mode;
    }

    /// Restarts the optimiser moments (used when the model is re-initialised
    /// or a new training phase starts from scratch).
    pub fn reset_optimizer(&mut self, adam: AdamConfig) {
        self.optim = self.nets.iter().map(|n| AdamState::new(n, adam)).collect();
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optim.first().map_or(0, AdamState::step_count)
    }

    /// All views for a batch of raw inputs.
    pub fn encode_batch(&self, text: ArrayView2<f64>, visual: ArrayView2<f64>) -> Result<BatchViews> {
        if text.nrows() != visual.nrows() {
            return Err(Error::dim("visual rows", text.nrows(), visual.nrows()));
        }
        if text.ncols() != self.text_dim {
            return Err(Error::dim("text features", self.text_dim, text.ncols()));
        }
        if visual.ncols() != self.visual_dim {
            return Err(Error::dim("visual features", self.visual_dim, visual.ncols()));
        }
        let e_t = self.net(NetId::TextEncoder).forward_batch(text)?;
        let e_v = self.net(NetId::VisualEncoder).forward_batch(visual)?;
        let x_t = self.net(NetId::TextAlign).forward_batch(e_t.view())?;
        let x_v = self.net(NetId::VisualAlign).forward_batch(e_v.view())?;
        let x_c = concatenate(Axis(1), &[x_t.view(), x_v.view()]).expect("same row count");
        let head = |id: NetId, input: ArrayView2<f64>| -> Result<(Array2<f64>, Array2<f64>)> {
            let net = self.net(id);
            let f = net.forward_prefix(1, input)?;
            let logits = net.forward_from(1, f.view())?;
            Ok((f, logits))
        };
        let (f_t, logits_t) = head(NetId::TextClassifier, e_t.view())?;
        let (f_v, logits_v) = head(NetId::VisualClassifier, e_v.view())?;
        let (f_c, logits_c) = head(NetId::CrossClassifier, x_c.view())?;
        Ok(BatchViews {
            e_t,
            e_v,
            x_t,
            x_v,
            f_t,
            f_v,
            f_c,
            logits_t,
            logits_v,
            logits_c,
        })
    }

    /// Views of a list of records, in order.
    pub fn encode_records<'a, I>(&self, records: I) -> Result<BatchViews>
    where
        I: IntoIterator<Item = &'a SampleRecord>,
    {
        let (text, visual) = stack_inputs(records, self.text_dim, self.visual_dim)?;
        self.encode_batch(text.view(), visual.view())
    }

    /// Fused probabilities for every row of a batch.
    pub fn predict(&self, views: &BatchViews) -> Result<Vec<ProbPair>> {
        (0..views.len())
            .map(|i| {
                let row = |a: &Array2<f64>| a.row(i).to_vec();
                fuse_logits(&row(&views.logits_t), &row(&views.logits_v), &row(&views.logits_c), self.config.fusion)
            })
            .collect()
    }

    /// Domain log-probabilities for a batch's text and visual encodings.
    pub fn discriminate_batch(&self, views: &BatchViews, coeff: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        let _ = coeff;
        let lp = |id: NetId, e: &Array2<f64>| -> Result<Array2<f64>> {
            let mut z = self.net(id).forward_batch(e.view())?;
            for mut row in z.rows_mut() {
                let l = log_softmax(&row.to_vec());
                row.iter_mut().zip(l).for_each(|(r, v)| *r = v);
            }
            Ok(z)
        };
        Ok((lp(NetId::TextDiscriminator, &views.e_t)?, lp(NetId::VisualDiscriminator, &views.e_v)?))
    }
}

/// Every intermediate of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedViews {
    pub e_t: Vec<f64>,
    pub e_v: Vec<f64>,
    pub x_t: Vec<f64>,
    pub x_v: Vec<f64>,
    /// First-layer activations of the three classifiers.
    pub f_t: Vec<f64>,
    pub f_v: Vec<f64>,
    pub f_c: Vec<f64>,
    pub logits_t: [f64; 2],
    pub logits_v: [f64; 2],
    pub logits_c: [f64; 2],
}

/// [`EncodedViews`] for a batch, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchViews {
    pub e_t: Array2<f64>,
    pub e_v: Array2<f64>,
    pub x_t: Array2<f64>,
    pub x_v: Array2<f64>,
    pub f_t: Array2<f64>,
    pub f_v: Array2<f64>,
    pub f_c: Array2<f64>,
    pub logits_t: Array2<f64>,
    pub logits_v: Array2<f64>,
    pub logits_c: Array2<f64>,
}

impl BatchViews {
    pub fn len(&self) -> usize {
        self.e_t.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> EncodedViews {
        let v = |a: &Array2<f64>| a.row(i).to_vec();
        let pair = |a: &Array2<f64>| [a[[i, 0]], a[[i, 1]]];
        EncodedViews {
            e_t: v(&self.e_t),
            e_v: v(&self.e_v),
            x_t: v(&self.x_t),
            x_v: v(&self.x_v),
            f_t: v(&self.f_t),
            f_v: v(&self.f_v),
            f_c: v(&self.f_c),
            logits_t: pair(&self.logits_t),
            logits_v: pair(&self.logits_v),
            logits_c: pair(&self.logits_c),
        }
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> BatchViews {
        let c = |a: &Array2<f64>| a.slice(s![range.clone(), ..]).to_owned();
        BatchViews {
            e_t: c(&self.e_t),
            e_v: c(&self.e_v),
            x_t: c(&self.x_t),
            x_v: c(&self.x_v),
            f_t: c(&self.f_t),
            f_v: c(&self.f_v),
            f_c: c(&self.f_c),
            logits_t: c(&self.logits_t),
            logits_v: c(&self.logits_v),
            logits_c: c(&self.logits_c),
        }
    }
}

/// Views of a single sample.
pub fn encode(state: &ModelState, sample: &SampleRecord) -> Result<EncodedViews> {
    Ok(state.encode_records([sample])?.row(0))
}

/// Fused probability pair of one sample.
pub fn fuse_predict(views: &EncodedViews, mode: FusionMode) -> Result<ProbPair> {
    fuse_logits(&views.logits_t, &views.logits_v, &views.logits_c, mode)
}

/// Text and visual domain log-probabilities of one sample. The reversal
/// coefficient only affects gradients, never these values.
pub fn discriminate(state: &ModelState, views: &EncodedViews, coeff: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let _ = coeff;
    let lp = |id: NetId, e: &[f64]| -> Result<Vec<f64>> { Ok(log_softmax(&state.net(id).forward(e)?)) };
    Ok((lp(NetId::TextDiscriminator, &views.e_t)?, lp(NetId::VisualDiscriminator, &views.e_v)?))
}

/// Stacks raw text and visual features of `records` into two matrices.
pub fn stack_inputs<'a, I>(records: I, text_dim: usize, visual_dim: usize) -> Result<(Array2<f64>, Array2<f64>)>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut text = Vec::new();
    let mut visual = Vec::new();
    let mut n = 0;
    for r in records {
        if r.text_raw.len() != text_dim {
            return Err(Error::Record {
                id: r.id.clone(),
                reason: format!("text width {} != {text_dim}", r.text_raw.len()),
            });
        }
        if r.visual_raw.len() != visual_dim {
            return Err(Error::Record {
                id: r.id.clone(),
                reason: format!("visual width {} != {visual_dim}", r.visual_raw.len()),
            });
        }
        text.extend_from_slice(&r.text_raw);
        visual.extend_from_slice(&r.visual_raw);
        n += 1;
    }
    Ok((
        Array2::from_shape_vec((n, text_dim), text).expect("row-major stack"),
        Array2::from_shape_vec((n, visual_dim), visual).expect("row-major stack"),
    ))
}
