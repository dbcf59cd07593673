//! Synthetic multi-domain, two-view benchmark.
//!
//! Each item belongs to one of `clusters` semantic topics. A real item draws
//! its text and image from the same topic prototype. A fake item follows one
//! of three deception patterns:
//!
//! * text anomaly: the text is pushed along a "false content" direction,
//! * image anomaly: the image is pushed along an image anomaly direction,
//! * mismatch: text and image come from two different topics.
//!
//! Every domain adds its own mean offset to both views. The target domain can
//! additionally rotate and rescale the anomaly directions, which is a concept
//! shift that source labels alone cannot resolve.
//!
//! `hv` is a softmax over negative squared distances between the image
//! content (the image minus its domain offset) and the topic prototypes,
//! standing in for a backbone classifier's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dims, DomainSet};
use super::record::{Label, SampleRecord};
use crate::diffcore::softmax;
use crate::error::{Error, Result};

/// Fractions of fake items realised by each deception pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternMix {
    pub text_anomaly: f64,
    pub image_anomaly: f64,
    pub mismatch: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        PatternMix {
            text_anomaly: 1.0 / 3.0,
            image_anomaly: 1.0 / 3.0,
            mismatch: 1.0 / 3.0,
        }
    }
}

impl PatternMix {
    fn validate(&self) -> Result<()> {
        let parts = [self.text_anomaly, self.image_anomaly, self.mismatch];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("pattern mix {parts:?} must be fractions summing to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Genuine,
    TextAnomaly,
    ImageAnomaly,
    Mismatch,
}

/// Generator parameters. Every field has a default, so `{}` is a valid spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub name: String,
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Number of semantic topics; also the width of `hv`.
    pub clusters: usize,
    pub source_domains: usize,
    /// Samples per source domain.
    pub source_samples: usize,
    /// Samples in the target domain (before any test split).
    pub target_samples: usize,
    /// Probability of the fake class, per domain (sources first, target last).
    /// A single value applies to every domain.
    pub fake_priors: Vec<f64>,
    /// Norm of each domain's mean offset, per view.
    pub domain_shift: f64,
    /// Norm of the topic prototypes.
    pub cluster_scale: f64,
    /// Norm of the anomaly offset applied to fake views.
    pub anomaly_strength: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Rotation (radians) of the target's anomaly directions away from the
    /// sources'.
    pub target_anomaly_rotation: f64,
    /// Scale of the target's anomaly offset relative to `anomaly_strength`.
    pub target_anomaly_scale: f64,
    pub pattern_mix: PatternMix,
    /// Pattern mix in the target domain; defaults to `pattern_mix`.
    pub target_pattern_mix: Option<PatternMix>,
    pub hv_temperature: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synthetic".into(),
            text_dim: 16,
            visual_dim: 16,
            clusters: 6,
            source_domains: 3,
            source_samples: 300,
            target_samples: 715,
            fake_priors: vec![0.5],
            domain_shift: 1.5,
            cluster_scale: 3.0,
            anomaly_strength: 2.0,
            noise: 0.5,
            target_anomaly_rotation: 0.0,
            target_anomaly_scale: 1.0,
            pattern_mix: PatternMix::default(),
            target_pattern_mix: None,
            hv_temperature: 4.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.text_dim == 0 || self.visual_dim == 0 {
            return bad("embedding dims must be positive".into());
        }
        if self.clusters < 2 {
            return bad("at least two topics are needed".into());
        }
        if self.source_domains == 0 || self.source_samples == 0 || self.target_samples == 0 {
            return bad("every domain needs samples".into());
        }
        if !(self.noise > 0.0) || !(self.hv_temperature > 0.0) {
            return bad("noise and hv temperature must be positive".into());
        }
        let domains = self.source_domains + 1;
        if self.fake_priors.len() != 1 && self.fake_priors.len() != domains {
            return bad(format!("fake_priors needs 1 or {domains} entries"));
        }
        if self.fake_priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("fake priors must lie in [0, 1]".into());
        }
        for v in [
            self.domain_shift,
            self.cluster_scale,
            self.anomaly_strength,
            self.target_anomaly_rotation,
            self.target_anomaly_scale,
        ] {
            if !v.is_finite() {
                return bad("non-finite generator parameter".into());
            }
        }
        self.pattern_mix.validate()?;
        if let Some(m) = &self.target_pattern_mix {
            m.validate()?;
        }
        Ok(())
    }

    fn prior(&self, domain: usize) -> f64 {
        if self.fake_priors.len() == 1 {
            self.fake_priors[0]
        } else {
            self.fake_priors[domain]
        }
    }
}

/// Generative parameters behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub text_prototypes: Vec<Vec<f64>>,
    pub visual_prototypes: Vec<Vec<f64>>,
    /// Per domain (target last).
    pub text_shift: Vec<Vec<f64>>,
    pub visual_shift: Vec<Vec<f64>>,
    /// Per domain anomaly offsets, already scaled.
    pub text_anomaly: Vec<Vec<f64>>,
    pub visual_anomaly: Vec<Vec<f64>>,
    pub noise: f64,
    /// Per record id: (topic of the text, topic of the image, pattern).
    pub provenance: Vec<(String, usize, usize, Pattern)>,
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<DomainSet> {
    synth_generate_with_truth(spec, seed).map(|(ds, _)| ds)
}

pub fn synth_generate_with_truth(spec: &SynthSpec, seed: u64) -> Result<(DomainSet, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = spec.source_domains + 1;
    let c = spec.clusters;

    let text_prototypes: Vec<_> = (0..c).map(|_| scaled_direction(spec.text_dim, spec.cluster_scale, &mut rng)).collect();
    let visual_prototypes: Vec<_> =
        (0..c).map(|_| scaled_direction(spec.visual_dim, spec.cluster_scale, &mut rng)).collect();
    let text_shift: Vec<_> = (0..domains).map(|_| scaled_direction(spec.text_dim, spec.domain_shift, &mut rng)).collect();
    let visual_shift: Vec<_> =
        (0..domains).map(|_| scaled_direction(spec.visual_dim, spec.domain_shift, &mut rng)).collect();

    let base_t = scaled_direction(spec.text_dim, 1.0, &mut rng);
    let base_v = scaled_direction(spec.visual_dim, 1.0, &mut rng);
    let perp_t = orthogonal_direction(&base_t, &mut rng);
    let perp_v = orthogonal_direction(&base_v, &mut rng);
    let target_dir = |base: &[f64], perp: &[f64]| -> Vec<f64> {
        let (s, co) = spec.target_anomaly_rotation.sin_cos();
        let scale = spec.anomaly_strength * spec.target_anomaly_scale;
        base.iter().zip(perp).map(|(b, p)| scale * (co * b + s * p)).collect()
    };
    let mut text_anomaly: Vec<Vec<f64>> = vec![base_t.iter().map(|x| x * spec.anomaly_strength).collect(); domains - 1];
    text_anomaly.push(target_dir(&base_t, &perp_t));
    let mut visual_anomaly: Vec<Vec<f64>> = vec![base_v.iter().map(|x| x * spec.anomaly_strength).collect(); domains - 1];
    visual_anomaly.push(target_dir(&base_v, &perp_v));

    let mut provenance = Vec::new();
    let mut per_domain = Vec::with_capacity(domains);
    for d in 0..domains {
        let is_target = d == spec.source_domains;
        let n = if is_target { spec.target_samples } else { spec.source_samples };
        let name = if is_target { "target".to_string() } else { format!("source{d}") };
        let mix = if is_target {
            spec.target_pattern_mix.unwrap_or(spec.pattern_mix)
        } else {
            spec.pattern_mix
        };
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let fake = rng.random::<f64>() < spec.prior(d);
            let pattern = if !fake {
                Pattern::Genuine
            } else {
                let u: f64 = rng.random();
                if u < mix.text_anomaly {
                    Pattern::TextAnomaly
                } else if u < mix.text_anomaly + mix.image_anomaly {
                    Pattern::ImageAnomaly
                } else {
                    Pattern::Mismatch
                }
            };
            let topic_t = rng.random_range(0..c);
            let topic_v = if pattern == Pattern::Mismatch {
                (topic_t + rng.random_range(1..c)) % c
            } else {
                topic_t
            };
            let mut text = text_prototypes[topic_t].clone();
            let mut content_v = visual_prototypes[topic_v].clone();
            if pattern == Pattern::TextAnomaly {
                add(&mut text, &text_anomaly[d]);
            }
            if pattern == Pattern::ImageAnomaly {
                add(&mut content_v, &visual_anomaly[d]);
            }
            add_noise(&mut text, spec.noise, &mut rng);
            add_noise(&mut content_v, spec.noise, &mut rng);
            add(&mut text, &text_shift[d]);
            let logits: Vec<f64> = visual_prototypes
                .iter()
                .map(|p| -sq_dist(&content_v, p) / spec.hv_temperature)
                .collect();
            let hv = softmax(&logits);
            let mut visual = content_v;
            add(&mut visual, &visual_shift[d]);

            let id = format!("{name}-{i:05}");
            provenance.push((id.clone(), topic_t, topic_v, pattern));
            records.push(SampleRecord {
                id,
                domain_id: d,
                text_raw: text,
                visual_raw: visual,
                hv: Some(hv),
                label: Some(if fake { Label::Fake } else { Label::Real }),
            });
        }
        per_domain.push((name, records));
    }

    let names = per_domain.iter().map(|(n, _)| n.clone()).collect();
    let mut records: Vec<Vec<SampleRecord>> = per_domain.into_iter().map(|(_, r)| r).collect();
    let target = records.pop().expect("target domain");
    let dims = Dims {
        text: spec.text_dim,
        visual: spec.visual_dim,
        hv: Some(c),
    };
    let ds = DomainSet::new(spec.name.clone(), dims, names, records, target)?;
    let truth = SynthTruth {
        text_prototypes,
        visual_prototypes,
        text_shift,
        visual_shift,
        text_anomaly,
        visual_anomaly,
        noise: spec.noise,
        provenance,
    };
    Ok((ds, truth))
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled_direction(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = gaussian(dim, rng);
    let n = norm(&g).max(1e-12);
    g.into_iter().map(|x| scale * x / n).collect()
}

/// Unit vector orthogonal to the unit vector `base` (zero when `dim == 1`).
fn orthogonal_direction(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = gaussian(base.len(), rng);
    let proj: f64 = g.iter().zip(base).map(|(a, b)| a * b).sum();
    let r: Vec<f64> = g.iter().zip(base).map(|(a, b)| a - proj * b).collect();
    let n = norm(&r);
    if n < 1e-12 {
        vec![0.0; base.len()]
    } else {
        r.into_iter().map(|x| x / n).collect()
    }
}

fn add(v: &mut [f64], other: &[f64]) {
    v.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

fn add_noise(v: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += std * z;
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
