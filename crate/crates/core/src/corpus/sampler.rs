use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::DomainSet;
use super::record::SampleRecord;
use crate::error::{Error, Result};

/// One training minibatch.
#[derive(Clone, Debug)]
pub struct Minibatch<'a> {
    /// `per_domain` samples from each source domain, domain by domain.
    pub source: Vec<&'a SampleRecord>,
    /// `per_domain` unlabeled target samples (adversarial loss only).
    pub target_unlabeled: Vec<&'a SampleRecord>,
    /// Up to `per_domain` actively labeled target samples.
    pub target_labeled: Vec<&'a SampleRecord>,
}

impl Minibatch<'_> {
    pub fn len(&self) -> usize {
        self.source.len() + self.target_unlabeled.len() + self.target_labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-domain minibatch sampler.
///
/// An epoch has `ceil(max source size / per_domain)` batches. Every domain
/// is read through a shuffled permutation; a domain that runs out before the
/// epoch ends continues with a fresh permutation, so each sample appears at
/// least once per epoch and exactly once when all source domains have the
/// same size divisible by `per_domain`.
pub struct BatchSampler<'a> {
    ds: &'a DomainSet,
    per_domain: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a DomainSet, per_domain: usize, seed: u64) -> Result<Self> {
        if per_domain == 0 {
            return Err(Error::InvalidConfig("per-domain batch size must be positive".into()));
        }
        for d in 0..ds.source_count() {
            let n = ds.source(d).len();
            if n == 0 {
                return Err(Error::InvalidInput(format!("source domain {d} is empty")));
            }
            if n < per_domain {
                log::warn!("source domain {d} has {n} samples < {per_domain}; sampling with replacement");
            }
        }
        if ds.n_tu() == 0 {
            log::warn!("unlabeled target pool is empty; batches carry no target slice");
        } else if ds.n_tu() < per_domain {
            log::warn!("unlabeled target pool has {} samples < {per_domain}; sampling with replacement", ds.n_tu());
        }
        Ok(BatchSampler {
            ds,
            per_domain,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        let max = (0..self.ds.source_count()).map(|d| self.ds.source(d).len()).max().unwrap_or(0);
        max.div_ceil(self.per_domain)
    }

    /// Draws the next epoch's batches.
    pub fn epoch(&mut self) -> Vec<Minibatch<'a>> {
        let n_batches = self.batches_per_epoch();
        let p = self.per_domain;
        let ds = self.ds;
        let per_source: Vec<Vec<usize>> = (0..ds.source_count())
            .map(|d| index_stream(ds.source(d).len(), n_batches * p, &mut self.rng))
            .collect();
        let target_u = index_stream(ds.n_tu(), n_batches * p, &mut self.rng);
        let labeled = ds.labeled();
        let target_l = if labeled.len() > p {
            index_stream(labeled.len(), n_batches * p, &mut self.rng)
        } else {
            Vec::new()
        };

        (0..n_batches)
            .map(|b| {
                let window = b * p..(b + 1) * p;
                let source = per_source
                    .iter()
                    .enumerate()
                    .flat_map(|(d, idx)| idx[window.clone()].iter().map(move |&i| &ds.source(d)[i]))
                    .collect();
                let target_unlabeled = if target_u.is_empty() {
                    Vec::new()
                } else {
                    target_u[window.clone()].iter().map(|&i| &ds.unlabeled()[i]).collect()
                };
                let target_labeled = if labeled.len() > p {
                    target_l[window].iter().map(|&i| &labeled[i]).collect()
                } else {
                    labeled.iter().collect()
                };
                Minibatch {
                    source,
                    target_unlabeled,
                    target_labeled,
                }
            })
            .collect()
    }
}

/// Concatenated fresh permutations of `0..n`, truncated to `len`.
fn index_stream(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(len + n);
    while out.len() < len {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(len);
    out
}
