//! Uncertainty selection by least disagreement: how small a random change
//! of the classifier heads is enough to flip a sample's prediction.
//!
//! For each noise level and draw, the final layers are resampled around
//! their trained values and the fraction `ρ` of the pool whose prediction
//! changes is recorded. A sample's score `L_e` is the smallest `ρ` of any
//! hypothesis that flipped it (1 if none did). Small scores mark samples
//! near the decision boundary.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::diffcore::{perturb_last_layer_with, DenseNet, PerturbTarget};
use crate::error::{Error, Result};
use crate::mefn::{fuse_logits, FusionMode, ModelState, NetId};

/// How the noise levels grow with the level index `k = 1..K`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSchedule {
    /// `σ_k² = (k/K)·σ_max²`.
    #[default]
    LinearVariance,
    /// `σ_k = (k/K)·σ_max`.
    LinearStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LusConfig {
    /// Number of noise levels `K`.
    pub levels: usize,
    /// Draws per level `J`.
    pub samples: usize,
    /// Largest standard deviation, in `(0, 1]`.
    pub sigma_max: f64,
    pub schedule: SigmaSchedule,
    /// Candidates handed to the diversity stage per label: `m`.
    pub multiplier: usize,
    pub target: PerturbTarget,
    pub seed: u64,
}

impl Default for LusConfig {
    fn default() -> Self {
        LusConfig {
            levels: 10,
            samples: 10,
            sigma_max: 1.0,
            schedule: SigmaSchedule::LinearVariance,
            multiplier: 2,
            target: PerturbTarget::WeightsAndBias,
            seed: 0,
        }
    }
}

impl LusConfig {
    /// Settings tuned for the smaller, rumour-thread style corpus.
    pub fn pheme() -> Self {
        LusConfig { multiplier: 2, ..Self::default() }
    }

    /// Settings tuned for the larger microblog corpus.
    pub fn weibo() -> Self {
        LusConfig { multiplier: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.samples == 0 || self.multiplier == 0 {
            return Err(Error::InvalidConfig("levels, samples and multiplier must be at least 1".into()));
        }
        if !(self.sigma_max > 0.0 && self.sigma_max <= 1.0) {
            return Err(Error::InvalidConfig(format!("sigma_max {} outside (0, 1]", self.sigma_max)));
        }
        Ok(())
    }

    /// Standard deviations `σ_1 < … < σ_K`.
    pub fn sigmas(&self) -> Vec<f64> {
        let k_max = self.levels as f64;
        (1..=self.levels)
            .map(|k| {
                let frac = k as f64 / k_max;
                match self.schedule {
                    SigmaSchedule::LinearVariance => self.sigma_max * frac.sqrt(),
                    SigmaSchedule::LinearStd => self.sigma_max * frac,
                }
            })
            .collect()
    }
}

/// A classifier over a fixed pool that can be redrawn with a noisy final layer.
pub trait PerturbableClassifier {
    /// Number of pool samples.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unperturbed label of each pool sample.
    fn predict(&self) -> Result<Vec<usize>>;

    /// Labels under one draw of final-layer noise; `None` when the draw
    /// produced non-finite outputs.
    fn predict_perturbed(&self, sigma: f64, target: PerturbTarget, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>>;
}

/// Index of the larger entry; a tie goes to 0.
fn argmax2(p: [f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

/// The fused detector evaluated on a cached pool: only the three classifier
/// heads' final layers are recomputed per hypothesis.
pub struct FusedPool<'a> {
    state: &'a ModelState,
    features: [Array2<f64>; 3],
}

const HEADS: [NetId; 3] = [NetId::TextClassifier, NetId::VisualClassifier, NetId::CrossClassifier];

impl<'a> FusedPool<'a> {
    pub fn new<'r, I>(state: &'a ModelState, pool: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'r SampleRecord>,
    {
        let views = state.encode_records(pool)?;
        Ok(FusedPool {
            state,
            features: [views.f_t, views.f_v, views.f_c],
        })
    }

    fn labels(&self, heads: [&DenseNet; 3], fusion: FusionMode) -> Result<Option<Vec<usize>>> {
        let mut logits = Vec::with_capacity(3);
        for (net, f) in heads.iter().zip(&self.features) {
            logits.push(net.forward_from(1, f.view())?);
        }
        if logits.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let row = |k: usize| logits[k].row(i).to_vec();
            out.push(argmax2(fuse_logits(&row(0), &row(1), &row(2), fusion)?));
        }
        Ok(Some(out))
    }
}

impl PerturbableClassifier for FusedPool<'_> {
    fn len(&self) -> usize {
        self.features[0].nrows()
    }

    fn predict(&self) -> Result<Vec<usize>> {
        let heads = HEADS.map(|id| self.state.net(id));
        self.labels(heads, self.state.config().fusion)?
            .ok_or_else(|| Error::NonFinite("unperturbed classifier logits".into()))
    }

    fn predict_perturbed(&self, sigma: f64, target: PerturbTarget, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>> {
        let noisy = HEADS.map(|id| perturb_last_layer_with(self.state.net(id), sigma, target, rng));
        self.labels([&noisy[0], &noisy[1], &noisy[2]], self.state.config().fusion)
    }
}

/// A single network with an argmax read-out over a fixed input pool.
pub struct NetPool<'a> {
    net: &'a DenseNet,
    /// Activations feeding the final layer.
    penultimate: Array2<f64>,
}

impl<'a> NetPool<'a> {
    pub fn new(net: &'a DenseNet, inputs: &Array2<f64>) -> Result<Self> {
        let penultimate = if net.depth() == 1 {
            if inputs.ncols() != net.in_dim() {
                return Err(Error::dim("pool inputs", net.in_dim(), inputs.ncols()));
            }
            inputs.clone()
        } else {
            net.forward_prefix(net.depth() - 1, inputs.view())?
        };
        Ok(NetPool { net, penultimate })
    }

    fn labels(&self, net: &DenseNet) -> Result<Option<Vec<usize>>> {
        let out = net.forward_from(net.depth() - 1, self.penultimate.view())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some(
            out.rows()
                .into_iter()
                .map(|r| {
                    let mut best = 0;
                    for (c, v) in r.iter().enumerate() {
                        if *v > r[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect(),
        ))
    }
}

impl PerturbableClassifier for NetPool<'_> {
    fn len(&self) -> usize {
        self.penultimate.nrows()
    }

    fn predict(&self) -> Result<Vec<usize>> {
        self.labels(self.net)?
            .ok_or_else(|| Error::NonFinite("unperturbed network outputs".into()))
    }

    fn predict_perturbed(&self, sigma: f64, target: PerturbTarget, rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>> {
        self.labels(&perturb_last_layer_with(self.net, sigma, target, rng))
    }
}

/// Outcome of one sampled hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    /// Level index, 1-based.
    pub level: usize,
    /// Draw index within the level, 1-based.
    pub draw: usize,
    pub sigma: f64,
    /// Fraction of the pool whose label flipped; `None` if discarded.
    pub flip_rate: Option<f64>,
}

/// Least-disagreement scores of a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmTable {
    pub ids: Vec<String>,
    pub l_e: Vec<f64>,
    pub baseline: Vec<usize>,
    pub hypotheses: Vec<HypothesisRecord>,
}

impl LdmTable {
    /// Every score starts at 1.
    pub fn new(ids: Vec<String>, baseline: Vec<usize>) -> Result<Self> {
        if ids.len() != baseline.len() {
            return Err(Error::dim("baseline labels", ids.len(), baseline.len()));
        }
        Ok(LdmTable {
            l_e: vec![1.0; ids.len()],
            ids,
            baseline,
            hypotheses: Vec::new(),
        })
    }

    /// Folds in one hypothesis's labels. Returns its flip rate.
    pub fn update(&mut self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.ids.len() {
            return Err(Error::dim("hypothesis labels", self.ids.len(), labels.len()));
        }
        let flipped: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != self.baseline[i]).collect();
        let rho = flipped.len() as f64 / self.ids.len() as f64;
        for i in flipped {
            self.l_e[i] = self.l_e[i].min(rho);
        }
        Ok(rho)
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|x| x == id).map(|i| self.l_e[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,L_e\n");
        for (id, l) in self.ids.iter().zip(&self.l_e) {
            out.push_str(&format!("{id},{l}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Unperturbed fused label of each pool sample (ties go to label 0).
pub fn baseline_predictions(state: &ModelState, targets: &[SampleRecord]) -> Result<Vec<usize>> {
    FusedPool::new(state, targets)?.predict()
}

/// Scores every unlabeled target sample. The model is only read.
pub fn estimate_ldm(state: &ModelState, targets: &[SampleRecord], cfg: &LusConfig) -> Result<LdmTable> {
    let pool = FusedPool::new(state, targets)?;
    estimate_ldm_with(&pool, targets.iter().map(|r| r.id.clone()).collect(), cfg)
}

/// [`estimate_ldm`] for any perturbable classifier.
pub fn estimate_ldm_with<C: PerturbableClassifier>(clf: &C, ids: Vec<String>, cfg: &LusConfig) -> Result<LdmTable> {
    cfg.validate()?;
    if clf.is_empty() {
        return Err(Error::InvalidInput("uncertainty estimation needs a nonempty pool".into()));
    }
    if ids.len() != clf.len() {
        return Err(Error::dim("pool ids", clf.len(), ids.len()));
    }
    let mut table = LdmTable::new(ids, clf.predict()?)?;
    for (k, sigma) in cfg.sigmas().into_iter().enumerate() {
        for j in 0..cfg.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((k * cfg.samples + j) as u64);
            let flip_rate = match clf.predict_perturbed(sigma, cfg.target, &mut rng)? {
                Some(labels) => Some(table.update(&labels)?),
                None => {
                    log::warn!("hypothesis level {} draw {} gave non-finite logits; discarded", k + 1, j + 1);
                    None
                }
            };
            table.hypotheses.push(HypothesisRecord {
                level: k + 1,
                draw: j + 1,
                sigma,
                flip_rate,
            });
        }
    }
    Ok(table)
}

/// Ids of the `m·k` smallest scores, ties by ascending id.
pub fn select_uncertain(table: &LdmTable, m: usize, k: usize) -> Vec<String> {
    let want = m * k;
    if want > table.ids.len() {
        log::warn!("asked for {want} candidates from a pool of {}; returning all", table.ids.len());
    }
    let mut order: Vec<usize> = (0..table.ids.len()).collect();
    order.sort_by(|&a, &b| table.l_e[a].total_cmp(&table.l_e[b]).then_with(|| table.ids[a].cmp(&table.ids[b])));
    order.into_iter().take(want).map(|i| table.ids[i].clone()).collect()
}

/// Writes `rows` with a header line; used by the per-round dumps.
pub(crate) fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
