use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Strategy};
use crate::corpus::DomainSet;
use crate::error::Result;
use crate::lus::{estimate_ldm, select_uncertain, LdmTable, LusConfig};
use crate::mdc::{diversity_scores, select_diverse, shallow_features, DiversityScores};
use crate::mefn::ModelState;

/// One round's choice plus the scores behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub ids: Vec<String>,
    /// Candidates handed to the diversity stage, if there was one.
    pub candidates: Vec<String>,
    pub ldm: Option<LdmTable>,
    pub diversity: Option<DiversityScores>,
    /// Fused-prediction entropy per pool id, for the entropy strategy.
    pub entropy: Option<Vec<(String, f64)>>,
}

impl Selection {
    fn plain(ids: Vec<String>) -> Self {
        Selection {
            ids,
            candidates: Vec::new(),
            ldm: None,
            diversity: None,
            entropy: None,
        }
    }
}

/// `count` pool ids drawn uniformly without replacement.
fn random_ids(ds: &DomainSet, count: usize, seed: u64) -> Vec<String> {
    let mut pool: Vec<&str> = ds.unlabeled().iter().map(|r| r.id.as_str()).collect();
    pool.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<String> = pool.choose_multiple(&mut rng, count.min(pool.len())).map(|s| s.to_string()).collect();
    chosen.sort_unstable();
    chosen
}

/// Picks `k` ids from the unlabeled target pool for round `round`. The
/// model is only read.
pub fn select(state: &ModelState, ds: &DomainSet, k: usize, cfg: &RunConfig, round: usize, seed: u64) -> Result<Selection> {
    if k == 0 || ds.n_tu() == 0 {
        return Ok(Selection::plain(Vec::new()));
    }
    let pool = ds.unlabeled();
    let m = cfg.lus.multiplier;
    let lus_cfg = LusConfig { seed: super::config::mix(seed, 1000 + cfg.lus.seed), ..cfg.lus.clone() };
    let diversify = |candidates: Vec<String>, ldm: Option<LdmTable>| -> Result<Selection> {
        let features = shallow_features(state, pool)?;
        let scores = diversity_scores(&candidates, &features)?;
        Ok(Selection {
            ids: select_diverse(&scores, k, cfg.diversity),
            candidates,
            ldm,
            diversity: Some(scores),
            entropy: None,
        })
    };
    log::debug!("round {round}: selecting {k} with {}", cfg.strategy.name());
    match cfg.strategy {
        Strategy::Random => Ok(Selection::plain(random_ids(ds, k, seed))),
        Strategy::Entropy => {
            let probs = state.predict(&state.encode_records(pool)?)?;
            let mut scored: Vec<(String, f64)> = pool
                .iter()
                .zip(probs)
                .map(|(r, p)| {
                    let h = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
                    (r.id.clone(), h)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let ids = scored.iter().take(k).map(|(id, _)| id.clone()).collect();
            Ok(Selection {
                entropy: Some(scored),
                ..Selection::plain(ids)
            })
        }
        Strategy::LusOnly => {
            let table = estimate_ldm(state, pool, &lus_cfg)?;
            let ids = select_uncertain(&table, 1, k);
            Ok(Selection {
                ldm: Some(table),
                ..Selection::plain(ids)
            })
        }
        Strategy::Adose => {
            let table = estimate_ldm(state, pool, &lus_cfg)?;
            let candidates = select_uncertain(&table, m, k);
            diversify(candidates, Some(table))
        }
        Strategy::MdcOnly => diversify(random_ids(ds, m * k, seed), None),
    }
}
