//! Diversity scoring of uncertainty candidates.
//!
//! Each candidate's score is its mean cosine similarity to the whole
//! unlabeled pool, averaged over the three classifiers' first-layer
//! features (the candidate itself included).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::lus::write_lines;
use crate::mefn::ModelState;

/// Which end of the score range is picked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityMode {
    /// Smallest mean similarity: the candidates least like the pool.
    #[default]
    Dissimilar,
    /// Largest mean similarity.
    Literal,
}

/// First-layer activations of the three classifiers, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowFeatures {
    pub ids: Vec<String>,
    pub f_t: Array2<f64>,
    pub f_v: Array2<f64>,
    pub f_c: Array2<f64>,
}

impl ShallowFeatures {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn views(&self) -> [&Array2<f64>; 3] {
        [&self.f_t, &self.f_v, &self.f_c]
    }
}

pub fn shallow_features(state: &ModelState, samples: &[SampleRecord]) -> Result<ShallowFeatures> {
    let v = state.encode_records(samples)?;
    Ok(ShallowFeatures {
        ids: samples.iter().map(|r| r.id.clone()).collect(),
        f_t: v.f_t,
        f_v: v.f_v,
        f_c: v.f_c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScores {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Candidates with at least one all-zero feature vector.
    pub zero_norm: Vec<String>,
}

impl DiversityScores {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|x| x == id).map(|i| self.scores[i])
    }

    pub fn write_csv(&self, path: &Path, chosen: &[String]) -> Result<()> {
        let rows = self.ids.iter().zip(&self.scores).map(|(id, d)| {
            let flag = u8::from(chosen.contains(id));
            format!("{id},{d},{flag}")
        });
        write_lines(path, "id,d_i,chosen", rows)
    }
}

/// Unit rows; zero rows stay zero and are reported.
fn unit_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = m.clone();
    let mut zero = vec![false; m.nrows()];
    for (i, (mut row, &n)) in out.rows_mut().into_iter().zip(&norms).enumerate() {
        if n > 0.0 {
            row /= n;
        } else {
            zero[i] = true;
        }
    }
    (out, zero)
}

/// Mean similarity of each candidate to the pool.
///
/// A zero feature vector has cosine 0 with everything, itself included.
pub fn diversity_scores(candidates: &[String], pool: &ShallowFeatures) -> Result<DiversityScores> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("diversity needs a nonempty pool".into()));
    }
    let index: HashMap<&str, usize> = pool.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows: Vec<usize> = candidates
        .iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| Error::Annotation {
                id: id.clone(),
                reason: "candidate is not in the unlabeled pool".into(),
            })
        })
        .collect::<Result<_>>()?;

    let mut scores = vec![0.0; rows.len()];
    let mut zero_norm = Vec::new();
    for view in pool.views() {
        let (unit, zero) = unit_rows(view);
        // Σ_j cos(i, j) = u_i · Σ_j u_j
        let total: Array1<f64> = unit.sum_axis(Axis(0));
        for (s, &r) in scores.iter_mut().zip(&rows) {
            *s += unit.row(r).dot(&total);
            if zero[r] && !zero_norm.contains(&pool.ids[r]) {
                zero_norm.push(pool.ids[r].clone());
            }
        }
    }
    if !zero_norm.is_empty() {
        log::warn!("{} candidates have zero-norm shallow features", zero_norm.len());
    }
    let scale = 1.0 / (3.0 * pool.len() as f64);
    Ok(DiversityScores {
        ids: candidates.to_vec(),
        scores: scores.into_iter().map(|s| (s * scale).clamp(-1.0, 1.0)).collect(),
        zero_norm,
    })
}

/// The `k` candidates at the chosen end of the score range, ties by
/// ascending id.
pub fn select_diverse(scores: &DiversityScores, k: usize, mode: DiversityMode) -> Vec<String> {
    if k > scores.ids.len() {
        log::warn!("asked for {k} of {} candidates; returning all", scores.ids.len());
    }
    let mut order: Vec<usize> = (0..scores.ids.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = scores.scores[a].total_cmp(&scores.scores[b]);
        let by_score = match mode {
            DiversityMode::Dissimilar => by_score,
            DiversityMode::Literal => by_score.reverse(),
        };
        by_score.then_with(|| scores.ids[a].cmp(&scores.ids[b]))
    });
    order.into_iter().take(k).map(|i| scores.ids[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mefn::tests::{sample, small_model};
    use crate::mefn::{encode, NetId};
    use ndarray::array;
    use proptest::prelude::*;

    fn feats(rows: Vec<[f64; 2]>) -> ShallowFeatures {
        let n = rows.len();
        let m = Array2::from_shape_fn((n, 2), |(i, c)| rows[i][c]);
        ShallowFeatures {
            ids: (0..n).map(|i| format!("p{i}")).collect(),
            f_t: m.clone(),
            f_v: m.clone(),
            f_c: m,
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Pairwise loop over the pool.
    fn brute(candidate: usize, pool: &ShallowFeatures) -> f64 {
        let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 || nb == 0.0 { 0.0 } else { a.dot(&b) / (na * nb) }
        };
        let mut s = 0.0;
        for j in 0..pool.len() {
            for v in pool.views() {
                s += cos(v.row(candidate), v.row(j));
            }
        }
        s / (3.0 * pool.len() as f64)
    }

    #[test]
    fn identical_pool_scores_one() {
        let p = feats(vec![[1.0, 2.0]; 4]);
        let d = diversity_scores(&ids(&["p0", "p3"]), &p).unwrap();
        assert!(d.scores.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_pair_scores_one_half() {
        let p = feats(vec![[1.0, 0.0], [0.0, 3.0]]);
        let d = diversity_scores(&ids(&["p0"]), &p).unwrap();
        assert!((d.scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_are_flagged() {
        let p = feats(vec![[0.0, 0.0], [1.0, 0.0]]);
        let d = diversity_scores(&ids(&["p0", "p1"]), &p).unwrap();
        assert_eq!(d.scores[0], 0.0);
        assert!((d.scores[1] - 0.5).abs() < 1e-12);
        assert_eq!(d.zero_norm, ids(&["p0"]));
    }

    #[test]
    fn unknown_candidate_is_an_error() {
        let p = feats(vec![[1.0, 0.0]]);
        assert!(diversity_scores(&ids(&["nope"]), &p).is_err());
    }

    #[test]
    fn modes_pick_opposite_ends() {
        let d = DiversityScores {
            ids: ids(&["a", "b", "c"]),
            scores: vec![0.9, 0.2, 0.5],
            zero_norm: vec![],
        };
        assert_eq!(select_diverse(&d, 1, DiversityMode::Dissimilar), ids(&["b"]));
        assert_eq!(select_diverse(&d, 1, DiversityMode::Literal), ids(&["a"]));
        let mut all_a = select_diverse(&d, 3, DiversityMode::Dissimilar);
        let mut all_b = select_diverse(&d, 3, DiversityMode::Literal);
        all_a.sort();
        all_b.sort();
        assert_eq!(all_a, all_b);
        assert_eq!(select_diverse(&d, 7, DiversityMode::Literal).len(), 3);
    }

    #[test]
    fn outliers_are_the_dissimilar_choice() {
        let mut rows = vec![[1.0, 0.05]; 20];
        rows.push([-0.2, 1.0]);
        rows.push([-1.0, -0.3]);
        let p = feats(rows);
        let cand = ids(&["p0", "p3", "p20", "p7", "p21"]);
        let d = diversity_scores(&cand, &p).unwrap();
        let mut chosen = select_diverse(&d, 2, DiversityMode::Dissimilar);
        chosen.sort();
        assert_eq!(chosen, ids(&["p20", "p21"]));
    }

    #[test]
    fn features_match_encoding() {
        let m = small_model(2);
        let s = vec![sample("a", [0.1, 0.2, 0.3], [1.0, -1.0, 0.0, 0.5]), sample("b", [1.0, 0.0, -0.3], [0.0, 0.2, 0.9, -0.5])];
        let f = shallow_features(&m, &s).unwrap();
        let v = encode(&m, &s[1]).unwrap();
        assert_eq!(f.f_c.row(1).to_vec(), v.f_c);
        assert_eq!(f.f_t.row(1).to_vec(), v.f_t);
        assert_eq!(f, shallow_features(&m, &s).unwrap());
    }

    #[test]
    fn zero_classifiers_give_bias_activations() {
        let m = small_model(2);
        let mut nets = m.nets().clone();
        for id in [NetId::TextClassifier, NetId::VisualClassifier, NetId::CrossClassifier] {
            let first = nets[id.index()].layer_mut(0);
            first.weight.fill(0.0);
            first.bias.fill(0.5);
        }
        let m = ModelState::from_nets(m.config().clone(), nets, Default::default()).unwrap();
        let f = shallow_features(&m, &[sample("a", [1.0, 2.0, 3.0], [0.0; 4])]).unwrap();
        assert!(f.f_t.iter().chain(f.f_c.iter()).all(|v| *v == 0.5));
    }

    #[test]
    fn csv_dump_marks_chosen() {
        let dir = tempfile::tempdir().unwrap();
        let d = DiversityScores { ids: ids(&["a", "b"]), scores: vec![0.25, 0.5], zero_norm: vec![] };
        let path = dir.path().join("d.csv");
        d.write_csv(&path, &ids(&["b"])).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "id,d_i,chosen\na,0.25,0\nb,0.5,1\n");
    }

    proptest! {
        #[test]
        fn scores_match_pairwise_loop_and_are_scale_and_order_free(
            rows in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 2..10),
            scale in 0.1f64..10.0,
        ) {
            let p = feats(rows.clone());
            let cands: Vec<String> = p.ids.clone();
            let d = diversity_scores(&cands, &p).unwrap();
            for (i, s) in d.scores.iter().enumerate() {
                prop_assert!(s.abs() <= 1.0);
                prop_assert!((s - brute(i, &p)).abs() < 1e-12);
            }
            let scaled = feats(rows.iter().map(|r| [r[0] * scale, r[1] * scale]).collect());
            let ds = diversity_scores(&cands, &scaled).unwrap();
            for (a, b) in d.scores.iter().zip(&ds.scores) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mut rev = p.clone();
            rev.ids.reverse();
            for m in [&mut rev.f_t, &mut rev.f_v, &mut rev.f_c] {
                m.invert_axis(Axis(0));
            }
            let dr = diversity_scores(&cands, &rev).unwrap();
            for (a, b) in d.scores.iter().zip(&dr.scores) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn views_are_averaged() {
        let p = ShallowFeatures {
            ids: ids(&["x", "y"]),
            f_t: array![[1.0, 0.0], [1.0, 0.0]],
            f_v: array![[1.0, 0.0], [0.0, 1.0]],
            f_c: array![[1.0, 0.0], [-1.0, 0.0]],
        };
        let d = diversity_scores(&ids(&["x"]), &p).unwrap();
        assert!((d.scores[0] - (2.0 + 1.0 + 0.0) / 6.0).abs() < 1e-12);
    }
}
