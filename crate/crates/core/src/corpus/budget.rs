use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::dataset::DomainSet;
use crate::error::{Error, Result};

/// Labeling budget split into selection rounds.
///
/// `budget = ceil(fraction · N_tu)`. Each round gets `budget / rounds`
/// labels and the final round also takes the remainder, so the rounds always
/// sum to the budget exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budget: usize,
    pub rounds: usize,
    /// Candidate multiplier `m` for the uncertainty stage.
    pub multiplier: usize,
    spent: usize,
    completed_rounds: usize,
}

impl BudgetPlan {
    pub fn new(budget: usize, rounds: usize, multiplier: usize) -> Result<Self> {
        if rounds == 0 || multiplier == 0 {
            return Err(Error::InvalidConfig("rounds and multiplier must be at least 1".into()));
        }
        Ok(BudgetPlan {
            budget,
            rounds,
            multiplier,
            spent: 0,
            completed_rounds: 0,
        })
    }

    /// Budget as a fraction of the unlabeled pool size.
    pub fn from_pool(n_tu: usize, fraction: f64, rounds: usize, multiplier: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("budget fraction {fraction} outside (0, 1]")));
        }
        // Tolerance absorbs representation error such as 0.1 * 30 = 3.0000000000000004.
        let budget = (fraction * n_tu as f64 - 1e-9).ceil().max(0.0) as usize;
        Self::new(budget, rounds, multiplier)
    }

    /// Labels granted in round `round` (0-based).
    pub fn round_size(&self, round: usize) -> usize {
        let base = self.budget / self.rounds;
        if round + 1 == self.rounds {
            base + self.budget % self.rounds
        } else if round < self.rounds {
            base
        } else {
            0
        }
    }

    /// `k` for the round about to be annotated.
    pub fn k(&self) -> usize {
        self.round_size(self.completed_rounds)
    }

    pub fn schedule(&self) -> Vec<usize> {
        (0..self.rounds).map(|r| self.round_size(r)).collect()
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.spent
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed_rounds
    }

    pub fn is_exhausted(&self) -> bool {
        self.completed_rounds >= self.rounds
    }
}

/// Reveals the hidden labels of `ids`, moving them from `T_u` to `T_l`, and
/// charges one round of the budget.
///
/// All checks run before anything is mutated: on error both `ds` and `plan`
/// are left exactly as they were.
pub fn oracle_annotate(ds: &mut DomainSet, ids: &[String], plan: &mut BudgetPlan) -> Result<()> {
    if plan.is_exhausted() || plan.spent + ids.len() > plan.budget {
        return Err(Error::BudgetExhausted {
            budget: plan.budget,
            spent: plan.spent,
            requested: ids.len(),
        });
    }
    let k = plan.k();
    if ids.len() > k {
        return Err(Error::BudgetExhausted {
            budget: k,
            spent: 0,
            requested: ids.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut positions = Vec::with_capacity(ids.len());
    for id in ids {
        let refuse = |reason: &str| Error::Annotation {
            id: id.clone(),
            reason: reason.into(),
        };
        if !seen.insert(id.as_str()) {
            return Err(refuse("requested twice"));
        }
        if ds.labeled().iter().any(|r| &r.id == id) {
            return Err(refuse("already annotated"));
        }
        let pos = ds
            .unlabeled()
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| refuse("not in the unlabeled target pool"))?;
        if !ds.oracle().holds(id) {
            return Err(refuse("oracle has no label for it"));
        }
        positions.push(pos);
    }

    let mut revealed = Vec::with_capacity(ids.len());
    for id in ids {
        revealed.push(ds.oracle_mut().reveal(id).expect("checked above"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(positions[i]));
    let (unlabeled, labeled) = ds.pools_mut();
    let mut moved = vec![None; ids.len()];
    for i in order {
        let mut r = unlabeled.remove(positions[i]);
        r.label = Some(revealed[i]);
        moved[i] = Some(r);
    }
    labeled.extend(moved.into_iter().map(|r| r.expect("every id moved")));
    plan.spent += ids.len();
    plan.completed_rounds += 1;
    Ok(())
}
