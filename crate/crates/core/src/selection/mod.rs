//! Client selection: utilities, threshold filtering and the per-round
//! selectors (random, utility top-K and budget-constrained).

mod budget;
pub mod knapsack;
mod utility;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub use budget::{BudgetState, SPEND_TOLERANCE};
pub use utility::{
    loss_utility, probing_utility, statistical_utility, threshold_filter, ClientUtility,
    UtilitySource,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    pub budget_spent: f64,
    pub fallback_fill_count: usize,
}

impl SelectionDecision {
    fn unbudgeted(round: usize, mut selected: Vec<usize>) -> Self {
        selected.sort_unstable();
        SelectionDecision {
            round,
            selected,
            budget_spent: 0.0,
            fallback_fill_count: 0,
        }
    }
}

/// Random stream for the selection step of `round` in a run seeded with `seed`.
pub fn selection_rng(seed: u64, round: usize) -> ChaCha8Rng {
    rng::rng_for(seed, &[tag::SELECTION, round as u64])
}

/// Uniform sample of `min(k, |pool|)` clients without replacement.
pub fn select_random(pool: &BTreeSet<usize>, k: usize, round: usize, rng: &mut impl Rng) -> SelectionDecision {
    let picked = pool.iter().copied().choose_multiple(rng, k.min(pool.len()));
    SelectionDecision::unbudgeted(round, picked)
}

/// Fills `k` slots one at a time: with probability `1 - epsilon` the
/// highest-utility remaining client (ties to the lower id), otherwise a
/// uniformly random remaining client. Clients without a utility entry count
/// as `+inf` so they are tried first.
pub fn select_topk_utility(
    pool: &BTreeSet<usize>,
    utilities: &BTreeMap<usize, f64>,
    k: usize,
    epsilon: f64,
    round: usize,
    rng: &mut impl Rng,
) -> Result<SelectionDecision> {
    if pool.is_empty() {
        return Err(Error::config("cannot select from an empty pool"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let utility_of = |id: &usize| utilities.get(id).copied().unwrap_or(f64::INFINITY);
    let mut remaining: Vec<usize> = pool.iter().copied().collect();
    // Descending utility, ascending id; stable sort keeps id order on ties.
    remaining.sort_by(|a, b| utility_of(b).total_cmp(&utility_of(a)));
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k && !remaining.is_empty() {
        let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
        let idx = if explore {
            rng.random_range(0..remaining.len())
        } else {
            0
        };
        picked.push(remaining.remove(idx));
    }
    Ok(SelectionDecision::unbudgeted(round, picked))
}

/// Budget-constrained selection: the exact best-utility subset with total
/// cost within `budget` and at most `k` members. Open slots are then filled
/// with zero-cost clients in descending utility order, which cannot add
/// spend.
pub fn select_budgeted(
    pool: &BTreeSet<usize>,
    utilities: &BTreeMap<usize, f64>,
    costs: &BTreeMap<usize, f64>,
    budget: f64,
    k: usize,
    round: usize,
) -> Result<SelectionDecision> {
    if pool.is_empty() {
        return Err(Error::config("cannot select from an empty pool"));
    }
    if k == 0 {
        return Err(Error::config("clients per round must be at least 1"));
    }
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::config(format!("round budget must be non-negative, got {budget}")));
    }
    let mut items = Vec::with_capacity(pool.len());
    for &id in pool {
        let value = *utilities
            .get(&id)
            .ok_or_else(|| Error::config(format!("client {id} has no utility")))?;
        let cost = *costs
            .get(&id)
            .ok_or_else(|| Error::config(format!("client {id} has no cost")))?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::config(format!("client {id} has invalid utility {value}")));
        }
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(Error::config(format!("client {id} has invalid cost {cost}")));
        }
        items.push(knapsack::Item { id, value, cost });
    }

    let best = knapsack::solve(&items, budget, k);
    let mut selected = best.ids;
    let mut free: Vec<&knapsack::Item> = items
        .iter()
        .filter(|it| it.cost == 0.0 && !selected.contains(&it.id))
        .collect();
    free.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.id.cmp(&b.id)));
    let fill: Vec<usize> = free
        .iter()
        .take(k.saturating_sub(selected.len()))
        .map(|it| it.id)
        .collect();
    let fallback_fill_count = fill.len();
    selected.extend(fill);
    selected.sort_unstable();
    let budget_spent = selected.iter().map(|id| costs[id]).sum();
    Ok(SelectionDecision {
        round,
        selected,
        budget_spent,
        fallback_fill_count,
    })
}
