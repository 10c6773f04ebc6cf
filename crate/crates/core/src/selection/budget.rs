use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking a round's spend against what was available.
pub const SPEND_TOLERANCE: f64 = 1e-9;

/// Carbon budget spread evenly over the training rounds. Whatever a round
/// leaves unspent carries over; future allotments are never borrowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub total_budget: f64,
    pub per_round_allotment: f64,
    /// Budget `B_t` for the round about to be selected.
    pub available: f64,
    pub spent_cumulative: f64,
}

impl BudgetState {
    pub fn new(total_budget: f64, rounds: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::config("budget needs at least one round"));
        }
        if total_budget.is_nan() || total_budget < 0.0 {
            return Err(Error::config(format!("carbon budget must be non-negative, got {total_budget}")));
        }
        let per_round_allotment = total_budget / rounds as f64;
        Ok(BudgetState {
            total_budget,
            per_round_allotment,
            available: per_round_allotment,
            spent_cumulative: 0.0,
        })
    }

    /// Books `spent` against this round and credits the next round's allotment.
    pub fn update(&self, spent: f64) -> Result<BudgetState> {
        if !spent.is_finite() || spent < 0.0 {
            return Err(Error::Invariant(format!("round spend must be finite and non-negative, got {spent}")));
        }
        if spent > self.available + SPEND_TOLERANCE {
            return Err(Error::Invariant(format!(
                "round spent {spent} g with only {} g available",
                self.available
            )));
        }
        Ok(BudgetState {
            available: (self.available - spent).max(0.0) + self.per_round_allotment,
            spent_cumulative: self.spent_cumulative + spent,
            ..*self
        })
    }
}
