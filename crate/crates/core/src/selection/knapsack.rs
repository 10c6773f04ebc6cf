//! Exact 0/1 knapsack with a cardinality limit, solved by depth-first branch
//! and bound.
//!
//! Among all optimal subsets the solver returns the one with the lowest total
//! cost, and among those the lexicographically smallest ascending id list.
//! Totals used for comparison are always summed in ascending id order so that
//! the result does not depend on search order.

use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub id: usize,
    pub value: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Chosen ids in ascending order.
    pub ids: Vec<usize>,
    pub value: f64,
    pub cost: f64,
}

impl Solution {
    fn empty() -> Self {
        Solution {
            ids: Vec::new(),
            value: 0.0,
            cost: 0.0,
        }
    }

    /// `Less` means `self` is the better solution.
    pub fn rank(&self, other: &Solution) -> Ordering {
        other
            .value
            .total_cmp(&self.value)
            .then(self.cost.total_cmp(&other.cost))
            .then_with(|| self.ids.cmp(&other.ids))
    }
}

/// Builds a [`Solution`] from ids, summing value and cost in ascending id
/// order.
pub fn canonical_solution(items: &[Item], mut ids: Vec<usize>) -> Solution {
    ids.sort_unstable();
    let mut value = 0.0;
    let mut cost = 0.0;
    for id in &ids {
        let item = items.iter().find(|it| it.id == *id).expect("id from item list");
        value += item.value;
        cost += item.cost;
    }
    Solution { ids, value, cost }
}

struct Search<'a> {
    /// Candidate items sorted by value density, best first.
    items: Vec<Item>,
    all: &'a [Item],
    capacity: f64,
    max_items: usize,
    chosen: Vec<usize>,
    best: Solution,
    nodes: u64,
}

impl Search<'_> {
    fn tolerance(&self) -> f64 {
        1e-9 * self.best.value.abs().max(1.0)
    }

    /// Upper bound on the value reachable from `next` onward: the tighter of
    /// the fractional (LP) knapsack bound and the sum of the best
    /// `slots` remaining values.
    fn bound(&self, next: usize, value: f64, room: f64, slots: usize) -> f64 {
        let mut frac = value;
        let mut left = room;
        for it in &self.items[next..] {
            if it.cost <= left {
                frac += it.value;
                left -= it.cost;
            } else {
                frac += it.value * left / it.cost;
                break;
            }
        }

        let mut top: Vec<f64> = self.items[next..]
            .iter()
            .filter(|it| it.cost <= room)
            .map(|it| it.value)
            .collect();
        let card = if top.len() > slots {
            top.select_nth_unstable_by(slots, |a, b| b.total_cmp(a));
            value + top[..slots].iter().sum::<f64>()
        } else {
            value + top.iter().sum::<f64>()
        };
        frac.min(card)
    }

    fn visit(&mut self, next: usize, value: f64, cost: f64) {
        self.nodes += 1;
        let slots = self.max_items - self.chosen.len();
        if next == self.items.len() || slots == 0 {
            let candidate = canonical_solution(self.all, self.chosen.clone());
            if candidate.rank(&self.best) == Ordering::Less {
                self.best = candidate;
            }
            return;
        }
        let room = self.capacity - cost;
        if self.bound(next, value, room, slots) < self.best.value - self.tolerance() {
            return;
        }
        let item = self.items[next];
        if item.cost <= room {
            self.chosen.push(item.id);
            self.visit(next + 1, value + item.value, cost + item.cost);
            self.chosen.pop();
        }
        self.visit(next + 1, value, cost);
    }
}

/// Maximises total value subject to `sum(cost) <= capacity` and at most
/// `max_items` items. Items with zero value never improve the objective and
/// are left out.
///
/// Values and costs must be finite and non-negative.
pub fn solve(items: &[Item], capacity: f64, max_items: usize) -> Solution {
    let mut candidates: Vec<Item> = items
        .iter()
        .copied()
        .filter(|it| it.value > 0.0 && it.cost <= capacity)
        .collect();
    if candidates.is_empty() || max_items == 0 {
        return Solution::empty();
    }
    // Density order, free items first; ties on higher value then lower id.
    candidates.sort_by(|a, b| {
        let da = if a.cost == 0.0 { f64::INFINITY } else { a.value / a.cost };
        let db = if b.cost == 0.0 { f64::INFINITY } else { b.value / b.cost };
        db.total_cmp(&da)
            .then(b.value.total_cmp(&a.value))
            .then(a.id.cmp(&b.id))
    });

    let mut search = Search {
        items: candidates,
        all: items,
        capacity,
        max_items,
        chosen: Vec::with_capacity(max_items),
        best: Solution::empty(),
        nodes: 0,
    };
    // A greedy incumbent makes the first bounds useful.
    let mut greedy = Vec::new();
    let mut spent = 0.0;
    for it in &search.items {
        if greedy.len() < max_items && spent + it.cost <= capacity {
            greedy.push(it.id);
            spent += it.cost;
        }
    }
    search.best = canonical_solution(items, greedy);
    search.visit(0, 0.0, 0.0);
    search.best
}
