//! Reference implementations used as test oracles. Written independently of
//! the library: plain loops over the flat parameter layout, exhaustive subset
//! enumeration, direct formula evaluation.
#![allow(dead_code)]

use std::collections::BTreeSet;

use fedcarbon::model::Sample;

/// Loss of an MLP given as flat `[W0 (out x in, row-major), b0, W1, b1, ...]`.
pub fn reference_loss(dims: &[usize], params: &[f64], sample: &Sample) -> f64 {
    let mut act = sample.features.clone();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            z[o] = b[o];
            for i in 0..n_in {
                z[o] += w[o * n_in + i] * act[i];
            }
        }
        if l + 2 < dims.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        act = z;
    }
    let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + act.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - act[sample.label]
}

/// Central finite-difference gradient of [`reference_loss`].
pub fn finite_difference_grad(dims: &[usize], params: &[f64], sample: &Sample, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = reference_loss(dims, &p, sample);
            p[i] = orig - h;
            let down = reference_loss(dims, &p, sample);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|B| * sqrt(sum(v^2) / |B|)`, evaluated term by term.
pub fn direct_utility(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let b = values.len() as f64;
    let mut sum_sq = 0.0;
    for v in values {
        sum_sq += v * v;
    }
    b * (sum_sq / b).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub ids: Vec<usize>,
    pub value: f64,
    pub cost: f64,
}

/// Enumerates every subset of at most `k` items with `cost <= budget`.
/// Ties: lower cost, then lexicographically smaller ascending id list.
/// Sums run in ascending id order.
pub fn exhaustive_knapsack(values: &[f64], costs: &[f64], budget: f64, k: usize) -> Best {
    let n = values.len();
    assert!(n <= 20);
    let mut best = Best { ids: vec![], value: 0.0, cost: 0.0 };
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let ids: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let value: f64 = ids.iter().map(|&i| values[i]).sum();
        let cost: f64 = ids.iter().map(|&i| costs[i]).sum();
        if cost > budget {
            continue;
        }
        let better = value > best.value
            || (value == best.value && cost < best.cost)
            || (value == best.value && cost == best.cost && ids < best.ids);
        if better {
            best = Best { ids, value, cost };
        }
    }
    best
}

pub fn retained_by_rule(utilities: &[(usize, f64)], c: f64) -> BTreeSet<usize> {
    let max = utilities.iter().map(|u| u.1).fold(f64::NEG_INFINITY, f64::max);
    utilities.iter().filter(|u| u.1 >= c * max).map(|u| u.0).collect()
}
