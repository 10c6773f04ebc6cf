//! Synthetic classification data, non-IID client partitioning and feature
//! corruption of designated clients.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng::{self, tag};

/// A client's local data. `corrupted` is ground truth for evaluation only;
/// selection code never looks at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub corrupted: bool,
}

impl ClientDataset {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// Gaussian class clusters in feature space, clipped to the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    /// Per-feature standard deviation of each cluster.
    pub cluster_std: f64,
    /// Cluster means are drawn uniformly from `[mean_low, mean_high]^d`.
    pub mean_low: f64,
    pub mean_high: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            samples: 6000,
            features: 16,
            classes: 10,
            cluster_std: 0.25,
            mean_low: 0.2,
            mean_high: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn new(samples: usize, features: usize, classes: usize) -> Self {
        DatasetSpec {
            samples,
            features,
            classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if self.samples < self.classes {
            return Err(Error::config(format!(
                "{} samples cannot cover {} classes",
                self.samples, self.classes
            )));
        }
        if self.features < 2 {
            return Err(Error::config("dataset needs at least two features"));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::config("cluster_std must be finite and non-negative"));
        }
        if !(0.0 <= self.mean_low && self.mean_low <= self.mean_high && self.mean_high <= 1.0) {
            return Err(Error::config("cluster mean range must lie inside [0, 1]"));
        }
        Ok(())
    }

    /// Class means as generated for `seed`.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::rng_for(seed, &[tag::DATASET, 0]);
        (0..self.classes)
            .map(|_| {
                (0..self.features)
                    .map(|_| rng.random_range(self.mean_low..=self.mean_high))
                    .collect()
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Sample>> {
        self.validate()?;
        let means = self.class_means(seed);
        let mut rng = rng::rng_for(seed, &[tag::DATASET, 1]);
        let noise = Normal::new(0.0, self.cluster_std).map_err(|e| Error::config(e.to_string()))?;
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        Ok(labels
            .into_iter()
            .map(|label| {
                let features = means[label]
                    .iter()
                    .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                Sample { features, label }
            })
            .collect())
    }
}

/// `n` samples in `d` dimensions over `classes` balanced classes, using the
/// default cluster geometry.
pub fn make_dataset(n: usize, d: usize, classes: usize, seed: u64) -> Result<Vec<Sample>> {
    DatasetSpec::new(n, d, classes).generate(seed)
}

fn num_classes(data: &[Sample]) -> usize {
    data.iter().map(|s| s.label).max().map_or(0, |m| m + 1)
}

fn indices_by_class(data: &[Sample]) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes(data)];
    for (i, s) in data.iter().enumerate() {
        by_class[s.label].push(i);
    }
    by_class
}

/// Stratified train/test split. Each class contributes `round(frac * n_c)`
/// samples to the test side; both sides keep the input order.
pub fn split_test(data: &[Sample], frac: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::config(format!("test fraction must lie in (0, 1), got {frac}")));
    }
    let mut rng = rng::rng_for(seed, &[tag::SPLIT]);
    let mut in_test = vec![false; data.len()];
    for mut idx in indices_by_class(data) {
        idx.shuffle(&mut rng);
        let take = (frac * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_test[i] = true;
        }
    }
    let mut train = Vec::with_capacity(data.len());
    let mut test = Vec::new();
    for (s, t) in data.iter().zip(in_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "test fraction {frac} leaves an empty side for {} samples",
            data.len()
        )));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

impl PartitionSpec {
    pub fn validate(&self, total: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("dirichlet alpha must be positive, got {}", self.alpha)));
        }
        if self.num_clients * self.min_samples_per_client.max(1) > total {
            return Err(Error::config(format!(
                "{} samples cannot give {} clients at least {} each",
                total,
                self.num_clients,
                self.min_samples_per_client.max(1)
            )));
        }
        Ok(())
    }
}

fn dirichlet_proportions(rng: &mut impl Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed, which only happens for tiny alpha
        vec![1.0 / k as f64; k]
    }
}

/// Splits `count` items according to `props` with largest-remainder rounding.
fn apportion(count: usize, props: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = props.iter().map(|p| p * count as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(count.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed partition: for every class, client shares are drawn from a
/// symmetric Dirichlet(alpha). Clients left below `min_samples_per_client`
/// are topped up from whichever client is currently largest.
pub fn dirichlet_partition(data: &[Sample], spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    if data.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    spec.validate(data.len())?;
    let k = spec.num_clients;
    let mut rng = rng::rng_for(spec.seed, &[tag::PARTITION]);
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut idx in indices_by_class(data) {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = dirichlet_proportions(&mut rng, spec.alpha, k);
        let mut rest = idx.as_slice();
        for (client, n) in apportion(idx.len(), &props).into_iter().enumerate() {
            let (take, tail) = rest.split_at(n);
            owned[client].extend_from_slice(take);
            rest = tail;
        }
    }

    let min = spec.min_samples_per_client.max(1);
    while let Some(needy) = (0..k).find(|&c| owned[c].len() < min) {
        let donor = (0..k)
            .max_by(|&a, &b| owned[a].len().cmp(&owned[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        if owned[donor].len() <= min {
            return Err(Error::config("minimum client size is infeasible"));
        }
        let moved = owned[donor].pop().expect("donor is non-empty");
        owned[needy].push(moved);
    }

    Ok(owned
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            idx.sort_unstable();
            ClientDataset {
                client_id,
                samples: idx.into_iter().map(|i| data[i].clone()).collect(),
                corrupted: false,
            }
        })
        .collect())
}

/// Adds `N(0, sigma^2)` noise to every feature of the listed clients and clips
/// back to `[0, 1]`. Labels are left alone; other clients are untouched.
pub fn corrupt_clients(
    mut clients: Vec<ClientDataset>,
    noisy_ids: &BTreeSet<usize>,
    sigma: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let noise = Normal::new(0.0, sigma)
        .map_err(|_| Error::config(format!("noise sigma must be finite and non-negative, got {sigma}")))?;
    for id in noisy_ids {
        if !clients.iter().any(|c| c.client_id == *id) {
            return Err(Error::config(format!("noisy client id {id} does not exist")));
        }
    }
    for client in clients.iter_mut().filter(|c| noisy_ids.contains(&c.client_id)) {
        let mut rng = rng::rng_for(seed, &[tag::CORRUPTION, client.client_id as u64]);
        for sample in &mut client.samples {
            for x in &mut sample.features {
                *x = (*x + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        client.corrupted = true;
    }
    Ok(clients)
}

/// Writes `client_id,label,f0..f{d-1}` rows, one per sample.
pub fn write_clients_csv<W: Write>(clients: &[ClientDataset], out: W) -> Result<()> {
    let d = clients
        .iter()
        .flat_map(|c| c.samples.first())
        .map(|s| s.features.len())
        .next()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for c in clients {
        for s in &c.samples {
            let mut row = vec![c.client_id.to_string(), s.label.to_string()];
            row.extend(s.features.iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::io("<client csv>", e))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Format {
        what: "client csv",
        line,
        msg: e.to_string(),
    }
}

/// Reads the format produced by [`write_clients_csv`]. The corruption flag is
/// not part of the format and comes back `false`.
pub fn read_clients_csv<R: Read>(input: R) -> Result<Vec<ClientDataset>> {
    let bad = |line: usize, msg: String| Error::Format {
        what: "client csv",
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.len() < 4 || &header[0] != "client_id" || &header[1] != "label" {
        return Err(bad(1, "expected header client_id,label,f0,f1,...".into()));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(bad(1, format!("feature column {j} is named {name:?}")));
        }
    }
    let d = header.len() - 2;
    let mut clients: Vec<ClientDataset> = Vec::new();
    for (i, record) in r.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(csv_error)?;
        if record.len() != d + 2 {
            return Err(bad(line, format!("expected {} fields, got {}", d + 2, record.len())));
        }
        let client_id: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| bad(line, format!("client_id: {e}")))?;
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|e| bad(line, format!("label: {e}")))?;
        let features = record
            .iter()
            .skip(2)
            .map(|f| {
                let x: f64 = f.trim().parse().map_err(|e| bad(line, format!("feature: {e}")))?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(bad(line, format!("feature {x} outside [0, 1]")));
                }
                Ok(x)
            })
            .collect::<Result<Vec<f64>>>()?;
        let sample = Sample { features, label };
        match clients.iter_mut().find(|c| c.client_id == client_id) {
            Some(c) => c.samples.push(sample),
            None => clients.push(ClientDataset {
                client_id,
                samples: vec![sample],
                corrupted: false,
            }),
        }
    }
    clients.sort_by_key(|c| c.client_id);
    Ok(clients)
}
