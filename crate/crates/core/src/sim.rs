//! The round-based federated training driver.
//!
//! A run builds the synthetic federation (data, partition, corruption, region
//! assignment, initial model), optionally runs a probing round, then repeats
//! select -> local training -> FedAvg -> evaluation -> emissions accounting
//! for every round.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::carbon::{self, CarbonTrace, EmissionsLedger, RegionAssignment, SynthTraceSpec};
use crate::data::{self, ClientDataset, DatasetSpec, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{ModelParams, PerSampleGradStats, Sample};
use crate::optim::AdamConfig;
use crate::rng::{self, tag};
use crate::selection::{self, BudgetState, ClientUtility, SelectionDecision};
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    RandomWt,
    Oort,
    OortWt,
    OortCa,
    OortCaWt,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::RandomWt,
        Strategy::Oort,
        Strategy::OortWt,
        Strategy::OortCa,
        Strategy::OortCaWt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::RandomWt => "random_wt",
            Strategy::Oort => "oort",
            Strategy::OortWt => "oort_wt",
            Strategy::OortCa => "oort_ca",
            Strategy::OortCaWt => "oort_ca_wt",
        }
    }

    /// Filters clients by probing utility before training.
    pub fn thresholded(self) -> bool {
        matches!(self, Strategy::RandomWt | Strategy::OortWt | Strategy::OortCaWt)
    }

    /// Selects under a carbon budget.
    pub fn budgeted(self) -> bool {
        matches!(self, Strategy::OortCa | Strategy::OortCaWt)
    }

    pub fn probes(self) -> bool {
        self.thresholded() || self.budgeted()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {s:?}; expected one of random, random_wt, oort, oort_wt, oort_ca, oort_ca_wt"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rounds: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold_c: f64,
    /// Carbon budget as a multiple of the same-seed unconstrained Oort
    /// emissions. Infinite means unconstrained.
    pub budget_fraction: f64,
    /// Absolute budget in grams. When unset, budgeted strategies derive it
    /// from `budget_fraction` and a reference Oort run.
    pub carbon_budget_g: Option<f64>,
    pub strategy: Strategy,
    pub dirichlet_alpha: f64,
    pub noisy_client_ids: BTreeSet<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Trace CSV; a synthetic trace is generated when unset.
    pub trace_path: Option<PathBuf>,
    pub curtail_prob: f64,
    pub num_samples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub cluster_std: f64,
    pub hidden_units: usize,
    pub test_fraction: f64,
    pub min_samples_per_client: usize,
    pub oort_epsilon: f64,
    pub oort_epsilon_decay: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rounds: 100,
            num_clients: 30,
            clients_per_round: 10,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 0.001,
            threshold_c: 0.5,
            budget_fraction: 1.0,
            carbon_budget_g: None,
            strategy: Strategy::OortCaWt,
            dirichlet_alpha: 10.0,
            noisy_client_ids: (0..6).collect(),
            noise_sigma: 1.0,
            seed: 0,
            trace_path: None,
            curtail_prob: 0.15,
            num_samples: 6000,
            num_features: 16,
            num_classes: 10,
            cluster_std: 0.25,
            hidden_units: 32,
            test_fraction: 0.2,
            min_samples_per_client: 20,
            oort_epsilon: 0.1,
            oort_epsilon_decay: 0.98,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(format!("{key}: {msg}")));
        if self.rounds == 0 {
            return fail("rounds", "must be at least 1".into());
        }
        if self.num_clients == 0 {
            return fail("num_clients", "must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return fail(
                "clients_per_round",
                format!("must lie in 1..={} (num_clients)", self.num_clients),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold_c) {
            return fail("threshold_c", "must lie in [0, 1]".into());
        }
        if self.budget_fraction.is_nan() || self.budget_fraction < 0.0 {
            return fail("budget_fraction", "must be non-negative".into());
        }
        if let Some(b) = self.carbon_budget_g {
            if b.is_nan() || b < 0.0 {
                return fail("carbon_budget_g", "must be non-negative".into());
            }
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return fail("dirichlet_alpha", "must be positive".into());
        }
        if let Some(&id) = self.noisy_client_ids.iter().find(|&&id| id >= self.num_clients) {
            return fail("noisy_client_ids", format!("client {id} does not exist"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma", "must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.curtail_prob) {
            return fail("curtail_prob", "must lie in [0, 1]".into());
        }
        if self.hidden_units == 0 {
            return fail("hidden_units", "must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction", "must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.oort_epsilon) {
            return fail("oort_epsilon", "must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.oort_epsilon_decay) {
            return fail("oort_epsilon_decay", "must lie in [0, 1]".into());
        }
        self.dataset_spec()
            .validate()
            .map_err(|e| e.context("dataset"))?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples: self.num_samples,
            features: self.num_features,
            classes: self.num_classes,
            cluster_std: self.cluster_std,
            ..DatasetSpec::default()
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        vec![self.num_features, self.hidden_units, self.num_classes]
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::with_lr(self.learning_rate),
        }
    }

    /// Exploration rate of the plain Oort baseline in `round`.
    pub fn oort_epsilon_at(&self, round: usize) -> f64 {
        self.oort_epsilon * self.oort_epsilon_decay.powi(round as i32)
    }
}

/// Everything a run needs that does not depend on the strategy.
#[derive(Debug, Clone)]
pub struct Environment {
    pub clients: Vec<ClientDataset>,
    pub test: Vec<Sample>,
    pub trace: CarbonTrace,
    pub assignment: RegionAssignment,
    pub initial_params: ModelParams,
}

impl Environment {
    pub fn build(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let samples = config.dataset_spec().generate(seed)?;
        let (train_set, test) = data::split_test(&samples, config.test_fraction, seed)?;
        let partition = PartitionSpec {
            num_clients: config.num_clients,
            alpha: config.dirichlet_alpha,
            seed,
            min_samples_per_client: config.min_samples_per_client,
        };
        let clients = data::dirichlet_partition(&train_set, &partition)?;
        let clients =
            data::corrupt_clients(clients, &config.noisy_client_ids, config.noise_sigma, seed)?;
        let trace = match &config.trace_path {
            Some(path) => carbon::load_trace(path)?,
            None => carbon::synth_trace(&SynthTraceSpec {
                regions: config.num_clients,
                hours: config.rounds,
                seed: rng::derive_seed(seed, &[tag::TRACE]),
                curtail_prob: config.curtail_prob,
            })?,
        };
        trace.require_hours(config.rounds)?;
        let assignment = carbon::assign_regions(config.num_clients, &trace, seed);
        let initial_params = ModelParams::init(&config.layer_dims(), seed)?;
        Ok(Environment {
            clients,
            test,
            trace,
            assignment,
            initial_params,
        })
    }

    pub fn sizes(&self) -> BTreeMap<usize, usize> {
        self.clients.iter().map(|c| (c.client_id, c.size())).collect()
    }

    pub fn corrupted_ids(&self) -> BTreeSet<usize> {
        self.clients
            .iter()
            .filter(|c| c.corrupted)
            .map(|c| c.client_id)
            .collect()
    }
}

/// Output of the probing round.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub grad_stats: BTreeMap<usize, PerSampleGradStats>,
    /// Per-sample losses of the initial model on each client.
    pub losses: BTreeMap<usize, Vec<f64>>,
    pub emissions_g: f64,
}

/// Every client evaluates per-sample gradient norms (and losses) of the
/// initial model over its full dataset. Nothing is trained. All clients run,
/// so the round is charged at hour 0 for everyone.
pub fn run_probing_round(
    clients: &[ClientDataset],
    params: &ModelParams,
    assignment: &RegionAssignment,
    trace: &CarbonTrace,
) -> Result<ProbeOutcome> {
    let per_client: Vec<(usize, PerSampleGradStats, Vec<f64>)> = clients
        .par_iter()
        .map(|c| {
            let stats = PerSampleGradStats::compute(params, &c.samples)
                .map_err(|e| e.context(format!("probing client {}", c.client_id)))?;
            let losses = train::sample_losses(params, &c.samples)
                .map_err(|e| e.context(format!("probing client {}", c.client_id)))?;
            Ok((c.client_id, stats, losses))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let emissions_g = carbon::round_emissions(&ids, assignment, trace, 0)?;
    let mut grad_stats = BTreeMap::new();
    let mut losses = BTreeMap::new();
    for (id, stats, l) in per_client {
        grad_stats.insert(id, stats);
        losses.insert(id, l);
    }
    Ok(ProbeOutcome {
        grad_stats,
        losses,
        emissions_g,
    })
}

/// Weighted coordinate-wise mean of client models.
pub fn fedavg(updates: &[(&ModelParams, f64)]) -> Result<ModelParams> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::config("fedavg needs at least one update"));
    };
    if let Some((_, w)) = updates.iter().find(|(_, w)| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::config(format!("fedavg weight must be positive, got {w}")));
    }
    if updates.iter().any(|(p, _)| !p.same_shape(first)) {
        return Err(Error::shape("fedavg updates have different shapes"));
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    // Averaging offsets from the first model makes identical inputs come back
    // bit-for-bit.
    let mut out = (*first).clone();
    let base = first.values();
    let mut acc = vec![0.0; base.len()];
    for (params, w) in &updates[1..] {
        let share = w / total;
        for ((a, p), b) in acc.iter_mut().zip(params.values()).zip(base) {
            *a += share * (p - b);
        }
    }
    for (v, a) in out.values_mut().iter_mut().zip(acc) {
        *v += a;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub emissions_g: f64,
    /// Includes the probing round.
    pub cumulative_emissions_g: f64,
    /// `B_t` before selection; infinite for unbudgeted strategies.
    pub budget_available_g: f64,
    pub selected: Vec<usize>,
    pub fallback_fill_count: usize,
}

/// Probing-round results kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub utilities: Vec<ClientUtility>,
    pub retained: BTreeSet<usize>,
    pub filtered: BTreeSet<usize>,
    pub emissions_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: EmissionsLedger,
    pub probe: Option<ProbeSummary>,
    pub carbon_budget_g: Option<f64>,
    pub budget: Option<BudgetState>,
    pub corrupted: BTreeSet<usize>,
}

/// Mutable state of a run between rounds.
pub struct Simulation<'a> {
    config: SimConfig,
    env: &'a Environment,
    params: ModelParams,
    pool: BTreeSet<usize>,
    /// Loss utilities refreshed after each participation (Oort variants).
    loss_utilities: BTreeMap<usize, f64>,
    /// Probing-round loss utilities, fixed for the whole run (budgeted variants).
    frozen_utilities: BTreeMap<usize, f64>,
    budget: Option<BudgetState>,
    ledger: EmissionsLedger,
    probe: Option<ProbeSummary>,
    next_round: usize,
}

impl<'a> Simulation<'a> {
    /// Sets up a run and performs the probing round when the strategy needs
    /// one. Budgeted strategies require `config.carbon_budget_g`.
    pub fn new(config: SimConfig, env: &'a Environment) -> Result<Self> {
        config.validate()?;
        if env.clients.len() != config.num_clients {
            return Err(Error::config("environment does not match num_clients"));
        }
        let strategy = config.strategy;
        let mut sim = Simulation {
            params: env.initial_params.clone(),
            pool: env.clients.iter().map(|c| c.client_id).collect(),
            loss_utilities: BTreeMap::new(),
            frozen_utilities: BTreeMap::new(),
            budget: None,
            ledger: EmissionsLedger::new(),
            probe: None,
            next_round: 0,
            config,
            env,
        };
        if strategy.budgeted() {
            let total = sim.config.carbon_budget_g.ok_or_else(|| {
                Error::config("budgeted strategy needs an absolute carbon budget")
            })?;
            sim.budget = Some(BudgetState::new(total, sim.config.rounds)?);
        }
        if strategy.probes() {
            sim.probe()?;
        }
        Ok(sim)
    }

    fn probe(&mut self) -> Result<()> {
        let env = self.env;
        let outcome = run_probing_round(&env.clients, &self.params, &env.assignment, &env.trace)?;
        self.ledger.record_probing(outcome.emissions_g)?;
        let sizes = env.sizes();
        let grad_utilities = selection::probing_utility(&sizes, &outcome.grad_stats)?;
        let loss_utilities = selection::loss_utility(&sizes, &outcome.losses)?;
        let loss_map: BTreeMap<usize, f64> =
            loss_utilities.iter().map(|u| (u.client_id, u.utility)).collect();

        let retained = if self.config.strategy.thresholded() {
            selection::threshold_filter(&grad_utilities, self.config.threshold_c)?
        } else {
            self.pool.clone()
        };
        let filtered = self.pool.difference(&retained).copied().collect();
        self.pool = retained.clone();
        // The probing round stands in for Oort's exploration, so every client
        // starts with a measured loss utility.
        self.loss_utilities = loss_map.clone();
        self.frozen_utilities = loss_map;
        self.probe = Some(ProbeSummary {
            utilities: grad_utilities,
            retained,
            filtered,
            emissions_g: outcome.emissions_g,
        });
        Ok(())
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn pool(&self) -> &BTreeSet<usize> {
        &self.pool
    }

    pub fn ledger(&self) -> &EmissionsLedger {
        &self.ledger
    }

    pub fn budget(&self) -> Option<&BudgetState> {
        self.budget.as_ref()
    }

    pub fn probe_summary(&self) -> Option<&ProbeSummary> {
        self.probe.as_ref()
    }

    fn select(&self, t: usize) -> Result<SelectionDecision> {
        let k = self.config.clients_per_round;
        let mut rng = selection::selection_rng(self.config.seed, t);
        match self.config.strategy {
            Strategy::Random | Strategy::RandomWt => {
                Ok(selection::select_random(&self.pool, k, t, &mut rng))
            }
            Strategy::Oort => selection::select_topk_utility(
                &self.pool,
                &self.loss_utilities,
                k,
                self.config.oort_epsilon_at(t),
                t,
                &mut rng,
            ),
            Strategy::OortWt => {
                selection::select_topk_utility(&self.pool, &self.loss_utilities, k, 0.0, t, &mut rng)
            }
            Strategy::OortCa | Strategy::OortCaWt => {
                let budget = self.budget.as_ref().expect("budgeted run has a budget");
                let costs: BTreeMap<usize, f64> = self
                    .pool
                    .iter()
                    .map(|&c| {
                        let region = self.env.assignment.region_of(c)?;
                        Ok((c, self.env.trace.effective_intensity(region, t)? * carbon::ENERGY_KWH_PER_ROUND))
                    })
                    .collect::<Result<_>>()?;
                selection::select_budgeted(
                    &self.pool,
                    &self.frozen_utilities,
                    &costs,
                    budget.available,
                    k,
                    t,
                )
            }
        }
    }

    /// Runs the next round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.next_round;
        if t >= self.config.rounds {
            return Err(Error::Range(format!("round {t} (run has {})", self.config.rounds)));
        }
        let decision = self.select(t).map_err(|e| e.context(format!("round {t} selection")))?;
        if decision.selected.iter().any(|c| !self.pool.contains(c)) {
            return Err(Error::Invariant(format!("round {t} selected a client outside the pool")));
        }
        let budget_available_g = self.budget.map_or(f64::INFINITY, |b| b.available);

        if !decision.selected.is_empty() {
            let cfg = self.config.train_config();
            let seed = self.config.seed;
            let params = &self.params;
            let clients = &self.env.clients;
            let outcomes = decision
                .selected
                .par_iter()
                .map(|&c| {
                    let local_seed = rng::derive_seed(seed, &[tag::LOCAL_TRAIN, t as u64, c as u64]);
                    train::local_train(params, &clients[c], &cfg, local_seed)
                        .map_err(|e| e.context(format!("round {t} client {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let updates: Vec<(&ModelParams, f64)> = decision
                .selected
                .iter()
                .zip(&outcomes)
                .map(|(&c, o)| (&o.params, clients[c].size() as f64))
                .collect();
            let aggregated = fedavg(&updates)?;
            for (&c, o) in decision.selected.iter().zip(&outcomes) {
                let u = selection::statistical_utility(clients[c].size(), &o.per_sample_losses)?;
                self.loss_utilities.insert(c, u);
            }
            self.params = aggregated;
        }

        let emissions_g =
            carbon::round_emissions(&decision.selected, &self.env.assignment, &self.env.trace, t)?;
        if let Some(budget) = self.budget {
            if emissions_g != decision.budget_spent {
                return Err(Error::Invariant(format!(
                    "round {t} emitted {emissions_g} g but the selector charged {} g",
                    decision.budget_spent
                )));
            }
            self.budget = Some(budget.update(decision.budget_spent)?);
        }
        self.ledger.record_round(emissions_g)?;
        let eval = train::evaluate(&self.params, &self.env.test)?;
        self.next_round += 1;
        Ok(RoundMetrics {
            round: t,
            test_accuracy: eval.accuracy,
            test_loss: eval.mean_loss,
            emissions_g,
            cumulative_emissions_g: self.ledger.cumulative,
            budget_available_g,
            selected: decision.selected,
            fallback_fill_count: decision.fallback_fill_count,
        })
    }

    pub fn finish(self, metrics: Vec<RoundMetrics>) -> RunResult {
        RunResult {
            strategy: self.config.strategy,
            seed: self.config.seed,
            metrics,
            ledger: self.ledger,
            probe: self.probe,
            carbon_budget_g: self.config.carbon_budget_g,
            budget: self.budget,
            corrupted: self.env.corrupted_ids(),
        }
    }
}

/// Training emissions of the unconstrained Oort run for this config's seed.
pub fn emission_baseline(config: &SimConfig, env: &Environment) -> Result<f64> {
    let reference = SimConfig {
        strategy: Strategy::Oort,
        carbon_budget_g: None,
        ..config.clone()
    };
    let result = run_in(&reference, env).map_err(|e| e.context("emission baseline run"))?;
    Ok(result.ledger.training_total())
}

/// Absolute budget for `fraction` of a baseline. Zero times an infinite
/// fraction is treated as zero.
pub fn resolve_budget(fraction: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        fraction * baseline
    }
}

/// Runs every round of `config` on a prepared environment.
pub fn run_in(config: &SimConfig, env: &Environment) -> Result<RunResult> {
    let mut config = config.clone();
    if config.strategy.budgeted() && config.carbon_budget_g.is_none() {
        let baseline = emission_baseline(&config, env)?;
        config.carbon_budget_g = Some(resolve_budget(config.budget_fraction, baseline));
    }
    let rounds = config.rounds;
    let mut sim = Simulation::new(config, env)?;
    let mut metrics = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        metrics.push(sim.run_round()?);
    }
    Ok(sim.finish(metrics))
}

pub fn run_simulation(config: &SimConfig) -> Result<RunResult> {
    let env = Environment::build(config)?;
    run_in(config, &env).map_err(|e| e.context(format!("{} seed {}", config.strategy, config.seed)))
}
