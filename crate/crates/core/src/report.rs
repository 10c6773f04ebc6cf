//! Experiment orchestration and output files: per-run metrics CSVs, the
//! `summary.json` digest and the per-client selection count table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentPlan;
use crate::error::{Error, Result};
use crate::sim::{self, Environment, RoundMetrics, RunResult, SimConfig, Strategy};

pub const METRICS_HEADER: &str = "round,test_accuracy,test_loss,emissions_g,cumulative_emissions_g,budget_available_g,num_selected,selected_ids,fallback_fill_count";

pub const SUMMARY_FILE: &str = "summary.json";
pub const SELECTION_COUNTS_FILE: &str = "selection_counts.csv";

pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], mut out: W) -> Result<()> {
    let io = |e| Error::io("<metrics csv>", e);
    writeln!(out, "{METRICS_HEADER}").map_err(io)?;
    for m in metrics {
        let ids = m
            .selected
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.round,
            m.test_accuracy,
            m.test_loss,
            m.emissions_g,
            m.cumulative_emissions_g,
            m.budget_available_g,
            m.selected.len(),
            ids,
            m.fallback_fill_count
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn parse_metrics_csv<R: Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let bad = |line: usize, msg: String| Error::Format {
        what: "metrics csv",
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().collect::<Vec<_>>().join(",") == METRICS_HEADER => {}
        Some(Ok(_)) | None => return Err(bad(1, format!("expected header {METRICS_HEADER:?}"))),
        Some(Err(e)) => return Err(bad(1, e.to_string())),
    }
    let mut rows = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        if record.len() != 9 {
            return Err(bad(line, format!("expected 9 fields, got {}", record.len())));
        }
        let uint = |j: usize, name: &str| -> Result<usize> {
            record[j]
                .parse()
                .map_err(|e| bad(line, format!("{name}: {e}")))
        };
        let float = |j: usize, name: &str| -> Result<f64> {
            let v: f64 = record[j]
                .parse()
                .map_err(|e| bad(line, format!("{name}: {e}")))?;
            if v.is_nan() {
                return Err(bad(line, format!("{name} is NaN")));
            }
            Ok(v)
        };
        let selected: Vec<usize> = if record[7].is_empty() {
            Vec::new()
        } else {
            record[7]
                .split(';')
                .map(|s| s.parse().map_err(|e| bad(line, format!("selected_ids: {e}"))))
                .collect::<Result<_>>()?
        };
        let num_selected = uint(6, "num_selected")?;
        if num_selected != selected.len() {
            return Err(bad(
                line,
                format!("num_selected is {num_selected} but {} ids are listed", selected.len()),
            ));
        }
        rows.push(RoundMetrics {
            round: uint(0, "round")?,
            test_accuracy: float(1, "test_accuracy")?,
            test_loss: float(2, "test_loss")?,
            emissions_g: float(3, "emissions_g")?,
            cumulative_emissions_g: float(4, "cumulative_emissions_g")?,
            budget_available_g: float(5, "budget_available_g")?,
            selected,
            fallback_fill_count: uint(8, "fallback_fill_count")?,
        });
    }
    Ok(rows)
}

pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(std::io::BufReader::new(file))
        .map_err(|e| e.context(format!("reading {}", path.display())))
}

fn budget_label(fraction: Option<f64>) -> String {
    match fraction {
        None => "none".into(),
        Some(f) if f.is_infinite() => "inf".into(),
        Some(f) => format!("{f:.2}"),
    }
}

/// `metrics_<strategy>_<budget>_<seed>.csv`; the budget label is `none` for
/// unbudgeted strategies.
pub fn metrics_file_name(strategy: Strategy, fraction: Option<f64>, seed: u64) -> String {
    format!("metrics_{}_{}_{}.csv", strategy.name(), budget_label(fraction), seed)
}

/// Splits a metrics file name back into strategy, budget label and seed.
pub fn parse_metrics_file_name(name: &str) -> Option<(Strategy, String, u64)> {
    let stem = name.strip_prefix("metrics_")?.strip_suffix(".csv")?;
    let (rest, seed) = stem.rsplit_once('_')?;
    let (strategy, budget) = rest.rsplit_once('_')?;
    Some((strategy.parse().ok()?, budget.to_string(), seed.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub budget_fraction: Option<f64>,
    pub carbon_budget_g: Option<f64>,
    pub emission_baseline_g: Option<f64>,
    pub max_accuracy: f64,
    /// First round reaching `max_accuracy`.
    pub round_of_max_accuracy: usize,
    /// Cumulative emissions (probing included) at that round.
    pub emissions_at_max_accuracy_g: f64,
    pub final_accuracy: f64,
    pub total_emissions_g: f64,
    pub probing_emissions_g: f64,
    pub training_emissions_g: f64,
    pub filtered_clients: BTreeSet<usize>,
    pub corrupted_clients: BTreeSet<usize>,
    pub per_client_selection_counts: BTreeMap<usize, usize>,
    pub metrics_file: String,
}

impl RunSummary {
    pub fn from_run(
        run: &RunResult,
        budget_fraction: Option<f64>,
        emission_baseline_g: Option<f64>,
        num_clients: usize,
        metrics_file: String,
    ) -> Result<Self> {
        let Some(first) = run.metrics.first() else {
            return Err(Error::config("run has no rounds"));
        };
        let mut best = first;
        for m in &run.metrics {
            if m.test_accuracy > best.test_accuracy {
                best = m;
            }
        }
        let last = run.metrics.last().expect("non-empty");
        let mut counts: BTreeMap<usize, usize> = (0..num_clients).map(|c| (c, 0)).collect();
        for m in &run.metrics {
            for c in &m.selected {
                *counts.entry(*c).or_default() += 1;
            }
        }
        Ok(RunSummary {
            strategy: run.strategy,
            seed: run.seed,
            budget_fraction,
            carbon_budget_g: run.carbon_budget_g,
            emission_baseline_g,
            max_accuracy: best.test_accuracy,
            round_of_max_accuracy: best.round,
            emissions_at_max_accuracy_g: best.cumulative_emissions_g,
            final_accuracy: last.test_accuracy,
            total_emissions_g: run.ledger.cumulative,
            probing_emissions_g: run.ledger.probing_round_emissions,
            training_emissions_g: run.ledger.training_total(),
            filtered_clients: run
                .probe
                .as_ref()
                .map(|p| p.filtered.clone())
                .unwrap_or_default(),
            corrupted_clients: run.corrupted.clone(),
            per_client_selection_counts: counts,
            metrics_file,
        })
    }
}

/// One simulation in a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    seed: u64,
    strategy: Strategy,
    fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub summaries: Vec<RunSummary>,
    pub metrics_files: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub selection_counts_path: PathBuf,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs every (seed, strategy, budget fraction) cell of the plan and writes
/// the outputs into `plan.output_dir`.
///
/// Budget fractions become absolute budgets through the same-seed
/// unconstrained Oort run, computed before any budgeted cell of that seed.
/// Unbudgeted strategies run once per seed.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanOutcome> {
    plan.validate()?;
    let out_dir = &plan.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let needs_baseline = plan.strategies.iter().any(|s| s.budgeted());

    let per_seed: Vec<Vec<(Cell, RunResult, Option<f64>)>> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let base = SimConfig {
                seed,
                ..plan.base_config.clone()
            };
            let env = Environment::build(&base).map_err(|e| e.context(format!("seed {seed}")))?;
            let baseline = if needs_baseline {
                Some(sim::emission_baseline(&base, &env)?)
            } else {
                None
            };
            let mut cells = Vec::new();
            for &strategy in &plan.strategies {
                if strategy.budgeted() {
                    cells.extend(plan.budget_sweep.iter().map(|&f| Cell {
                        seed,
                        strategy,
                        fraction: Some(f),
                    }));
                } else {
                    cells.push(Cell {
                        seed,
                        strategy,
                        fraction: None,
                    });
                }
            }
            cells
                .into_par_iter()
                .map(|cell| {
                    let mut cfg = SimConfig {
                        strategy: cell.strategy,
                        ..base.clone()
                    };
                    if let (Some(f), Some(b)) = (cell.fraction, baseline) {
                        cfg.budget_fraction = f;
                        cfg.carbon_budget_g = Some(sim::resolve_budget(f, b));
                    }
                    let run = sim::run_in(&cfg, &env).map_err(|e| {
                        e.context(format!(
                            "{} seed {} budget {}",
                            cell.strategy,
                            seed,
                            budget_label(cell.fraction)
                        ))
                    })?;
                    Ok((cell, run, baseline.filter(|_| cell.strategy.budgeted())))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    let mut metrics_files = Vec::new();
    for (cell, run, baseline) in per_seed.into_iter().flatten() {
        let name = metrics_file_name(cell.strategy, cell.fraction, cell.seed);
        let path = out_dir.join(&name);
        let mut buf = Vec::new();
        write_metrics_csv(&run.metrics, &mut buf)?;
        write_file(&path, &buf)?;
        summaries.push(RunSummary::from_run(
            &run,
            cell.fraction,
            baseline,
            plan.base_config.num_clients,
            name,
        )?);
        metrics_files.push(path);
    }

    let summary_path = out_dir.join(SUMMARY_FILE);
    let json = serde_json::to_vec_pretty(&summaries).expect("summaries serialise");
    write_file(&summary_path, &json)?;

    let table = selection_count_report(
        &metrics_files,
        &plan.base_config.noisy_client_ids,
        plan.base_config.num_clients,
    )?;
    let selection_counts_path = out_dir.join(SELECTION_COUNTS_FILE);
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_file(&selection_counts_path, &buf)?;

    Ok(PlanOutcome {
        summaries,
        metrics_files,
        summary_path,
        selection_counts_path,
    })
}

/// Training-round selection counts per client and strategy, summed over all
/// seeds and budgets found for that strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCounts {
    pub strategies: Vec<Strategy>,
    /// `counts[client][strategy index]`.
    pub counts: Vec<Vec<u64>>,
    pub corrupted: BTreeSet<usize>,
}

impl SelectionCounts {
    pub fn count(&self, client: usize, strategy: Strategy) -> Option<u64> {
        let j = self.strategies.iter().position(|s| *s == strategy)?;
        self.counts.get(client).map(|row| row[j])
    }

    pub fn total(&self, strategy: Strategy) -> u64 {
        let Some(j) = self.strategies.iter().position(|s| *s == strategy) else {
            return 0;
        };
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// `client_id,corrupted,<strategy>...` with one row per client.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<selection counts>", e);
        let mut header = String::from("client_id,corrupted");
        for s in &self.strategies {
            header.push(',');
            header.push_str(s.name());
        }
        writeln!(out, "{header}").map_err(io)?;
        for (client, row) in self.counts.iter().enumerate() {
            let mut line = format!("{client},{}", u8::from(self.corrupted.contains(&client)));
            for c in row {
                line.push_str(&format!(",{c}"));
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

pub fn selection_count_report(
    files: &[PathBuf],
    corrupted: &BTreeSet<usize>,
    num_clients: usize,
) -> Result<SelectionCounts> {
    let mut per_strategy: BTreeMap<Strategy, Vec<u64>> = BTreeMap::new();
    for path in files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::config(format!("bad metrics path {}", path.display())))?;
        let (strategy, _, _) = parse_metrics_file_name(name)
            .ok_or_else(|| Error::config(format!("{name} is not a metrics file name")))?;
        let rows = read_metrics_file(path)?;
        let counts = per_strategy
            .entry(strategy)
            .or_insert_with(|| vec![0; num_clients]);
        for m in rows {
            for c in m.selected {
                let slot = counts.get_mut(c).ok_or_else(|| {
                    Error::config(format!("{name}: client {c} exceeds num_clients {num_clients}"))
                })?;
                *slot += 1;
            }
        }
    }
    let strategies: Vec<Strategy> = per_strategy.keys().copied().collect();
    let counts = (0..num_clients)
        .map(|c| per_strategy.values().map(|v| v[c]).collect())
        .collect();
    Ok(SelectionCounts {
        strategies,
        counts,
        corrupted: corrupted.clone(),
    })
}

/// Metrics files in `dir`, sorted by name.
pub fn list_metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| parse_metrics_file_name(n).is_some())
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, selected: Vec<usize>) -> RoundMetrics {
        RoundMetrics {
            round,
            test_accuracy: 0.125,
            test_loss: 2.0,
            emissions_g: 300.5,
            cumulative_emissions_g: 1000.25,
            budget_available_g: f64::INFINITY,
            selected,
            fallback_fill_count: 0,
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![row(0, vec![1, 4, 9]), row(1, vec![])];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("{METRICS_HEADER}\n0,0.125,2,300.5,1000.25,inf,3,1;4;9,0\n")));
        assert_eq!(parse_metrics_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn metrics_csv_rejects_inconsistent_counts() {
        let text = format!("{METRICS_HEADER}\n0,0.5,1,0,0,inf,2,1,0\n");
        assert!(matches!(
            parse_metrics_csv(text.as_bytes()),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(parse_metrics_csv("round,acc\n".as_bytes()).is_err());
    }

    #[test]
    fn file_names() {
        let name = metrics_file_name(Strategy::OortCaWt, Some(0.4), 7);
        assert_eq!(name, "metrics_oort_ca_wt_0.40_7.csv");
        assert_eq!(
            parse_metrics_file_name(&name),
            Some((Strategy::OortCaWt, "0.40".into(), 7))
        );
        assert_eq!(metrics_file_name(Strategy::Random, None, 0), "metrics_random_none_0.csv");
        assert!(parse_metrics_file_name("summary.json").is_none());
    }

    #[test]
    fn single_round_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(metrics_file_name(Strategy::Random, None, 0));
        let mut f = std::fs::File::create(&path).unwrap();
        write_metrics_csv(&[row(0, (0..10).collect())], &mut f).unwrap();
        let table = selection_count_report(&[path], &BTreeSet::from([0]), 30).unwrap();
        assert_eq!(table.total(Strategy::Random), 10);
        assert_eq!(table.counts.iter().filter(|r| r[0] > 0).count(), 10);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("client_id,corrupted,random\n0,1,1\n"));
    }

    #[test]
    fn missing_metrics_file_is_an_error() {
        let path = PathBuf::from("/nonexistent/metrics_oort_none_0.csv");
        assert!(selection_count_report(&[path], &BTreeSet::new(), 3).is_err());
    }
}
