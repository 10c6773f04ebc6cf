//! Experiment plans: a flat TOML key/value file with a fixed schema.
//!
//! Every key is optional and defaults to the reference protocol (30 clients,
//! 10 per round, 2 local epochs, batch 32, lr 0.001, Dirichlet alpha 10,
//! noise sigma 1 on clients 0-5, threshold 0.5, 100 rounds). Unknown keys,
//! nested tables and ill-typed values are rejected with the key named.
//!
//! | key | type |
//! |-----|------|
//! | `rounds`, `num_clients`, `clients_per_round`, `local_epochs`, `batch_size` | integer |
//! | `num_samples`, `num_features`, `num_classes`, `hidden_units`, `min_samples_per_client`, `seed` | integer |
//! | `learning_rate`, `threshold_c`, `budget_fraction`, `carbon_budget_g`, `dirichlet_alpha` | float |
//! | `noise_sigma`, `curtail_prob`, `cluster_std`, `test_fraction`, `oort_epsilon`, `oort_epsilon_decay` | float |
//! | `noisy_client_ids`, `seeds` | array of integers |
//! | `budget_sweep` | array of floats, ascending |
//! | `strategies` | array of strategy names |
//! | `trace_path`, `output_dir` | string |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::sim::{SimConfig, Strategy};

pub const TRACE_ENV_VAR: &str = "FEDCARBON_TRACE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Shared settings; `strategy` and `seed` are overridden per cell.
    pub base_config: SimConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Budget fractions for budgeted strategies.
    pub budget_sweep: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            base_config: SimConfig::default(),
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0],
            budget_sweep: (0..=10).map(|i| i as f64 / 10.0).collect(),
            output_dir: PathBuf::from("results"),
        }
    }
}

fn key_error(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("key `{key}`: {msg}"))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn get_uint(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(key_error(key, format!("expected a non-negative integer, got {i}"))),
        other => Err(key_error(key, format!("expected an integer, got {}", type_name(other)))),
    }
}

fn get_usize(key: &str, v: &Value) -> Result<usize> {
    let n = get_uint(key, v)?;
    usize::try_from(n).map_err(|_| key_error(key, format!("{n} is too large")))
}

fn get_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) if !f.is_nan() => Ok(*f),
        Value::Float(_) => Err(key_error(key, "NaN is not allowed")),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(key_error(key, format!("expected a number, got {}", type_name(other)))),
    }
}

fn get_string<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| key_error(key, format!("expected a string, got {}", type_name(v))))
}

fn get_array<'v>(key: &str, v: &'v Value) -> Result<&'v [Value]> {
    v.as_array()
        .map(|a| a.as_slice())
        .ok_or_else(|| key_error(key, format!("expected an array, got {}", type_name(v))))
}

impl ExperimentPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid syntax: {}", e.message())))?;
        let mut plan = ExperimentPlan::default();
        let cfg = &mut plan.base_config;
        for (key, value) in &table {
            let k = key.as_str();
            match k {
                "rounds" => cfg.rounds = get_usize(k, value)?,
                "num_clients" => cfg.num_clients = get_usize(k, value)?,
                "clients_per_round" => cfg.clients_per_round = get_usize(k, value)?,
                "local_epochs" => cfg.local_epochs = get_usize(k, value)?,
                "batch_size" => cfg.batch_size = get_usize(k, value)?,
                "num_samples" => cfg.num_samples = get_usize(k, value)?,
                "num_features" => cfg.num_features = get_usize(k, value)?,
                "num_classes" => cfg.num_classes = get_usize(k, value)?,
                "hidden_units" => cfg.hidden_units = get_usize(k, value)?,
                "min_samples_per_client" => cfg.min_samples_per_client = get_usize(k, value)?,
                "seed" => cfg.seed = get_uint(k, value)?,
                "learning_rate" => cfg.learning_rate = get_float(k, value)?,
                "threshold_c" => cfg.threshold_c = get_float(k, value)?,
                "budget_fraction" => cfg.budget_fraction = get_float(k, value)?,
                "carbon_budget_g" => cfg.carbon_budget_g = Some(get_float(k, value)?),
                "dirichlet_alpha" => cfg.dirichlet_alpha = get_float(k, value)?,
                "noise_sigma" => cfg.noise_sigma = get_float(k, value)?,
                "curtail_prob" => cfg.curtail_prob = get_float(k, value)?,
                "cluster_std" => cfg.cluster_std = get_float(k, value)?,
                "test_fraction" => cfg.test_fraction = get_float(k, value)?,
                "oort_epsilon" => cfg.oort_epsilon = get_float(k, value)?,
                "oort_epsilon_decay" => cfg.oort_epsilon_decay = get_float(k, value)?,
                "trace_path" => cfg.trace_path = Some(PathBuf::from(get_string(k, value)?)),
                "noisy_client_ids" => {
                    cfg.noisy_client_ids = get_array(k, value)?
                        .iter()
                        .map(|v| get_usize(k, v))
                        .collect::<Result<BTreeSet<_>>>()?
                }
                "seeds" => {
                    plan.seeds = get_array(k, value)?
                        .iter()
                        .map(|v| get_uint(k, v))
                        .collect::<Result<_>>()?
                }
                "budget_sweep" => {
                    plan.budget_sweep = get_array(k, value)?
                        .iter()
                        .map(|v| get_float(k, v))
                        .collect::<Result<_>>()?
                }
                "strategies" => {
                    plan.strategies = get_array(k, value)?
                        .iter()
                        .map(|v| get_string(k, v)?.parse().map_err(|e: Error| key_error(k, e)))
                        .collect::<Result<_>>()?
                }
                "output_dir" => plan.output_dir = PathBuf::from(get_string(k, value)?),
                other if value.is_table() => {
                    return Err(key_error(other, "nested tables are not supported"))
                }
                other => return Err(key_error(other, "unknown key")),
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(key_error("seeds", "at least one seed is required"));
        }
        if self.strategies.is_empty() {
            return Err(key_error("strategies", "at least one strategy is required"));
        }
        if self.budget_sweep.iter().any(|f| f.is_nan() || *f < 0.0) {
            return Err(key_error("budget_sweep", "fractions must be non-negative"));
        }
        if self.budget_sweep.windows(2).any(|w| w[0] > w[1]) {
            return Err(key_error("budget_sweep", "fractions must be sorted ascending"));
        }
        if self.strategies.iter().any(|s| s.budgeted()) && self.budget_sweep.is_empty() {
            return Err(key_error("budget_sweep", "budgeted strategies need at least one fraction"));
        }
        self.base_config.validate()
    }

    /// Serialises to the same flat format [`ExperimentPlan::parse`] reads.
    pub fn to_toml(&self) -> String {
        let c = &self.base_config;
        let mut t = Table::new();
        let int = |v: u64| Value::Integer(v as i64);
        t.insert("rounds".into(), int(c.rounds as u64));
        t.insert("num_clients".into(), int(c.num_clients as u64));
        t.insert("clients_per_round".into(), int(c.clients_per_round as u64));
        t.insert("local_epochs".into(), int(c.local_epochs as u64));
        t.insert("batch_size".into(), int(c.batch_size as u64));
        t.insert("num_samples".into(), int(c.num_samples as u64));
        t.insert("num_features".into(), int(c.num_features as u64));
        t.insert("num_classes".into(), int(c.num_classes as u64));
        t.insert("hidden_units".into(), int(c.hidden_units as u64));
        t.insert("min_samples_per_client".into(), int(c.min_samples_per_client as u64));
        t.insert("seed".into(), int(c.seed));
        t.insert("learning_rate".into(), Value::Float(c.learning_rate));
        t.insert("threshold_c".into(), Value::Float(c.threshold_c));
        t.insert("budget_fraction".into(), Value::Float(c.budget_fraction));
        if let Some(b) = c.carbon_budget_g {
            t.insert("carbon_budget_g".into(), Value::Float(b));
        }
        t.insert("dirichlet_alpha".into(), Value::Float(c.dirichlet_alpha));
        t.insert("noise_sigma".into(), Value::Float(c.noise_sigma));
        t.insert("curtail_prob".into(), Value::Float(c.curtail_prob));
        t.insert("cluster_std".into(), Value::Float(c.cluster_std));
        t.insert("test_fraction".into(), Value::Float(c.test_fraction));
        t.insert("oort_epsilon".into(), Value::Float(c.oort_epsilon));
        t.insert("oort_epsilon_decay".into(), Value::Float(c.oort_epsilon_decay));
        if let Some(p) = &c.trace_path {
            t.insert("trace_path".into(), Value::String(p.display().to_string()));
        }
        t.insert(
            "noisy_client_ids".into(),
            Value::Array(c.noisy_client_ids.iter().map(|&i| int(i as u64)).collect()),
        );
        t.insert(
            "seeds".into(),
            Value::Array(self.seeds.iter().map(|&s| int(s)).collect()),
        );
        t.insert(
            "budget_sweep".into(),
            Value::Array(self.budget_sweep.iter().map(|&f| Value::Float(f)).collect()),
        );
        t.insert(
            "strategies".into(),
            Value::Array(
                self.strategies
                    .iter()
                    .map(|s| Value::String(s.name().into()))
                    .collect(),
            ),
        );
        t.insert(
            "output_dir".into(),
            Value::String(self.output_dir.display().to_string()),
        );
        toml::to_string(&t).expect("flat table always serialises")
    }

    /// Applies `FEDCARBON_TRACE`, if set, as the trace path.
    pub fn apply_env_overrides(&mut self) {
        if let Some(path) = std::env::var_os(TRACE_ENV_VAR).filter(|p| !p.is_empty()) {
            self.base_config.trace_path = Some(PathBuf::from(path));
        }
    }
}

/// Parses a `start:end:step` sweep such as `0:1:0.1`, inclusive of `end`.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |msg: &str| Error::config(format!("budget sweep {spec:?}: {msg}"));
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad("expected numbers")))
        .collect::<Result<Vec<_>>>()?;
    match nums.as_slice() {
        [single] if *single >= 0.0 => Ok(vec![*single]),
        [start, end, step] => {
            if !(*start >= 0.0 && end >= start && *step > 0.0 && start.is_finite() && end.is_finite()) {
                return Err(bad("need 0 <= start <= end and step > 0"));
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            if n > 10_000 {
                return Err(bad("too many sweep points"));
            }
            // Round to suppress accumulated binary error (0.30000000000000004).
            Ok((0..=n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        _ => Err(bad("expected start:end:step")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let plan = ExperimentPlan::parse("").unwrap();
        let c = &plan.base_config;
        assert_eq!(c.num_clients, 30);
        assert_eq!(c.clients_per_round, 10);
        assert_eq!(c.local_epochs, 2);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.dirichlet_alpha, 10.0);
        assert_eq!(c.noise_sigma, 1.0);
        assert_eq!(c.threshold_c, 0.5);
        assert_eq!(c.rounds, 100);
        assert_eq!(c.noisy_client_ids.len(), 6);
    }

    #[test]
    fn k_above_n_names_key() {
        let err = ExperimentPlan::parse("clients_per_round=40\nnum_clients=30\n").unwrap_err();
        assert!(err.to_string().contains("clients_per_round"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = ExperimentPlan::parse("roundz = 3").unwrap_err();
        assert!(err.to_string().contains("`roundz`"), "{err}");
        let err = ExperimentPlan::parse("rounds = \"ten\"").unwrap_err();
        assert!(err.to_string().contains("`rounds`"), "{err}");
        let err = ExperimentPlan::parse("[section]\nrounds = 3").unwrap_err();
        assert!(err.to_string().contains("`section`"), "{err}");
        let err = ExperimentPlan::parse("strategies = [\"oort\", \"greedy\"]").unwrap_err();
        assert!(err.to_string().contains("`strategies`"), "{err}");
        let err = ExperimentPlan::parse("budget_sweep = [0.5, 0.1]").unwrap_err();
        assert!(err.to_string().contains("`budget_sweep`"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut plan = ExperimentPlan::parse(
            "rounds = 7\nseeds = [1, 2]\nbudget_sweep = [0.0, 0.3, 1.0]\nstrategies = [\"oort_ca\"]\n\
             trace_path = \"x/trace.csv\"\nlearning_rate = 0.0025\nbudget_fraction = inf\n",
        )
        .unwrap();
        assert_eq!(ExperimentPlan::parse(&plan.to_toml()).unwrap(), plan);
        plan.base_config.carbon_budget_g = Some(1234.5);
        assert_eq!(ExperimentPlan::parse(&plan.to_toml()).unwrap(), plan);
        let defaults = ExperimentPlan::default();
        assert_eq!(ExperimentPlan::parse(&defaults.to_toml()).unwrap(), defaults);
    }

    #[test]
    fn sweep_parsing() {
        let s = parse_sweep("0:1:0.1").unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[3], 0.3);
        assert_eq!(s[10], 1.0);
        assert_eq!(parse_sweep("0.4").unwrap(), vec![0.4]);
        assert!(parse_sweep("1:0:0.1").is_err());
        assert!(parse_sweep("a:b").is_err());
    }
}
