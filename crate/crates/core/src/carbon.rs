//! Hourly carbon-intensity traces, client-to-region assignment and emissions
//! accounting.
//!
//! Every client draws 1 kWh per training round and a round lasts one hour, so
//! a client's emissions in round `t` are simply the effective intensity of its
//! region at hour `t`. Curtailed hours count as zero-emission.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const TRACE_HEADER: &str = "timestamp,region,intensity_g_per_kwh,curtailed";

/// Energy drawn by one client during one training round.
pub const ENERGY_KWH_PER_ROUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CarbonTrace {
    regions: Vec<String>,
    start: DateTime<Utc>,
    hours: usize,
    /// `intensity[region][hour]` in gCO2eq/kWh.
    intensity: Vec<Vec<f64>>,
    curtailed: Vec<Vec<bool>>,
}

impl CarbonTrace {
    pub fn new(
        regions: Vec<String>,
        start: DateTime<Utc>,
        intensity: Vec<Vec<f64>>,
        curtailed: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::config("a trace needs at least one region"));
        }
        let unique: BTreeSet<&String> = regions.iter().collect();
        if unique.len() != regions.len() {
            return Err(Error::config("region ids must be unique"));
        }
        if intensity.len() != regions.len() || curtailed.len() != regions.len() {
            return Err(Error::shape("trace matrices must have one row per region"));
        }
        let hours = intensity[0].len();
        if hours == 0 {
            return Err(Error::config("a trace needs at least one hour"));
        }
        if intensity.iter().any(|row| row.len() != hours)
            || curtailed.iter().any(|row| row.len() != hours)
        {
            return Err(Error::shape("trace matrices must be rectangular"));
        }
        if intensity.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("intensities must be finite and non-negative"));
        }
        Ok(CarbonTrace {
            regions,
            start,
            hours,
            intensity,
            curtailed,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == id)
    }

    fn check_cell(&self, region: usize, t: usize) -> Result<()> {
        if region >= self.regions.len() {
            return Err(Error::Range(format!(
                "region index {region} (trace has {})",
                self.regions.len()
            )));
        }
        if t >= self.hours {
            return Err(Error::Range(format!("hour {t} (trace covers {})", self.hours)));
        }
        Ok(())
    }

    /// Recorded intensity, ignoring curtailment.
    pub fn recorded_intensity(&self, region: usize, t: usize) -> Result<f64> {
        self.check_cell(region, t)?;
        Ok(self.intensity[region][t])
    }

    pub fn is_curtailed(&self, region: usize, t: usize) -> Result<bool> {
        self.check_cell(region, t)?;
        Ok(self.curtailed[region][t])
    }

    /// Intensity a client in `region` pays at hour `t`: zero when curtailed
    /// renewable energy is available, the recorded value otherwise.
    pub fn effective_intensity(&self, region: usize, t: usize) -> Result<f64> {
        self.check_cell(region, t)?;
        Ok(if self.curtailed[region][t] {
            0.0
        } else {
            self.intensity[region][t]
        })
    }

    pub fn require_hours(&self, rounds: usize) -> Result<()> {
        if self.hours < rounds {
            return Err(Error::config(format!(
                "trace covers {} hours but {} rounds were requested",
                self.hours, rounds
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<trace csv>", e);
        writeln!(out, "{TRACE_HEADER}").map_err(io)?;
        for h in 0..self.hours {
            let ts = self.start + chrono::Duration::hours(h as i64);
            for (r, region) in self.regions.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    ts.format("%Y-%m-%dT%H:%M:%SZ"),
                    region,
                    self.intensity[r][h],
                    u8::from(self.curtailed[r][h])
                )
                .map_err(io)?;
            }
        }
        Ok(())
    }
}

fn parse_timestamp(raw: &str) -> std::result::Result<DateTime<Utc>, String> {
    let raw = raw.trim();
    let ts = if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        if dt.offset().local_minus_utc() != 0 {
            return Err(format!("timestamp {raw:?} is not in UTC"));
        }
        dt.with_timezone(&Utc)
    } else if let Some(naive) = raw
        .strip_suffix('Z')
        .and_then(|s| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M").ok())
    {
        Utc.from_utc_datetime(&naive)
    } else {
        return Err(format!("cannot parse timestamp {raw:?}"));
    };
    if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
        return Err(format!("timestamp {raw:?} is not on the hour"));
    }
    Ok(ts)
}

/// Parses the trace CSV format. Rows may come in any order, but every
/// `(region, hour)` cell between the first and last timestamp must appear
/// exactly once. Regions are ordered by id.
pub fn parse_trace<R: Read>(input: R) -> Result<CarbonTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();

    let ingest = |line: usize, msg: String| Error::Ingest { line, msg };
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(ingest(1, e.to_string())),
        None => return Err(ingest(1, "empty file".into())),
    };
    let header_text = header.iter().collect::<Vec<_>>().join(",");
    if header_text != TRACE_HEADER {
        return Err(ingest(1, format!("expected header {TRACE_HEADER:?}, got {header_text:?}")));
    }

    let mut cells: HashMap<(String, i64), (f64, bool)> = HashMap::new();
    let mut first_hour = i64::MAX;
    let mut last_hour = i64::MIN;
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ingest(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(ingest(line, format!("expected 4 fields, got {}", record.len())));
        }
        let ts = parse_timestamp(&record[0]).map_err(|m| ingest(line, m))?;
        let region = record[1].trim();
        if region.is_empty() {
            return Err(ingest(line, "empty region id".into()));
        }
        let intensity: f64 = record[2]
            .trim()
            .parse()
            .map_err(|e| ingest(line, format!("intensity {:?}: {e}", &record[2])))?;
        if !intensity.is_finite() {
            return Err(ingest(line, format!("intensity {intensity} is not finite")));
        }
        if intensity < 0.0 {
            return Err(ingest(line, format!("negative intensity {intensity}")));
        }
        let curtailed = match record[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(ingest(line, format!("curtailed must be 0 or 1, got {other:?}"))),
        };
        let hour = ts.timestamp() / 3600;
        first_hour = first_hour.min(hour);
        last_hour = last_hour.max(hour);
        if cells
            .insert((region.to_string(), hour), (intensity, curtailed))
            .is_some()
        {
            return Err(ingest(
                line,
                format!("duplicate cell for region {region} at {}", ts.to_rfc3339()),
            ));
        }
    }
    if cells.is_empty() {
        return Err(ingest(2, "no data rows".into()));
    }

    let regions: Vec<String> = cells
        .keys()
        .map(|(r, _)| r.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let span = (last_hour - first_hour + 1) as u128;
    let start = Utc
        .timestamp_opt(first_hour * 3600, 0)
        .single()
        .ok_or_else(|| ingest(0, "start timestamp out of range".into()))?;
    if span * regions.len() as u128 != cells.len() as u128 {
        // Cells are unique, so fewer cells than the grid means a gap. Scan in
        // grid order; the first miss comes within `cells.len() + 1` probes.
        for h in first_hour..=last_hour {
            for region in &regions {
                if !cells.contains_key(&(region.clone(), h)) {
                    let ts = Utc.timestamp_opt(h * 3600, 0).single().unwrap_or(start);
                    return Err(Error::Coverage(format!(
                        "missing cell for region {region} at {}",
                        ts.format("%Y-%m-%dT%H:%M:%SZ")
                    )));
                }
            }
        }
    }

    let hours = span as usize;
    let mut intensity = vec![vec![0.0; hours]; regions.len()];
    let mut curtailed = vec![vec![false; hours]; regions.len()];
    let index: BTreeMap<&str, usize> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();
    for ((region, hour), (value, curt)) in &cells {
        let r = index[region.as_str()];
        let h = (hour - first_hour) as usize;
        intensity[r][h] = *value;
        curtailed[r][h] = *curt;
    }
    CarbonTrace::new(regions, start, intensity, curtailed)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<CarbonTrace> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace(std::io::BufReader::new(file))
        .map_err(|e| e.context(format!("loading trace {}", path.display())))
}

/// Parameters for a synthetic trace with diurnal intensity swings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTraceSpec {
    pub regions: usize,
    pub hours: usize,
    pub seed: u64,
    pub curtail_prob: f64,
}

/// First hour of the default trace window, 2023-01-15 00:00 UTC.
pub fn default_trace_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 15, 0, 0, 0)
        .single()
        .expect("valid constant date")
}

/// Per region: a base level in 50..650 g/kWh, a sinusoidal daily swing of
/// 10-50% of the base with random phase, and 5% gaussian jitter, clamped at
/// zero. Each cell is curtailed independently with `curtail_prob`.
pub fn synth_trace(spec: &SynthTraceSpec) -> Result<CarbonTrace> {
    if spec.regions == 0 || spec.hours == 0 {
        return Err(Error::config("synthetic trace needs at least one region and one hour"));
    }
    if !(0.0..=1.0).contains(&spec.curtail_prob) {
        return Err(Error::config(format!(
            "curtail_prob must lie in [0, 1], got {}",
            spec.curtail_prob
        )));
    }
    let mut rng = rng::rng_for(spec.seed, &[tag::TRACE]);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let mut intensity = Vec::with_capacity(spec.regions);
    let mut curtailed = Vec::with_capacity(spec.regions);
    for _ in 0..spec.regions {
        let base: f64 = rng.random_range(50.0..650.0);
        let amplitude = base * rng.random_range(0.1..0.5);
        let phase: f64 = rng.random_range(0.0..24.0);
        let row: Vec<f64> = (0..spec.hours)
            .map(|h| {
                let diurnal = (2.0 * std::f64::consts::PI * (h as f64 + phase) / 24.0).sin();
                (base + amplitude * diurnal + 0.05 * base * jitter.sample(&mut rng)).max(0.0)
            })
            .collect();
        let flags: Vec<bool> = (0..spec.hours)
            .map(|_| rng.random_bool(spec.curtail_prob))
            .collect();
        intensity.push(row);
        curtailed.push(flags);
    }
    let regions = (0..spec.regions).map(|r| format!("R{r:02}")).collect();
    CarbonTrace::new(regions, default_trace_start(), intensity, curtailed)
}

/// Maps every client to a region index of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAssignment {
    regions: Vec<usize>,
}

impl RegionAssignment {
    pub fn from_indices(regions: Vec<usize>, trace: &CarbonTrace) -> Result<Self> {
        if let Some(&bad) = regions.iter().find(|&&r| r >= trace.num_regions()) {
            return Err(Error::config(format!("region index {bad} is not in the trace")));
        }
        Ok(RegionAssignment { regions })
    }

    pub fn region_of(&self, client: usize) -> Result<usize> {
        self.regions
            .get(client)
            .copied()
            .ok_or_else(|| Error::config(format!("client {client} has no region")))
    }

    pub fn num_clients(&self) -> usize {
        self.regions.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.regions
    }
}

/// Round-robin over a seed-shuffled list of the trace's regions.
pub fn assign_regions(num_clients: usize, trace: &CarbonTrace, seed: u64) -> RegionAssignment {
    let mut order: Vec<usize> = (0..trace.num_regions()).collect();
    order.shuffle(&mut rng::rng_for(seed, &[tag::REGIONS]));
    RegionAssignment {
        regions: (0..num_clients).map(|c| order[c % order.len()]).collect(),
    }
}

/// Effective intensity for each client at hour `t`, i.e. its cost to train
/// this round.
pub fn client_costs(assignment: &RegionAssignment, trace: &CarbonTrace, t: usize) -> Result<Vec<f64>> {
    assignment
        .as_slice()
        .iter()
        .map(|&r| Ok(trace.effective_intensity(r, t)? * ENERGY_KWH_PER_ROUND))
        .collect()
}

pub fn round_emissions(
    selected: &[usize],
    assignment: &RegionAssignment,
    trace: &CarbonTrace,
    t: usize,
) -> Result<f64> {
    selected.iter().try_fold(0.0, |acc, &c| {
        let region = assignment.region_of(c)?;
        Ok(acc + trace.effective_intensity(region, t)? * ENERGY_KWH_PER_ROUND)
    })
}

/// Running emissions of one simulation. The probing round is kept apart from
/// training rounds but counts toward the cumulative total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmissionsLedger {
    pub per_round: Vec<f64>,
    pub probing_round_emissions: f64,
    pub cumulative: f64,
}

impl EmissionsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn check(amount: f64) -> Result<()> {
        if !(amount.is_finite() && amount >= 0.0) {
            return Err(Error::Invariant(format!("emissions must be non-negative, got {amount}")));
        }
        Ok(())
    }

    pub fn record_probing(&mut self, grams: f64) -> Result<()> {
        Self::check(grams)?;
        self.probing_round_emissions += grams;
        self.cumulative += grams;
        Ok(())
    }

    pub fn record_round(&mut self, grams: f64) -> Result<()> {
        Self::check(grams)?;
        self.per_round.push(grams);
        self.cumulative += grams;
        Ok(())
    }

    pub fn training_total(&self) -> f64 {
        self.per_round.iter().sum()
    }
}
