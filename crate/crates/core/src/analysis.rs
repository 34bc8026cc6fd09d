//! Per-run metrics, batch aggregation and CSV export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::record::tags;
use crate::engine::ModelManifest;
use crate::scenario::{BindingSet, Side};
use crate::{canonical, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reducer", rename_all = "snake_case")]
pub enum Reducer {
    /// Number of records carrying the tag.
    CountByTag { tag: String },
    /// Simulation time of the first record carrying the tag.
    TimeOfFirst { tag: String },
    /// Numeric payload value at the agent's last record that has the key.
    FinalValue { agent_id: String, key: String },
    /// Agents of the side alive in the final step's status records.
    SurvivalCount { side: Side },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    #[serde(flatten)]
    pub reducer: Reducer,
}

/// Streaming evaluation of one metric over a run's records in log order.
#[derive(Debug, Clone)]
pub struct MetricAccumulator<'a> {
    spec: &'a MetricSpec,
    count: u64,
    value: Option<f64>,
    malformed: bool,
    final_step: Option<u64>,
    survivors: u64,
}

impl<'a> MetricAccumulator<'a> {
    pub fn new(spec: &'a MetricSpec) -> Self {
        Self { spec, count: 0, value: None, malformed: false, final_step: None, survivors: 0 }
    }

    pub fn feed(&mut self, r: &StepRecord) {
        match &self.spec.reducer {
            Reducer::CountByTag { tag } => self.count += u64::from(r.tag == *tag),
            Reducer::TimeOfFirst { tag } => {
                if self.value.is_none() && r.tag == *tag {
                    self.value = Some(r.sim_time);
                }
            }
            Reducer::FinalValue { agent_id, key } => {
                if r.agent_id == *agent_id {
                    if let Some(v) = r.payload.get(key) {
                        match v.as_f64() {
                            Some(x) => {
                                self.value = Some(x);
                                self.malformed = false;
                            }
                            None => self.malformed = true,
                        }
                    }
                }
            }
            Reducer::SurvivalCount { side } => {
                if r.tag != tags::STATUS {
                    return;
                }
                if self.final_step != Some(r.step) {
                    self.final_step = Some(r.step);
                    self.survivors = 0;
                }
                let alive = r.payload.get("alive").and_then(|v| v.as_bool());
                let of_side = r.payload.get("side").and_then(|v| v.as_str());
                match (alive, of_side) {
                    (Some(alive), Some(s)) => self.survivors += u64::from(alive && s == side.as_str()),
                    _ => self.malformed = true,
                }
            }
        }
    }

    /// The metric value, or `None` when undefined for this run.
    pub fn finish(self) -> Option<f64> {
        if self.malformed {
            tracing::warn!(metric = %self.spec.name, "malformed record; metric undefined");
            return None;
        }
        match self.spec.reducer {
            Reducer::CountByTag { .. } => Some(self.count as f64),
            Reducer::TimeOfFirst { .. } | Reducer::FinalValue { .. } => self.value,
            Reducer::SurvivalCount { .. } => self.final_step.map(|_| self.survivors as f64),
        }
    }
}

pub fn compute_metric(records: &[StepRecord], spec: &MetricSpec) -> Option<f64> {
    let mut acc = MetricAccumulator::new(spec);
    records.iter().for_each(|r| acc.feed(r));
    acc.finish()
}

/// Evaluates several metrics in one pass over a record stream.
pub fn compute_metrics<I>(records: I, specs: &[MetricSpec]) -> BTreeMap<String, Option<f64>>
where
    I: IntoIterator<Item = StepRecord>,
{
    let mut accs: Vec<_> = specs.iter().map(MetricAccumulator::new).collect();
    for r in records {
        accs.iter_mut().for_each(|a| a.feed(&r));
    }
    specs.iter().zip(accs).map(|(s, a)| (s.name.clone(), a.finish())).collect()
}

/// One message per metric that references a tag or key no model declares.
pub fn check_metrics<'a>(specs: &[MetricSpec], manifests: impl IntoIterator<Item = &'a ModelManifest>) -> Vec<String> {
    let mut tag_names: BTreeSet<&str> = tags::ENGINE.iter().copied().collect();
    let mut keys: BTreeSet<&str> =
        ["x", "y", "z", "speed_mps", "heading_rad", "alive", "side", "reason", "target_id"].into_iter().collect();
    for m in manifests {
        for t in &m.emitted_tags {
            tag_names.insert(&t.tag);
            keys.extend(t.payload.iter().map(String::as_str));
        }
    }
    specs
        .iter()
        .filter_map(|s| match &s.reducer {
            Reducer::CountByTag { tag } | Reducer::TimeOfFirst { tag } if !tag_names.contains(tag.as_str()) => {
                Some(format!("metric `{}`: no model emits tag `{tag}`", s.name))
            }
            Reducer::FinalValue { key, .. } if !keys.contains(key.as_str()) => {
                Some(format!("metric `{}`: no model emits payload key `{key}`", s.name))
            }
            _ => None,
        })
        .collect()
}

/// Descriptive statistics of one metric across a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Runs with a defined value.
    pub n: u64,
    /// Runs where the metric was undefined.
    pub undefined: u64,
    pub mean: Option<f64>,
    /// Sample standard deviation (n − 1 denominator).
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Normal-approximation interval `mean ± 1.96·std/√n`.
    pub ci95: Option<[f64; 2]>,
}

/// One-pass (Welford) summary of the defined values.
pub fn aggregate(values: &[Option<f64>]) -> MetricSummary {
    let (mut n, mut mean, mut m2) = (0u64, 0.0, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in values.iter().flatten().copied() {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
        min = min.min(x);
        max = max.max(x);
    }
    let std = (n >= 2).then(|| (m2 / (n - 1) as f64).sqrt());
    let defined = n > 0;
    MetricSummary {
        n,
        undefined: values.len() as u64 - n,
        mean: defined.then_some(mean),
        std,
        min: defined.then_some(min),
        max: defined.then_some(max),
        ci95: std.map(|s| {
            let half = 1.96 * s / (n as f64).sqrt();
            [mean - half, mean + half]
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_index: u64,
    pub run_id: String,
    pub bindings: BindingSet,
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: String,
    pub metric_specs: Vec<MetricSpec>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub runs: Vec<RunRow>,
    pub warnings: Vec<String>,
}

/// Aggregates every metric over the per-run table (rows sorted by run index).
pub fn summarize(batch_id: &str, specs: &[MetricSpec], mut runs: Vec<RunRow>, warnings: Vec<String>) -> BatchSummary {
    runs.sort_by_key(|r| r.run_index);
    let metrics = specs
        .iter()
        .map(|s| {
            let values: Vec<Option<f64>> = runs.iter().map(|r| r.metrics.get(&s.name).copied().flatten()).collect();
            (s.name.clone(), aggregate(&values))
        })
        .collect();
    BatchSummary { batch_id: batch_id.to_owned(), metric_specs: specs.to_vec(), metrics, runs, warnings }
}

/// Catalog id under which an analysis of `batch_id` with these metrics is stored.
pub fn analysis_id(batch_id: &str, specs: &[MetricSpec]) -> String {
    format!("{batch_id}-{:016x}", crate::canonical::fnv1a64(&canonical::to_vec(specs)))
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => u.to_string(),
            (_, Some(i), _) => i.to_string(),
            (_, _, Some(f)) => f.to_string(),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => canonical::to_string(other),
    }
}

/// Writes the per-run table: `run_index`, binding columns sorted by name,
/// then metric columns sorted by name. Undefined values are empty cells.
pub fn write_runs_csv<W: Write>(runs: &[RunRow], out: W) -> csv::Result<()> {
    let bindings: BTreeSet<&str> = runs.iter().flat_map(|r| r.bindings.keys().map(String::as_str)).collect();
    let metrics: BTreeSet<&str> = runs.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(out);
    let header = std::iter::once("run_index").chain(bindings.iter().copied()).chain(metrics.iter().copied());
    w.write_record(header)?;
    for r in runs {
        let row = std::iter::once(r.run_index.to_string())
            .chain(bindings.iter().map(|b| r.bindings.get(*b).map(cell).unwrap_or_default()))
            .chain(
                metrics.iter().map(|m| r.metrics.get(*m).copied().flatten().map(|x| x.to_string()).unwrap_or_default()),
            );
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per metric with its summary statistics.
pub fn write_summary_csv<W: Write>(summary: &BatchSummary, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "n", "undefined", "mean", "std", "min", "max", "ci95_lo", "ci95_hi"])?;
    let num = |x: Option<f64>| x.map(|x| x.to_string()).unwrap_or_default();
    for (name, m) in &summary.metrics {
        w.write_record([
            name.clone(),
            m.n.to_string(),
            m.undefined.to_string(),
            num(m.mean),
            num(m.std),
            num(m.min),
            num(m.max),
            num(m.ci95.map(|c| c[0])),
            num(m.ci95.map(|c| c[1])),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(runs: &[RunRow], path: &Path) -> std::io::Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_runs_csv(runs, file).map_err(std::io::Error::other)
}
