//! Two-level mixture sampling: a task group by fixed rate, then a dataset
//! within the group by temperature-scaled size.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::keyed_rng;

/// The eight task groups of the multi-task stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    ImageSynthesis,
    SparseLabelling,
    DenseLabelling,
    ImageClassification,
    ImageCaptioning,
    VisionLanguage,
    Nlp,
    LanguageModelling,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 8] = [
        TaskGroup::ImageSynthesis,
        TaskGroup::SparseLabelling,
        TaskGroup::DenseLabelling,
        TaskGroup::ImageClassification,
        TaskGroup::ImageCaptioning,
        TaskGroup::VisionLanguage,
        TaskGroup::Nlp,
        TaskGroup::LanguageModelling,
    ];
}

/// Synthesis 3/16, dense labelling 1/16, every other group 1/8.
pub fn default_group_rates() -> Vec<(TaskGroup, f64)> {
    TaskGroup::ALL
        .iter()
        .map(|&g| {
            let r = match g {
                TaskGroup::ImageSynthesis => 3.0 / 16.0,
                TaskGroup::DenseLabelling => 1.0 / 16.0,
                _ => 1.0 / 8.0,
            };
            (g, r)
        })
        .collect()
}

/// `size_i^(1/T)`, normalized.
pub fn dataset_weights(sizes: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("dataset_weights needs at least one dataset".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(s) = sizes.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Config(format!("dataset size must be positive, got {s}")));
    }
    let w: Vec<f64> = sizes.iter().map(|s| s.powf(1.0 / temperature)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: String,
    pub rate: f64,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub temperature: f64,
    pub groups: Vec<GroupEntry>,
}

/// One batch slot's draw, as indices into [`MixtureSpec::groups`] and the group's datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub group: usize,
    pub dataset: usize,
}

fn pick(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// A validated [`MixtureSpec`] with precomputed cumulative tables.
#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    group_cum: Vec<f64>,
    dataset_cum: Vec<Vec<f64>>,
    dataset_w: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        if spec.groups.is_empty() {
            return Err(Error::Config("mixture has no groups".into()));
        }
        let total: f64 = spec.groups.iter().map(|g| g.rate).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("group rates sum to {total}, expected 1")));
        }
        if let Some(g) = spec.groups.iter().find(|g| g.rate < 0.0) {
            return Err(Error::Config(format!("group {} has negative rate", g.id)));
        }
        let mut dataset_w = Vec::new();
        for g in &spec.groups {
            let sizes: Vec<f64> = g.datasets.iter().map(|d| d.size).collect();
            dataset_w.push(
                dataset_weights(&sizes, spec.temperature).map_err(|e| Error::Config(format!("group {}: {e}", g.id)))?,
            );
        }
        let rates: Vec<f64> = spec.groups.iter().map(|g| g.rate).collect();
        let group_cum = cumulative(&rates);
        let dataset_cum = dataset_w.iter().map(|w| cumulative(w)).collect();
        Ok(Self { spec, group_cum, dataset_cum, dataset_w })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn dataset_weights(&self, group: usize) -> &[f64] {
        &self.dataset_w[group]
    }

    /// Configured marginal probability of each `(group, dataset)`.
    pub fn marginal(&self, a: Assignment) -> f64 {
        self.spec.groups[a.group].rate * self.dataset_w[a.group][a.dataset]
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Assignment {
        let group = pick(&self.group_cum, rng.random::<f64>());
        let dataset = pick(&self.dataset_cum[group], rng.random::<f64>());
        Assignment { group, dataset }
    }

    /// Draws `batch_size` independent slots; slot `i` uses stream `(seed, step, i)`.
    pub fn sample_batch(&self, batch_size: usize, seed: u64, step: u64) -> Vec<Assignment> {
        par::map_range(batch_size, |i| self.draw(&mut keyed_rng(seed, step, i as u64)))
    }

    pub fn assignment_names(&self, a: Assignment) -> (&str, &str) {
        let g = &self.spec.groups[a.group];
        (&g.id, &g.datasets[a.dataset].id)
    }
}

/// Empirical vs configured rates over a set of draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub draws: usize,
    pub rows: Vec<AuditRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub group: String,
    pub dataset: String,
    pub count: usize,
    pub empirical: f64,
    pub configured: f64,
}

impl Audit {
    pub fn from_draws(mix: &Mixture, draws: &[Assignment]) -> Self {
        let mut rows = Vec::new();
        for (gi, g) in mix.spec.groups.iter().enumerate() {
            for (di, d) in g.datasets.iter().enumerate() {
                let a = Assignment { group: gi, dataset: di };
                let count = draws.iter().filter(|&&x| x == a).count();
                rows.push(AuditRow {
                    group: g.id.clone(),
                    dataset: d.id.clone(),
                    count,
                    empirical: count as f64 / draws.len().max(1) as f64,
                    configured: mix.marginal(a),
                });
            }
        }
        Self { draws: draws.len(), rows }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.rows.iter().map(|r| (r.empirical - r.configured).abs()).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:<26} {:>8} {:>10} {:>10}\n", "group", "dataset", "count", "empirical", "configured");
        for r in &self.rows {
            let _ = writeln!(s, "{:<22} {:<26} {:>8} {:>10.5} {:>10.5}", r.group, r.dataset, r.count, r.empirical, r.configured);
        }
        s
    }
}
