//! Dataset manifests.
//!
//! A manifest lists datasets, each bound to one task and supplying records
//! inline, from a JSONL file, or from a synthetic generator. Loading resolves
//! every record and validates it against the task's builder, so a manifest
//! that loads never fails later inside taskgen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{pnm, read_jsonl, synth};
use crate::error::{Error, Result};
use crate::sampler::{default_group_rates, DatasetEntry, GroupEntry, MixtureSpec, TaskGroup};
use crate::taskgen::{validate_record, Record, TaskId};

pub const MANIFEST_FORMAT: &str = "uio-manifest";
pub const MANIFEST_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    synth::DEFAULT_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub task: TaskId,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_split")]
    pub split: String,
    /// Overrides the record count in mixture weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_size: Option<f64>,
    #[serde(skip)]
    pub records: Vec<Record>,
}

fn default_split() -> String {
    "train".into()
}

impl Dataset {
    pub fn mixture_size(&self) -> f64 {
        self.weight_size.unwrap_or(self.records.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub datasets: Vec<Dataset>,
    /// Dataset temperature for multi-task mixing.
    pub temperature: f64,
    /// Dataset temperature inside each pretraining objective.
    pub pretrain_temperature: f64,
    /// Per-group rates; missing groups fall back to the default rates.
    pub group_rates: BTreeMap<TaskGroup, f64>,
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { pointer: pointer.into(), message: message.into() }
}

fn take<T: serde::de::DeserializeOwned>(v: &Value, pointer: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| schema(pointer, e.to_string()))
}

/// Resolves `image_path` (relative to `base`) into `image`.
fn resolve_image(rec: &mut Record, base: &Path, pointer: &str, id: &str) -> Result<()> {
    if let (None, Some(p)) = (&rec.image, &rec.image_path) {
        let path = base.join(p);
        let r = pnm::read_raster(&path)
            .map_err(|e| schema(format!("{pointer}/image_path"), format!("record {id}: cannot read {}: {e}", path.display())))?;
        rec.image = Some(r);
    }
    Ok(())
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| schema("", format!("not JSON: {e}")))?;
        Self::from_value(&v, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a manifest whose relative paths are resolved against `base`.
    pub fn from_value(v: &Value, base: &Path) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| schema("", "manifest must be an object"))?;
        match obj.get("format").and_then(Value::as_str) {
            Some(MANIFEST_FORMAT) => {}
            _ => return Err(schema("/format", format!("expected \"{MANIFEST_FORMAT}\""))),
        }
        match obj.get("version").and_then(Value::as_u64) {
            Some(MANIFEST_VERSION) => {}
            other => return Err(schema("/version", format!("unsupported version {other:?}, expected {MANIFEST_VERSION}"))),
        }
        let temperature = match obj.get("temperature") {
            Some(t) => take::<f64>(t, "/temperature")?,
            None => 2.0,
        };
        let pretrain_temperature = match obj.get("pretrain_temperature") {
            Some(t) => take::<f64>(t, "/pretrain_temperature")?,
            None => 1.0,
        };
        let group_rates = match obj.get("group_rates") {
            Some(g) => take(g, "/group_rates")?,
            None => BTreeMap::new(),
        };
        let list = obj
            .get("datasets")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("/datasets", "expected an array of datasets"))?;
        let mut datasets = Vec::new();
        for (i, d) in list.iter().enumerate() {
            let dp = format!("/datasets/{i}");
            let mut ds: Dataset = take(d, &dp)?;
            if datasets.iter().any(|o: &Dataset| o.id == ds.id) {
                return Err(schema(format!("{dp}/id"), format!("duplicate dataset id {:?}", ds.id)));
            }
            let sources = ["records", "records_path", "generator"].iter().filter(|k| d.get(**k).is_some()).count();
            if sources != 1 {
                return Err(schema(&dp, "exactly one of records, records_path, generator is required"));
            }
            let (records, rp): (Vec<Record>, String) = if let Some(r) = d.get("records") {
                let arr = r.as_array().ok_or_else(|| schema(format!("{dp}/records"), "expected an array"))?;
                let mut out = Vec::new();
                for (j, x) in arr.iter().enumerate() {
                    out.push(take(x, &format!("{dp}/records/{j}"))?);
                }
                (out, format!("{dp}/records"))
            } else if let Some(p) = d.get("records_path") {
                let p: String = take(p, &format!("{dp}/records_path"))?;
                let recs = read_jsonl(base.join(&p)).map_err(|e| schema(format!("{dp}/records_path"), e.to_string()))?;
                (recs, format!("{dp}/records_path"))
            } else {
                let g: GeneratorSpec = take(&d["generator"], &format!("{dp}/generator"))?;
                let gt = synth::generator_task(&g.name).map_err(|e| schema(format!("{dp}/generator/name"), e.to_string()))?;
                if gt != ds.task {
                    return Err(schema(
                        format!("{dp}/generator/name"),
                        format!("generator {} produces {} records, dataset task is {}", g.name, gt.name(), ds.task.name()),
                    ));
                }
                if ds.classes.is_empty() {
                    ds.classes = synth::generator_classes(&g.name);
                }
                let recs = synth::synth_generate_sized(&g.name, g.count, g.seed, g.size)
                    .map_err(|e| schema(format!("{dp}/generator"), e.to_string()))?;
                (recs, format!("{dp}/generator"))
            };
            ds.records = records;
            for (j, rec) in ds.records.iter_mut().enumerate() {
                let rptr = format!("{rp}/{j}");
                resolve_image(rec, base, &rptr, &format!("{}#{j}", ds.id))?;
                validate_record(ds.task, rec)
                    .map_err(|(f, m)| schema(format!("{rptr}/{f}"), format!("record {}#{j}: {m}", ds.id)))?;
            }
            datasets.push(ds);
        }
        if datasets.is_empty() {
            return Err(schema("/datasets", "manifest lists no datasets"));
        }
        Ok(Self { datasets, temperature, pretrain_temperature, group_rates })
    }

    pub fn dataset(&self, id: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.id == id)
    }

    /// Groups datasets by task group. Rates come from `group_rates`, else the
    /// defaults, and are renormalized over the groups that have data.
    pub fn mixture_spec(&self) -> Result<MixtureSpec> {
        let defaults: BTreeMap<TaskGroup, f64> = default_group_rates().into_iter().collect();
        let mut groups: Vec<(TaskGroup, Vec<DatasetEntry>)> = Vec::new();
        for d in self.datasets.iter().filter(|d| d.split == "train") {
            let g = d.task.group();
            let entry = DatasetEntry { id: d.id.clone(), size: d.mixture_size() };
            match groups.iter_mut().find(|(k, _)| *k == g) {
                Some((_, v)) => v.push(entry),
                None => groups.push((g, vec![entry])),
            }
        }
        if groups.is_empty() {
            return Err(Error::Config("manifest has no train-split datasets".into()));
        }
        let rate = |g: &TaskGroup| self.group_rates.get(g).or(defaults.get(g)).copied().unwrap_or(0.0);
        let total: f64 = groups.iter().map(|(g, _)| rate(g)).sum();
        if !(total > 0.0) {
            return Err(Error::Config("every group with data has rate zero".into()));
        }
        Ok(MixtureSpec {
            temperature: self.temperature,
            groups: groups
                .into_iter()
                .map(|(g, datasets)| GroupEntry {
                    id: serde_json::to_value(g).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    rate: rate(&g) / total,
                    datasets,
                })
                .collect(),
        })
    }
}

/// Convenience for [`Manifest::load`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::load(path)
}

/// Directory holding `path`, for resolving sibling files.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}
