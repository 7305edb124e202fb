//! Dataset reading, per-dataset capping, mixture construction, few-shot
//! sampling, and the natural-language template baselines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::{ComponentValue, SchemaInstance};
use crate::error::{Error, Result};
use crate::schema::{SchemaRegistry, TaskSchema, Taxonomy};
use crate::tokenizer::Tokenizer;

/// Per-dataset training cap.
pub const DEFAULT_CAP: usize = 700_000;
/// Few-shot sample size.
pub const DEFAULT_SHOTS: usize = 32;
/// Largest number of NL templates per task for the multi-template baseline.
pub const MAX_TEMPLATES: usize = 3;

/// Independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(rename = "task")]
    pub task_name: String,
    pub path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_size: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ReadReport {
    pub records: Vec<SchemaInstance>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Parses one JSON line against `schema`. Unknown fields are ignored.
pub fn parse_record(line: &str, schema: &TaskSchema) -> Option<SchemaInstance> {
    let serde_json::Value::Object(mut obj) = serde_json::from_str(line).ok()? else {
        return None;
    };
    let target = match obj.remove("target")? {
        serde_json::Value::String(s) => s,
        _ => return None,
    };
    let choices = match obj.remove("choices") {
        None => None,
        Some(v) => Some(serde_json::from_value::<Vec<String>>(v).ok()?),
    };
    let mut values = BTreeMap::new();
    for decl in &schema.components {
        let value: ComponentValue = serde_json::from_value(obj.remove(&decl.key)?).ok()?;
        values.insert(decl.key.clone(), value);
    }
    let instance = SchemaInstance {
        task_name: schema.task_name.clone(),
        values,
        target,
        choices,
    };
    instance.check(schema).ok()?;
    Some(instance)
}

/// Streams instances from a JSON-lines reader, counting lines it had to
/// skip.
pub struct RecordReader<'s, R> {
    lines: std::io::Lines<R>,
    schema: &'s TaskSchema,
    path: PathBuf,
    skipped: usize,
}

impl<'s, R: BufRead> RecordReader<'s, R> {
    pub fn new(reader: R, schema: &'s TaskSchema, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: reader.lines(),
            schema,
            path: path.into(),
            skipped: 0,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for RecordReader<'_, R> {
    type Item = Result<SchemaInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                    return Some(Err(Error::EncodingError {
                        path: self.path.clone(),
                        reason: e.to_string(),
                    }))
                }
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            match parse_record(&line, self.schema) {
                Some(instance) => return Some(Ok(instance)),
                None => self.skipped += 1,
            }
        }
    }
}

pub fn read_records(spec: &DatasetSpec, schema: &TaskSchema) -> Result<ReadReport> {
    read_records_at(spec, schema, Path::new("."))
}

/// Like [`read_records`], resolving relative spec paths against `base`.
pub fn read_records_at(spec: &DatasetSpec, schema: &TaskSchema, base: &Path) -> Result<ReadReport> {
    let path = base.join(&spec.path);
    let file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.clone()),
        _ => e.into(),
    })?;
    let mut reader = RecordReader::new(BufReader::new(file), schema, &path);
    let records = reader.by_ref().collect::<Result<Vec<_>>>()?;
    let mut report = ReadReport {
        skipped: reader.skipped(),
        records,
        warnings: Vec::new(),
    };
    if report.skipped > 0 {
        report.warnings.push(format!(
            "{}: skipped {} malformed line(s)",
            path.display(),
            report.skipped
        ));
    }
    if let Some(declared) = spec.declared_size {
        if declared != report.records.len() {
            report.warnings.push(format!(
                "{}: declared {} records, found {}",
                path.display(),
                declared,
                report.records.len()
            ));
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

/// Sorted indices of a uniform random subset of size `cap`, or `None` when
/// `n ≤ cap` (keep everything).
pub fn cap_indices(n: usize, cap: usize, seed: u64) -> Option<Vec<usize>> {
    assert!(cap >= 1, "cap must be >= 1");
    if n <= cap {
        return None;
    }
    let mut rng = rng_for(seed, "cap");
    let mut picked = index::sample(&mut rng, n, cap).into_vec();
    picked.sort_unstable();
    Some(picked)
}

/// Keeps at most `cap` records, chosen uniformly at random (file order is
/// preserved among the kept ones).
pub fn cap_dataset<T>(records: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    match cap_indices(records.len(), cap, seed) {
        None => records,
        Some(keep) => {
            let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
            keep.into_iter()
                .map(|i| slots[i].take().expect("indices are distinct"))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub task: String,
    /// Records available before capping.
    pub available: usize,
    pub count: usize,
    /// Indices of kept records; absent when every record is kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub cap: usize,
    pub seed: u64,
    pub entries: Vec<MixtureEntry>,
}

impl MixtureManifest {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Pools the kept records of every entry, in manifest order.
    pub fn materialize(&self, records: &BTreeMap<String, Vec<SchemaInstance>>) -> Result<Vec<SchemaInstance>> {
        let mut pool = Vec::with_capacity(self.total());
        for entry in &self.entries {
            let all = records
                .get(&entry.task)
                .ok_or_else(|| Error::MissingSpec(entry.task.clone()))?;
            if all.len() != entry.available {
                return Err(Error::InvalidConfig(format!(
                    "manifest expects {} records for `{}`, found {}",
                    entry.available,
                    entry.task,
                    all.len()
                )));
            }
            match &entry.selected {
                None => pool.extend(all.iter().cloned()),
                Some(ids) => pool.extend(ids.iter().map(|&i| all[i].clone())),
            }
        }
        Ok(pool)
    }
}

/// Finds the training-split spec of `task`.
pub fn train_spec<'a>(specs: &'a [DatasetSpec], task: &str) -> Option<&'a DatasetSpec> {
    specs
        .iter()
        .find(|s| s.task_name == task && s.split == Split::Train)
}

/// Capped mixture over the taxonomy's training tasks, given each task's
/// record count.
pub fn build_mixture_from_counts(
    taxonomy: &Taxonomy,
    counts: &BTreeMap<String, usize>,
    cap: usize,
    seed: u64,
) -> Result<MixtureManifest> {
    let mut entries = Vec::with_capacity(taxonomy.train_tasks.len());
    for task in &taxonomy.train_tasks {
        let available = *counts
            .get(task)
            .ok_or_else(|| Error::MissingSpec(task.clone()))?;
        let selected = cap_indices(available, cap, derive_seed(seed, task));
        entries.push(MixtureEntry {
            task: task.clone(),
            available,
            count: available.min(cap),
            selected,
        });
    }
    Ok(MixtureManifest { cap, seed, entries })
}

/// Reads every training dataset and builds the capped mixture.
pub fn build_mixture(
    taxonomy: &Taxonomy,
    specs: &[DatasetSpec],
    registry: &SchemaRegistry,
    base: &Path,
    cap: usize,
    seed: u64,
) -> Result<(MixtureManifest, BTreeMap<String, Vec<SchemaInstance>>)> {
    let mut records = BTreeMap::new();
    for task in &taxonomy.train_tasks {
        let spec = train_spec(specs, task).ok_or_else(|| Error::MissingSpec(task.clone()))?;
        let schema = registry.get(task)?;
        records.insert(task.clone(), read_records_at(spec, schema, base)?.records);
    }
    let counts = records.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let manifest = build_mixture_from_counts(taxonomy, &counts, cap, seed)?;
    Ok((manifest, records))
}

#[derive(Debug, Clone)]
pub struct FewShot {
    pub shots: Vec<SchemaInstance>,
    pub warning: Option<String>,
}

/// `k` records sampled uniformly without replacement; all records (with a
/// warning) when fewer than `k` exist.
pub fn few_shot_sample(records: &[SchemaInstance], k: usize, seed: u64) -> FewShot {
    if records.len() <= k {
        let warning = (records.len() < k).then(|| {
            format!(
                "requested {k} shots but only {} records are available",
                records.len()
            )
        });
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        return FewShot {
            shots: records.to_vec(),
            warning,
        };
    }
    let mut rng = rng_for(seed, "few_shot");
    let picked = index::sample(&mut rng, records.len(), k);
    FewShot {
        shots: picked.iter().map(|i| records[i].clone()).collect(),
        warning: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NLPromptTemplate {
    #[serde(rename = "task")]
    pub task_name: String,
    #[serde(rename = "template")]
    pub template_text: String,
    #[serde(default = "default_target_template")]
    pub target_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_choices: Option<Vec<String>>,
}

fn default_target_template() -> String {
    "{target}".into()
}

/// `{name}` placeholders of a template, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name.to_string());
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn interpolate(template: &str, lookup: impl Fn(&str) -> Option<String>, task: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let name = &after[..close];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push('{');
            rest = after;
            continue;
        }
        let value = lookup(name).ok_or_else(|| Error::UnresolvedPlaceholder {
            task: task.to_string(),
            placeholder: name.to_string(),
        })?;
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl NLPromptTemplate {
    /// Placeholder names that are not components of `schema`.
    pub fn unresolved(&self, schema: &TaskSchema) -> Vec<String> {
        placeholders(&self.template_text)
            .into_iter()
            .filter(|p| schema.component(p).is_none())
            .chain(
                placeholders(&self.target_template)
                    .into_iter()
                    .filter(|p| p != "target" && schema.component(p).is_none()),
            )
            .collect()
    }

    /// Interpolated `(input, target)` text.
    pub fn render(&self, instance: &SchemaInstance) -> Result<(String, String)> {
        let lookup = |name: &str| -> Option<String> {
            match instance.values.get(name)? {
                ComponentValue::Text(t) => Some(t.clone()),
                ComponentValue::List(items) => Some(items.join(", ")),
            }
        };
        let input = interpolate(&self.template_text, lookup, &instance.task_name)?;
        let target = interpolate(
            &self.target_template,
            |name| {
                if name == "target" {
                    Some(instance.target.clone())
                } else {
                    lookup(name)
                }
            },
            &instance.task_name,
        )?;
        Ok((input, target))
    }
}

/// Tokenized `(input, target)` of an instance under an NL template.
pub fn apply_nl_template(
    instance: &SchemaInstance,
    template: &NLPromptTemplate,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let (input, target) = template.render(instance)?;
    Ok((tokenizer.encode(&input), tokenizer.encode(&target)))
}

/// Randomly partitions `records` into one near-equal part per template
/// (sizes differ by at most one); every record lands in exactly one part.
pub fn split_for_multi_prompt<T: Clone>(
    records: &[T],
    templates: &[NLPromptTemplate],
    seed: u64,
    max_templates: usize,
) -> Result<Vec<(Vec<T>, NLPromptTemplate)>> {
    if templates.is_empty() {
        return Err(Error::InvalidConfig("at least one template is required".into()));
    }
    if templates.len() > max_templates {
        return Err(Error::TooManyTemplates {
            count: templates.len(),
            max: max_templates,
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if templates.len() > 1 {
        order.shuffle(&mut rng_for(seed, "multi_prompt"));
    }
    let parts = templates.len();
    let base = records.len() / parts;
    let extra = records.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for (i, template) in templates.iter().enumerate() {
        let size = base + usize::from(i < extra);
        let part = order[start..start + size]
            .iter()
            .map(|&j| records[j].clone())
            .collect();
        out.push((part, template.clone()));
        start += size;
    }
    Ok(out)
}
