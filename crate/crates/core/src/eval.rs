//! Metrics, option ranking, zero-shot preparation and result reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compose::{AblationConfig, SchemaInstance};
use crate::error::{Error, Result};
use crate::harness::{required_groups, Checkpoint, Encoder};
use crate::par::Exec;
use crate::prompts::{GroupId, Role};
use crate::schema::{TaskSchema, ATTRIBUTE_KEYS};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ZeroShot,
    FewShot,
    FullData,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::ZeroShot => "Zero-shot",
            Setting::FewShot => "Few-shot",
            Setting::FullData => "Full-data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Em,
    RougeL,
    Accuracy,
}

impl Metric {
    /// Metric a task is scored with: accuracy whenever there are options to
    /// rank, Rouge-L for free-form generation formats, exact match otherwise
    /// (extractive QA).
    pub fn for_task(schema: &TaskSchema, has_choices: bool) -> Metric {
        let format = schema.format_name.to_ascii_lowercase();
        if schema.has_options() || has_choices {
            Metric::Accuracy
        } else if format.contains("summar") || format.contains("generat") {
            Metric::RougeL
        } else {
            Metric::Em
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Em => "em",
            Metric::RougeL => "rouge_l",
            Metric::Accuracy => "accuracy",
        })
    }
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 when the normalized prediction equals any normalized gold.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level LCS F-measure.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    let lcs = lcs_len(&p, &g);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionScore {
    pub option_index: usize,
    pub log_likelihood: f64,
    /// Scored decoder positions (option tokens plus end-of-sequence).
    pub length: usize,
}

impl OptionScore {
    pub fn value(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_likelihood / self.length.max(1) as f64
        } else {
            self.log_likelihood
        }
    }
}

/// Index of the highest score, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn rank_options(scores: &[OptionScore], length_normalize: bool) -> Result<usize> {
    if scores.len() < 2 {
        return Err(Error::EmptyOptions(scores.len()));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.value(length_normalize)).collect();
    let best = argmax_first(&values).expect("non-empty");
    Ok(scores[best].option_index)
}

/// Scores every option with `scorer` (returning one log-likelihood per
/// candidate target) and picks the best one.
pub fn rank_with<F>(scorer: F, options: &[Vec<u32>], length_normalize: bool) -> Result<usize>
where
    F: FnOnce(&[Vec<u32>]) -> Result<Vec<f64>>,
{
    if options.len() < 2 {
        return Err(Error::EmptyOptions(options.len()));
    }
    let lls = scorer(options)?;
    let scores: Vec<OptionScore> = lls
        .into_iter()
        .zip(options)
        .enumerate()
        .map(|(i, (ll, o))| OptionScore {
            option_index: i,
            log_likelihood: ll,
            length: o.len() + 1,
        })
        .collect();
    rank_options(&scores, length_normalize)
}

/// What [`prepare_zero_shot`] did to the prompt table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub reused: Vec<GroupId>,
    /// Newly initialized groups. The task-value group is expected here; any
    /// other entry is a component never seen in training.
    pub created: Vec<GroupId>,
}

impl ZeroShotReport {
    /// Created groups other than the task's own value prompt.
    pub fn unseen(&self) -> Vec<&GroupId> {
        self.created.iter().filter(|g| g.role != Role::TaskValue).collect()
    }
}

/// Reloads every pre-trained group the task uses and randomly initializes
/// whatever is missing (normally only the task-value prompt).
pub fn prepare_zero_shot(ckpt: &Checkpoint, schema: &TaskSchema) -> Result<(Checkpoint, ZeroShotReport)> {
    prepare_zero_shot_with(ckpt, schema, ckpt.ablation)
}

pub fn prepare_zero_shot_with(
    ckpt: &Checkpoint,
    schema: &TaskSchema,
    ablation: AblationConfig,
) -> Result<(Checkpoint, ZeroShotReport)> {
    let mut out = ckpt.clone();
    let mut report = ZeroShotReport::default();
    let attribute_keys: BTreeSet<GroupId> = ATTRIBUTE_KEYS.iter().map(|k| GroupId::key(*k)).collect();
    for id in required_groups(schema, ablation) {
        if out.table.contains(&id) {
            report.reused.push(id);
        } else if attribute_keys.contains(&id) {
            return Err(Error::MissingGroup(id));
        } else {
            out.table.ensure(&id);
            if id.role != Role::TaskValue {
                log::warn!("{}: component {id} was not seen in training; using a fresh init", schema.task_name);
            }
            report.created.push(id);
        }
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_name: String,
    pub setting: Setting,
    pub metric: Metric,
    pub value: f64,
    pub n_examples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecodeOptions {
    pub length_normalize: bool,
    pub max_new_tokens: Option<usize>,
}

/// Per-example scores in `[0, 1]`, in record order.
pub fn score_examples(
    ckpt: &Checkpoint,
    encoder: &Encoder<'_>,
    schema: &TaskSchema,
    records: &[SchemaInstance],
    metric: Metric,
    opts: DecodeOptions,
    exec: Exec,
) -> Result<Vec<f64>> {
    let tokenizer: &dyn Tokenizer = encoder.tokenizer;
    let one = |r: &SchemaInstance| -> Result<f64> {
        let inputs = encoder.eval_inputs(&ckpt.table, r)?;
        let mut total = 0.0;
        for input in &inputs {
            total += match metric {
                Metric::Accuracy => {
                    let options = r.options(schema).unwrap_or_default();
                    let ids: Vec<Vec<u32>> = options.iter().map(|o| encoder.target_tokens(o)).collect();
                    let chosen = rank_with(
                        |t| ckpt.model.score_targets(&ckpt.table, input, t),
                        &ids,
                        opts.length_normalize,
                    )?;
                    f64::from(u8::from(normalize_answer(&options[chosen]) == normalize_answer(&r.target)))
                }
                Metric::Em | Metric::RougeL => {
                    let max_new = opts
                        .max_new_tokens
                        .unwrap_or_else(|| encoder.target_tokens(&r.target).len() + 8);
                    let ids = ckpt.model.generate(&ckpt.table, input, max_new)?;
                    let text = tokenizer.decode(&ids);
                    if metric == Metric::Em {
                        exact_match(&text, &[&r.target])
                    } else {
                        rouge_l(&text, &r.target)
                    }
                }
            };
        }
        Ok(total / inputs.len() as f64)
    };
    exec.map(records, one).into_iter().collect()
}

/// Mean metric over `records` (greedy decoding for generation metrics,
/// option ranking for accuracy).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    ckpt: &Checkpoint,
    encoder: &Encoder<'_>,
    task: &str,
    records: &[SchemaInstance],
    setting: Setting,
    metric: Option<Metric>,
    opts: DecodeOptions,
    seed: u64,
    exec: Exec,
) -> Result<EvalResult> {
    let schema = encoder.registry.get(task)?;
    let has_choices = records.iter().any(|r| r.choices.is_some());
    let expected = Metric::for_task(schema, has_choices);
    let metric = metric.unwrap_or(expected);
    if metric != expected {
        return Err(Error::MetricMismatch {
            task: task.to_string(),
            format: schema.format_name.clone(),
            metric: metric.to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidConfig(format!("no evaluation records for `{task}`")));
    }
    let scores = score_examples(ckpt, encoder, schema, records, metric, opts, exec)?;
    Ok(EvalResult {
        task_name: task.to_string(),
        setting,
        metric,
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        n_examples: scores.len(),
        seed,
        variant: None,
        config_hash: None,
    })
}

pub fn results_to_jsonl(results: &[EvalResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect()
}

pub fn results_from_jsonl(text: &str) -> Result<Vec<EvalResult>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn median_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(median(&mut values.to_vec()))
    }
}

/// Task-by-setting table of scores ×100 (mean over seeds) with an average
/// row; one column group per variant.
pub fn render_table(results: &[EvalResult]) -> String {
    let mut cells: BTreeMap<(String, Setting), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut tasks: Vec<&str> = Vec::new();
    let mut columns: BTreeSet<(String, Setting)> = BTreeSet::new();
    let mut seeds: BTreeSet<u64> = BTreeSet::new();
    let mut hashes: BTreeSet<&str> = BTreeSet::new();
    for r in results {
        let variant = r.variant.clone().unwrap_or_default();
        columns.insert((variant.clone(), r.setting));
        cells
            .entry((variant, r.setting))
            .or_default()
            .entry(&r.task_name)
            .or_default()
            .push(r.value);
        if !tasks.contains(&r.task_name.as_str()) {
            tasks.push(&r.task_name);
        }
        seeds.insert(r.seed);
        if let Some(h) = &r.config_hash {
            hashes.insert(h);
        }
    }
    let headers: Vec<String> = columns
        .iter()
        .map(|(v, s)| if v.is_empty() { s.label().to_string() } else { format!("{v} {}", s.label()) })
        .collect();
    let width = tasks.iter().map(|t| t.len()).max().unwrap_or(4).max(7);
    let mut out = String::new();
    if !hashes.is_empty() {
        let _ = writeln!(out, "config: {}", hashes.into_iter().collect::<Vec<_>>().join(", "));
    }
    let _ = writeln!(
        out,
        "seeds: {}",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    let _ = write!(out, "| {:width$} |", "Task");
    for h in &headers {
        let _ = write!(out, " {h:>12} |");
    }
    out.push('\n');
    let _ = write!(out, "|{}|", "-".repeat(width + 2));
    for _ in &headers {
        let _ = write!(out, "{}:|", "-".repeat(13));
    }
    out.push('\n');
    let mut sums = vec![(0.0, 0usize); columns.len()];
    for task in &tasks {
        let _ = write!(out, "| {task:width$} |");
        for (i, col) in columns.iter().enumerate() {
            match cells.get(col).and_then(|c| c.get(task)) {
                Some(vals) => {
                    let mean = 100.0 * vals.iter().sum::<f64>() / vals.len() as f64;
                    sums[i].0 += mean;
                    sums[i].1 += 1;
                    let _ = write!(out, " {mean:>12.2} |");
                }
                None => {
                    let _ = write!(out, " {:>12} |", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "| {:width$} |", "Average");
    for (sum, n) in sums {
        if n == 0 {
            let _ = write!(out, " {:>12} |", "-");
        } else {
            let _ = write!(out, " {:>12.2} |", sum / n as f64);
        }
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ComponentDecl;

    #[test]
    fn exact_match_normalization() {
        assert_eq!(exact_match("The Eiffel Tower", &["eiffel tower"]), 1.0);
        assert_eq!(exact_match("Paris", &["London"]), 0.0);
        assert_eq!(exact_match("paris!", &["London", "Paris"]), 1.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        let f = rouge_l("a b c d", "a c");
        assert!((f - 2.0 * 0.5 * 1.0 / 1.5).abs() < 1e-12);
    }

    fn scores(v: &[f64]) -> Vec<OptionScore> {
        v.iter()
            .enumerate()
            .map(|(i, &s)| OptionScore {
                option_index: i,
                log_likelihood: s,
                length: 1 + i,
            })
            .collect()
    }

    #[test]
    fn ranking() {
        assert_eq!(rank_options(&scores(&[-3.2, -1.1, -7.0]), false).unwrap(), 1);
        assert_eq!(rank_options(&scores(&[-2.0, -2.0]), false).unwrap(), 0);
        assert!(matches!(rank_options(&scores(&[-1.0]), false), Err(Error::EmptyOptions(1))));
        // -4/3 beats -2/1 once normalized by length
        assert_eq!(rank_options(&scores(&[-2.0, -3.0, -4.0]), true).unwrap(), 2);
    }

    #[test]
    fn metric_policy() {
        let mc = TaskSchema::new(
            "multiple_choice_qa",
            "dream",
            "answer",
            vec![ComponentDecl::text("passage"), ComponentDecl::list("options")],
        );
        let ex = TaskSchema::new("extractive_qa", "ropes", "answer", vec![ComponentDecl::text("passage")]);
        let sum = TaskSchema::new("summarization", "xsum", "summary", vec![ComponentDecl::text("passage")]);
        assert_eq!(Metric::for_task(&mc, false), Metric::Accuracy);
        assert_eq!(Metric::for_task(&ex, false), Metric::Em);
        assert_eq!(Metric::for_task(&ex, true), Metric::Accuracy);
        assert_eq!(Metric::for_task(&sum, false), Metric::RougeL);
    }

    #[test]
    fn table_has_average_row() {
        let r = |task: &str, setting, value, seed| EvalResult {
            task_name: task.into(),
            setting,
            metric: Metric::Accuracy,
            value,
            n_examples: 4,
            seed,
            variant: None,
            config_hash: Some("abc".into()),
        };
        let table = render_table(&[
            r("dream", Setting::ZeroShot, 0.5, 1),
            r("dream", Setting::ZeroShot, 0.7, 2),
            r("rte", Setting::ZeroShot, 0.25, 1),
            r("dream", Setting::FewShot, 0.75, 1),
        ]);
        assert!(table.contains("config: abc"));
        let dream = table.lines().find(|l| l.starts_with("| dream")).unwrap();
        assert!(dream.contains("60.00") && dream.contains("75.00"));
        let avg = table.lines().find(|l| l.starts_with("| Average")).unwrap();
        assert!(avg.contains("42.50"), "{avg}");
        let back = results_from_jsonl(&results_to_jsonl(&[r("x", Setting::FullData, 1.0, 3)])).unwrap();
        assert_eq!(back[0].setting, Setting::FullData);
        assert_eq!(median_of(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }
}
