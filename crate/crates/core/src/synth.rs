//! Small synthetic benchmark with three formats whose key sets compose.
//!
//! * `lookup_qa` (keys `passage`, `question`): the passage holds one word from
//!   each of four categories; the question names a category; the answer is
//!   that category's word.
//! * `topic_classification` (keys `passage`, `options`): most passage words
//!   share a category; the label is that category's name.
//! * `composed_qa` (keys `passage`, `question`, `options`): lookup questions
//!   about categories never queried in `lookup_qa`, answered by picking one
//!   of three passage words.
//!
//! Training tasks are `a1`, `a2` (lookup) and `b1`, `b2` (classification).
//! `b3` is a held-out classification task over a new mix of seen categories;
//! `c1` is the held-out composed task.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::compose::{ComponentValue, SchemaInstance};
use crate::error::Result;
use crate::ingest::{rng_for, DatasetSpec, Split};
use crate::schema::{ComponentDecl, SchemaRegistry, TaskSchema, Taxonomy};
use crate::tokenizer::WordTokenizer;

pub const CATEGORIES: [(&str, [&str; 8]); 6] = [
    ("color", ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"]),
    ("animal", ["cat", "dog", "horse", "sheep", "tiger", "mouse", "eagle", "snake"]),
    ("number", ["one", "two", "three", "four", "five", "six", "seven", "eight"]),
    ("place", ["paris", "tokyo", "cairo", "lima", "oslo", "delhi", "rome", "quito"]),
    ("fruit", ["apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "plum"]),
    ("tool", ["hammer", "saw", "drill", "wrench", "chisel", "pliers", "shovel", "rake"]),
];

pub const LOOKUP: &str = "lookup_qa";
pub const TOPIC: &str = "topic_classification";
pub const COMPOSED: &str = "composed_qa";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Lookup questions about the listed categories.
    Lookup(&'static [usize]),
    /// Topic classification among the listed categories.
    Topic(&'static [usize]),
    /// Composed questions about the listed categories.
    Composed(&'static [usize]),
}

/// `(task, kind)` for every synthetic task.
pub const TASKS: [(&str, Kind); 6] = [
    ("a1", Kind::Lookup(&[0, 1])),
    ("a2", Kind::Lookup(&[2, 3])),
    ("b1", Kind::Topic(&[0, 1, 2])),
    ("b2", Kind::Topic(&[3, 4, 5])),
    ("b3", Kind::Topic(&[0, 3, 4])),
    ("c1", Kind::Composed(&[4, 5])),
];

pub const TRAIN_TASKS: [&str; 4] = ["a1", "a2", "b1", "b2"];
pub const EVAL_TASKS: [&str; 2] = ["b3", "c1"];

pub fn schema_for(task: &str, kind: Kind) -> TaskSchema {
    match kind {
        Kind::Lookup(_) => TaskSchema::new(
            LOOKUP,
            task,
            "answer",
            vec![ComponentDecl::text("passage"), ComponentDecl::text("question")],
        ),
        Kind::Topic(_) => TaskSchema::new(
            TOPIC,
            task,
            "label",
            vec![ComponentDecl::text("passage"), ComponentDecl::list("options")],
        ),
        Kind::Composed(_) => TaskSchema::new(
            COMPOSED,
            task,
            "answer",
            vec![
                ComponentDecl::text("passage"),
                ComponentDecl::text("question"),
                ComponentDecl::list("options"),
            ],
        ),
    }
}

pub fn registry() -> SchemaRegistry {
    let mut reg = SchemaRegistry::new();
    for (task, kind) in TASKS {
        reg.register(schema_for(task, kind)).expect("synthetic schemas are valid");
    }
    reg
}

pub fn taxonomy() -> Taxonomy {
    Taxonomy {
        name: "synthetic".into(),
        train_tasks: TRAIN_TASKS.iter().map(|s| s.to_string()).collect(),
        eval_tasks: EVAL_TASKS.iter().map(|s| s.to_string()).collect(),
    }
}

fn text(s: String) -> ComponentValue {
    ComponentValue::Text(s)
}

/// One word from each of four distinct categories (always including
/// `must`), shuffled; returns the words and their categories.
fn mixed_passage(rng: &mut ChaCha8Rng, must: usize) -> Vec<(usize, &'static str)> {
    let mut cats: Vec<usize> = (0..CATEGORIES.len()).filter(|&c| c != must).collect();
    cats.shuffle(rng);
    cats.truncate(3);
    cats.push(must);
    let mut words: Vec<(usize, &str)> = cats
        .into_iter()
        .map(|c| (c, *CATEGORIES[c].1.choose(rng).expect("non-empty")))
        .collect();
    words.shuffle(rng);
    words
}

fn join(words: &[(usize, &str)]) -> String {
    words.iter().map(|w| w.1).collect::<Vec<_>>().join(" ")
}

pub fn instance(task: &str, kind: Kind, rng: &mut ChaCha8Rng) -> SchemaInstance {
    let mut values = BTreeMap::new();
    let target;
    match kind {
        Kind::Lookup(cats) => {
            let q = *cats.choose(rng).expect("non-empty");
            let words = mixed_passage(rng, q);
            target = words.iter().find(|w| w.0 == q).expect("present").1.to_string();
            values.insert("passage".into(), text(join(&words)));
            values.insert("question".into(), text(format!("which {} ?", CATEGORIES[q].0)));
        }
        Kind::Topic(cats) => {
            let topic = *cats.choose(rng).expect("non-empty");
            let other = *cats
                .iter()
                .filter(|&&c| c != topic)
                .collect::<Vec<_>>()
                .choose(rng)
                .expect("at least two categories");
            let pool = CATEGORIES[topic].1;
            let mut picked: Vec<&str> = pool.choose_multiple(rng, 2).copied().collect();
            picked.push(CATEGORIES[*other].1.choose(rng).expect("non-empty"));
            picked.shuffle(rng);
            let mut options: Vec<String> = cats.iter().map(|&c| CATEGORIES[c].0.to_string()).collect();
            options.shuffle(rng);
            target = CATEGORIES[topic].0.to_string();
            values.insert("passage".into(), text(picked.join(" ")));
            values.insert("options".into(), ComponentValue::List(options));
        }
        Kind::Composed(cats) => {
            let q = *cats.choose(rng).expect("non-empty");
            let words = mixed_passage(rng, q);
            let answer = words.iter().find(|w| w.0 == q).expect("present").1;
            let mut distractors: Vec<&str> = words.iter().filter(|w| w.0 != q).map(|w| w.1).collect();
            distractors.shuffle(rng);
            let mut options: Vec<String> = std::iter::once(answer)
                .chain(distractors.into_iter().take(2))
                .map(String::from)
                .collect();
            options.shuffle(rng);
            target = answer.to_string();
            values.insert("passage".into(), text(join(&words)));
            values.insert("question".into(), text(format!("which {} ?", CATEGORIES[q].0)));
            values.insert("options".into(), ComponentValue::List(options));
        }
    }
    SchemaInstance {
        task_name: task.to_string(),
        values,
        target,
        choices: None,
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_per_task: 2000,
            test_per_task: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub registry: SchemaRegistry,
    pub taxonomy: Taxonomy,
    pub train: BTreeMap<String, Vec<SchemaInstance>>,
    pub test: BTreeMap<String, Vec<SchemaInstance>>,
}

pub fn generate(cfg: &SynthConfig) -> Suite {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (task, kind) in TASKS {
        let mut rng = rng_for(cfg.seed, &format!("synth/{task}"));
        let make = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| instance(task, kind, rng)).collect::<Vec<_>>();
        train.insert(task.to_string(), make(cfg.train_per_task, &mut rng));
        test.insert(task.to_string(), make(cfg.test_per_task, &mut rng));
    }
    Suite {
        registry: registry(),
        taxonomy: taxonomy(),
        train,
        test,
    }
}

/// Vocabulary covering every word the suite can produce.
pub fn tokenizer() -> WordTokenizer {
    let mut texts: Vec<String> = CATEGORIES
        .iter()
        .map(|(name, words)| format!("{name} {}", words.join(" ")))
        .collect();
    texts.push("which ?".into());
    WordTokenizer::fit(texts.iter().map(String::as_str), 1000)
}

impl Suite {
    /// Writes schemas, taxonomy, dataset specs and JSON-lines data under
    /// `dir`; returns the dataset specs (paths relative to `dir`).
    pub fn write_to(&self, dir: &Path) -> Result<Vec<DatasetSpec>> {
        std::fs::create_dir_all(dir.join("data"))?;
        std::fs::write(dir.join("schemas.jsonl"), self.registry.to_jsonl())?;
        std::fs::write(dir.join("taxonomy.json"), self.taxonomy.to_json())?;
        let mut specs = Vec::new();
        for (split, sets) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            let tag = if split == Split::Train { "train" } else { "test" };
            for (task, records) in sets {
                let rel = Path::new("data").join(format!("{task}.{tag}.jsonl"));
                let mut body = String::new();
                for r in records {
                    let mut obj = serde_json::Map::new();
                    for (k, v) in &r.values {
                        obj.insert(k.clone(), serde_json::to_value(v)?);
                    }
                    obj.insert("target".into(), r.target.clone().into());
                    body.push_str(&serde_json::Value::Object(obj).to_string());
                    body.push('\n');
                }
                std::fs::write(dir.join(&rel), body)?;
                specs.push(DatasetSpec {
                    task_name: task.clone(),
                    path: rel,
                    split,
                    declared_size: Some(records.len()),
                });
            }
        }
        std::fs::write(dir.join("datasets.json"), serde_json::to_string_pretty(&specs)? + "\n")?;
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;

    #[test]
    fn instances_are_consistent() {
        let suite = generate(&SynthConfig {
            train_per_task: 50,
            test_per_task: 10,
            seed: 3,
        });
        let tok = tokenizer();
        assert!(tok.vocab_size() <= 200);
        for (task, records) in suite.train.iter().chain(&suite.test) {
            let schema = suite.registry.get(task).unwrap();
            for r in records {
                r.check(schema).unwrap();
                if let Some(opts) = r.options(schema) {
                    assert_eq!(opts.len(), 3);
                    assert!(opts.contains(&r.target));
                }
                for v in r.values.values() {
                    let s = match v {
                        ComponentValue::Text(t) => t.clone(),
                        ComponentValue::List(l) => l.join(" "),
                    };
                    assert!(tok.encode(&s).iter().all(|&id| id != crate::tokenizer::UNK));
                }
            }
        }
        suite.taxonomy.check(&suite.registry).unwrap();
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig {
            train_per_task: 5,
            test_per_task: 5,
            seed: 1,
        };
        assert_eq!(generate(&cfg).train, generate(&cfg).train);
        let other = generate(&SynthConfig { seed: 2, ..cfg });
        assert_ne!(other.train, generate(&cfg).train);
    }
}
