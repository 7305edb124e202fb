//! Task schemas, the registry that holds them, and train/eval taxonomies.
//!
//! A [`TaskSchema`] names the three task attributes (format, task, output)
//! and lists the general components in the order they are composed. The
//! attribute components themselves are never listed; the composer
//! synthesizes them from the three names.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key names reserved for the task-attribute components.
pub const ATTRIBUTE_KEYS: [&str; 3] = ["format", "task", "output"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    SingleText,
    TextList,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentDecl {
    pub key: String,
    #[serde(rename = "kind")]
    pub value_kind: ValueKind,
}

impl ComponentDecl {
    pub fn text(key: &str) -> Self {
        Self {
            key: key.to_string(),
            value_kind: ValueKind::SingleText,
        }
    }

    pub fn list(key: &str) -> Self {
        Self {
            key: key.to_string(),
            value_kind: ValueKind::TextList,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSchema {
    #[serde(rename = "format")]
    pub format_name: String,
    #[serde(rename = "task")]
    pub task_name: String,
    #[serde(rename = "output")]
    pub output_name: String,
    #[serde(default)]
    pub components: Vec<ComponentDecl>,
}

impl TaskSchema {
    pub fn new(format: &str, task: &str, output: &str, components: Vec<ComponentDecl>) -> Self {
        Self {
            format_name: format.to_string(),
            task_name: task.to_string(),
            output_name: output.to_string(),
            components,
        }
    }

    pub fn component(&self, key: &str) -> Option<&ComponentDecl> {
        self.components.iter().find(|c| c.key == key)
    }

    pub fn key_set(&self) -> BTreeSet<String> {
        self.components.iter().map(|c| c.key.clone()).collect()
    }

    pub fn has_options(&self) -> bool {
        self.components
            .iter()
            .any(|c| c.value_kind == ValueKind::TextList)
    }
}

fn is_identifier(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// Every violated invariant of `schema`; empty means valid.
pub fn validate_schema(schema: &TaskSchema) -> Vec<String> {
    let mut violations = Vec::new();
    for (field, value) in [
        ("format_name", &schema.format_name),
        ("task_name", &schema.task_name),
        ("output_name", &schema.output_name),
    ] {
        if value.trim().is_empty() {
            violations.push(format!("empty {field}"));
        }
    }
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for decl in &schema.components {
        if !is_identifier(&decl.key) {
            violations.push(format!("malformed key: {:?}", decl.key));
        }
        if ATTRIBUTE_KEYS.contains(&decl.key.as_str()) {
            violations.push(format!("reserved key: {}", decl.key));
        }
        if !seen.insert(decl.key.as_str()) && reported.insert(decl.key.as_str()) {
            violations.push(format!("duplicate key: {}", decl.key));
        }
    }
    violations
}

/// Set union of the general component keys of two schemas.
pub fn key_union(a: &TaskSchema, b: &TaskSchema) -> BTreeSet<String> {
    a.key_set().union(&b.key_set()).cloned().collect()
}

#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, TaskSchema>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: TaskSchema) -> Result<&TaskSchema> {
        let violations = validate_schema(&schema);
        if !violations.is_empty() {
            return Err(Error::InvalidSchema {
                task: schema.task_name,
                violations,
            });
        }
        if let Some(existing) = self.schemas.get(&schema.task_name) {
            if *existing != schema {
                return Err(Error::DuplicateTask(schema.task_name));
            }
        }
        let name = schema.task_name.clone();
        Ok(self.schemas.entry(name).or_insert(schema))
    }

    pub fn get(&self, task: &str) -> Result<&TaskSchema> {
        self.schemas
            .get(task)
            .ok_or_else(|| Error::UnknownSchema(task.to_string()))
    }

    pub fn contains(&self, task: &str) -> bool {
        self.schemas.contains_key(task)
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSchema> {
        self.schemas.values()
    }

    /// Key union of two registered schemas, by task name.
    pub fn key_union(&self, a: &str, b: &str) -> Result<BTreeSet<String>> {
        Ok(key_union(self.get(a)?, self.get(b)?))
    }

    /// Reads one schema per non-blank line.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut registry = Self::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let schema: TaskSchema = serde_json::from_str(&line)?;
            registry.register(schema)?;
        }
        Ok(registry)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for schema in self.schemas.values() {
            out.push_str(&serde_json::to_string(schema).expect("schema serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub name: String,
    pub train_tasks: BTreeSet<String>,
    pub eval_tasks: BTreeSet<String>,
}

impl Taxonomy {
    pub fn check(&self, registry: &SchemaRegistry) -> Result<()> {
        if let Some(task) = self.train_tasks.intersection(&self.eval_tasks).next() {
            return Err(Error::OverlapError(task.clone()));
        }
        for task in self.train_tasks.iter().chain(&self.eval_tasks) {
            if !registry.contains(task) {
                return Err(Error::UnknownTask(task.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    /// Formats covered by the training tasks.
    pub fn train_formats(&self, registry: &SchemaRegistry) -> BTreeSet<String> {
        self.train_tasks
            .iter()
            .filter_map(|t| registry.get(t).ok())
            .map(|s| s.format_name.clone())
            .collect()
    }
}

/// Parses a taxonomy document and checks it against `registry`.
pub fn load_taxonomy(source: &str, registry: &SchemaRegistry) -> Result<Taxonomy> {
    let taxonomy: Taxonomy = serde_json::from_str(source)?;
    taxonomy.check(registry)?;
    Ok(taxonomy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dream() -> TaskSchema {
        TaskSchema::new(
            "multiple_choice_qa",
            "dream",
            "answer",
            vec![
                ComponentDecl::text("passage"),
                ComponentDecl::text("question"),
                ComponentDecl::list("options"),
            ],
        )
    }

    #[test]
    fn registers_dream_and_is_idempotent() {
        let mut reg = SchemaRegistry::new();
        reg.register(dream()).unwrap();
        reg.register(dream()).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.get("dream").unwrap().components.len(), 3);
    }

    #[test]
    fn attribute_only_schema_is_valid() {
        let mut reg = SchemaRegistry::new();
        reg.register(TaskSchema::new("f", "t", "o", vec![])).unwrap();
        assert!(reg.get("t").unwrap().components.is_empty());
    }

    #[test]
    fn conflicting_reregistration_fails() {
        let mut reg = SchemaRegistry::new();
        reg.register(dream()).unwrap();
        let mut other = dream();
        other.output_name = "label".into();
        assert!(matches!(reg.register(other), Err(Error::DuplicateTask(t)) if t == "dream"));
    }

    #[test]
    fn validation_reports_every_violation() {
        let dup = TaskSchema::new(
            "f",
            "t",
            "o",
            vec![ComponentDecl::text("passage"), ComponentDecl::text("passage")],
        );
        assert_eq!(validate_schema(&dup), vec!["duplicate key: passage"]);

        let nli = TaskSchema::new(
            "nli",
            "rte",
            "label",
            vec![ComponentDecl::text("premise"), ComponentDecl::text("hypothesis")],
        );
        assert!(validate_schema(&nli).is_empty());

        let empty_format = TaskSchema::new("", "t", "o", vec![]);
        assert_eq!(validate_schema(&empty_format), vec!["empty format_name"]);

        let many = TaskSchema::new(
            "",
            " ",
            "o",
            vec![ComponentDecl::text("Bad"), ComponentDecl::text("task")],
        );
        assert_eq!(validate_schema(&many).len(), 4);
    }

    #[test]
    fn key_union_examples() {
        let a = TaskSchema::new(
            "extractive_qa",
            "a",
            "answer",
            vec![ComponentDecl::text("passage"), ComponentDecl::text("question")],
        );
        let b = TaskSchema::new(
            "classification",
            "b",
            "label",
            vec![ComponentDecl::text("passage"), ComponentDecl::list("options")],
        );
        let u: Vec<_> = key_union(&a, &b).into_iter().collect();
        assert_eq!(u, ["options", "passage", "question"]);
        assert_eq!(key_union(&a, &a), a.key_set());
        let empty = TaskSchema::new("f", "e", "o", vec![]);
        let nli = TaskSchema::new(
            "nli",
            "n",
            "label",
            vec![ComponentDecl::text("premise"), ComponentDecl::text("hypothesis")],
        );
        assert_eq!(key_union(&empty, &nli), nli.key_set());

        let mut reg = SchemaRegistry::new();
        reg.register(a).unwrap();
        assert!(matches!(reg.key_union("a", "zzz"), Err(Error::UnknownSchema(_))));
    }

    #[test]
    fn jsonl_field_names() {
        let line = r#"{"format":"multiple_choice_qa","task":"dream","output":"answer","components":[{"key":"passage","kind":"single_text"},{"key":"question","kind":"single_text"},{"key":"options","kind":"text_list"}]}"#;
        let reg = SchemaRegistry::from_jsonl(line.as_bytes()).unwrap();
        assert_eq!(reg.get("dream").unwrap(), &dream());
        assert_eq!(reg.to_jsonl().trim(), line);
    }

    fn registry_with(tasks: &[&str]) -> SchemaRegistry {
        let mut reg = SchemaRegistry::new();
        for t in tasks {
            reg.register(TaskSchema::new("f", t, "o", vec![])).unwrap();
        }
        reg
    }

    #[test]
    fn taxonomies_load_and_reject_overlap() {
        let reg = registry_with(&["dream", "social_iqa", "rte", "cb", "copa", "hellaswag", "anli"]);
        let main = r#"{"name":"main","train_tasks":["social_iqa"],"eval_tasks":["dream"]}"#;
        let t = load_taxonomy(main, &reg).unwrap();
        assert!(t.eval_tasks.contains("dream"));
        assert!(t.train_tasks.contains("social_iqa"));

        let oof = r#"{"name":"out_of_format","train_tasks":["dream","social_iqa"],
            "eval_tasks":["rte","cb","copa","hellaswag","anli"]}"#;
        assert_eq!(load_taxonomy(oof, &reg).unwrap().eval_tasks.len(), 5);

        let overlap = r#"{"name":"x","train_tasks":["dream"],"eval_tasks":["dream"]}"#;
        assert!(matches!(load_taxonomy(overlap, &reg), Err(Error::OverlapError(_))));
        let unknown = r#"{"name":"x","train_tasks":["nope"],"eval_tasks":[]}"#;
        assert!(matches!(load_taxonomy(unknown, &reg), Err(Error::UnknownTask(_))));
    }
}
