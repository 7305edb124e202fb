use std::collections::BTreeSet;
use std::path::PathBuf;

use schemapro::ingest::DatasetSpec;
use schemapro::schema::{load_taxonomy, validate_schema, SchemaRegistry, Taxonomy};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn registry() -> SchemaRegistry {
    let text = std::fs::read_to_string(configs().join("schemas.jsonl")).unwrap();
    SchemaRegistry::from_jsonl(text.as_bytes()).unwrap()
}

fn taxonomy(name: &str) -> Taxonomy {
    let text = std::fs::read_to_string(configs().join(format!("taxonomy.{name}.json"))).unwrap();
    load_taxonomy(&text, &registry()).unwrap()
}

#[test]
fn shipped_schemas_are_valid() {
    let reg = registry();
    assert_eq!(reg.len(), 33);
    assert!(reg.iter().all(|s| validate_schema(s).is_empty()));
    let dream = reg.get("dream").unwrap();
    assert_eq!(dream.format_name, "multiple_choice_qa");
    assert_eq!(dream.key_set(), ["options", "passage", "question"].map(String::from).into());
}

#[test]
fn main_split() {
    let tax = taxonomy("main");
    assert_eq!(tax.eval_tasks.len(), 16);
    assert!(tax.eval_tasks.contains("dream"));
    assert!(tax.train_tasks.contains("social_iqa"));
}

#[test]
fn out_of_format_split_holds_out_whole_formats() {
    let reg = registry();
    let tax = taxonomy("out_of_format");
    for t in ["rte", "cb", "copa", "hellaswag", "anli_r1"] {
        assert!(tax.eval_tasks.contains(t), "{t}");
    }
    let held: BTreeSet<String> = tax.eval_tasks.iter().map(|t| reg.get(t).unwrap().format_name.clone()).collect();
    assert!(held.is_disjoint(&tax.train_formats(&reg)));
}

#[test]
fn compose_split_eval_keys_are_covered_by_training_keys() {
    let reg = registry();
    let tax = taxonomy("compose");
    let trained: BTreeSet<String> = tax.train_tasks.iter().flat_map(|t| reg.get(t).unwrap().key_set()).collect();
    assert!(!tax.train_formats(&reg).contains("multiple_choice_qa"));
    for t in &tax.eval_tasks {
        let schema = reg.get(t).unwrap();
        assert_eq!(schema.format_name, "multiple_choice_qa");
        assert!(schema.key_set().is_subset(&trained), "{t}");
    }
}

#[test]
fn dataset_specs_parse() {
    let text = std::fs::read_to_string(configs().join("datasets.json")).unwrap();
    let specs: Vec<DatasetSpec> = serde_json::from_str(&text).unwrap();
    assert_eq!(specs.len(), 2 * registry().len());
}
