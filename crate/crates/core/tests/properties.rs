use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::sample::subsequence;

use schemapro::compose::{compose, truncate, AblationConfig, ComponentValue, SchemaInstance, Segment};
use schemapro::eval::{exact_match, rank_options, rouge_l, OptionScore};
use schemapro::ingest::{cap_indices, few_shot_sample, parse_record, split_for_multi_prompt, NLPromptTemplate};
use schemapro::prompts::{GroupId, InitConfig, PromptTable, Role};
use schemapro::schema::{key_union, load_taxonomy, validate_schema, ComponentDecl, SchemaRegistry, TaskSchema, Taxonomy};
use schemapro::tokenizer::WordTokenizer;

const KEYS: [&str; 8] = ["passage", "question", "options", "premise", "hypothesis", "context", "summary", "title"];
const WORDS: [&str; 8] = ["red", "blue", "cat", "dog", "one", "two", "sun", "moon"];

fn words(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..=max).prop_map(|w| w.join(" "))
}

fn schema_strategy() -> impl Strategy<Value = TaskSchema> {
    (
        subsequence(&KEYS[..], 1..=5),
        prop::collection::vec(any::<bool>(), 5),
        "[a-z][a-z0-9_]{0,8}",
        "[a-z][a-z0-9_]{0,8}",
        prop::sample::select(&["answer", "label", "summary"][..]),
    )
        .prop_map(|(keys, lists, format, task, output)| {
            let decls = keys
                .iter()
                .zip(lists)
                .map(|(k, l)| if l { ComponentDecl::list(k) } else { ComponentDecl::text(k) })
                .collect();
            TaskSchema::new(&format, &task, output, decls)
        })
}

fn pair_strategy() -> impl Strategy<Value = (TaskSchema, SchemaInstance)> {
    schema_strategy().prop_flat_map(|schema| {
        let values: Vec<BoxedStrategy<ComponentValue>> = schema
            .components
            .iter()
            .map(|d| {
                if d.value_kind == schemapro::schema::ValueKind::TextList {
                    prop::collection::vec(words(3), 1..=4).prop_map(ComponentValue::List).boxed()
                } else {
                    words(10).prop_map(ComponentValue::Text).boxed()
                }
            })
            .collect();
        (Just(schema), values, words(3))
    })
    .prop_map(|(schema, values, target)| {
        let values = schema
            .components
            .iter()
            .map(|d| d.key.clone())
            .zip(values)
            .collect();
        let inst = SchemaInstance {
            task_name: schema.task_name.clone(),
            values,
            target,
            choices: None,
        };
        (schema, inst)
    })
}

fn ablation_strategy() -> impl Strategy<Value = AblationConfig> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(f, t, k)| AblationConfig {
        include_format: f,
        include_task: t,
        include_keys: k,
    })
}

fn tok() -> WordTokenizer {
    WordTokenizer::fit(WORDS, 100)
}

fn slots(segments: &[Segment]) -> Vec<Segment> {
    segments.iter().filter(|s| s.is_slot()).cloned().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_schemas_validate_and_register(schema in schema_strategy()) {
        prop_assert!(validate_schema(&schema).is_empty());
        let mut reg = SchemaRegistry::new();
        reg.register(schema.clone()).unwrap();
        let back = SchemaRegistry::from_jsonl(reg.to_jsonl().as_bytes()).unwrap();
        prop_assert_eq!(back.get(&schema.task_name).unwrap(), &schema);
    }

    #[test]
    fn key_union_laws(a in schema_strategy(), b in schema_strategy(), c in schema_strategy()) {
        prop_assert_eq!(key_union(&a, &b), key_union(&b, &a));
        prop_assert_eq!(key_union(&a, &a), a.key_set());
        let ab: BTreeSet<String> = key_union(&a, &b);
        let left: BTreeSet<String> = ab.union(&c.key_set()).cloned().collect();
        let bc = key_union(&b, &c);
        let right: BTreeSet<String> = a.key_set().union(&bc).cloned().collect();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn taxonomy_round_trip(names in prop::collection::btree_set("[a-z]{1,6}", 2..10), cut in 1usize..9) {
        let names: Vec<String> = names.into_iter().collect();
        let cut = cut.min(names.len() - 1);
        let mut reg = SchemaRegistry::new();
        for n in &names {
            reg.register(TaskSchema::new("qa", n, "answer", vec![ComponentDecl::text("question")])).unwrap();
        }
        let tax = Taxonomy {
            name: "t".into(),
            train_tasks: names[..cut].iter().cloned().collect(),
            eval_tasks: names[cut..].iter().cloned().collect(),
        };
        prop_assert_eq!(load_taxonomy(&tax.to_json(), &reg).unwrap(), tax);
    }

    #[test]
    fn compose_ignores_record_field_order((schema, inst) in pair_strategy(), ab in ablation_strategy(), rot in 0usize..8) {
        let layout = InitConfig::default();
        let expected = compose(&inst, &schema, ab, &tok(), &layout, 10_000).unwrap();
        let mut fields: Vec<(String, serde_json::Value)> = inst
            .values
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap()))
            .collect();
        fields.push(("target".into(), inst.target.clone().into()));
        let n = fields.len();
        fields.rotate_left(rot % n);
        fields.reverse();
        let body = fields
            .iter()
            .map(|(k, v)| format!("{}:{v}", serde_json::Value::from(k.as_str())))
            .collect::<Vec<_>>()
            .join(",");
        let reparsed = parse_record(&format!("{{{body}}}"), &schema).unwrap();
        prop_assert_eq!(compose(&reparsed, &schema, ab, &tok(), &layout, 10_000).unwrap(), expected);
    }

    #[test]
    fn truncation_keeps_slots_in_order((schema, inst) in pair_strategy(), ab in ablation_strategy(), slack in 0usize..40) {
        let layout = InitConfig::default();
        let full = compose(&inst, &schema, ab, &tok(), &layout, 10_000).unwrap();
        let max_len = full.slot_len() + slack;
        let cut = truncate(&full, max_len).unwrap();
        prop_assert!(cut.total_len() <= max_len);
        prop_assert_eq!(slots(&cut.segments), slots(&full.segments));
        prop_assert_eq!(&cut.alignment, &full.alignment);
        for (a, b) in cut.segments.iter().zip(&full.segments) {
            if let (Segment::Text { ids: x }, Segment::Text { ids: y }) = (a, b) {
                prop_assert!(y.starts_with(x));
            }
        }
    }

    #[test]
    fn prompt_groups_are_isolated(seed in any::<u64>(), row in 0usize..5, col in 0usize..8, delta in -1.0f64..1.0) {
        let mut table = PromptTable::new(8, InitConfig { seed, ..InitConfig::default() }).unwrap();
        let ids = [GroupId::key("passage"), GroupId::key("question"), GroupId::new(Role::TaskValue, "t")];
        for id in &ids {
            table.ensure(id);
        }
        let before: Vec<_> = ids.iter().map(|id| table.group_checksum(id)).collect();
        table.get_mut(&ids[0]).unwrap().values[[row, col]] += delta + 2.0;
        prop_assert_ne!(table.group_checksum(&ids[0]), before[0]);
        for (id, b) in ids.iter().zip(&before).skip(1) {
            prop_assert_eq!(&table.group_checksum(id), b);
        }
        for g in table.groups() {
            prop_assert_eq!(g.values.dim(), (table.config().length_for(g.id.role), 8));
        }
    }

    #[test]
    fn multi_prompt_split_partitions(n in 0usize..300, parts in 1usize..=3, seed in any::<u64>()) {
        let records: Vec<usize> = (0..n).collect();
        let templates: Vec<NLPromptTemplate> = (0..parts)
            .map(|i| NLPromptTemplate {
                task_name: "t".into(),
                template_text: format!("{i} {{passage}}"),
                target_template: "{target}".into(),
                answer_choices: None,
            })
            .collect();
        let split = split_for_multi_prompt(&records, &templates, seed, 3).unwrap();
        let sizes: Vec<usize> = split.iter().map(|p| p.0.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = split.into_iter().flat_map(|p| p.0).collect();
        all.sort_unstable();
        prop_assert_eq!(all, records);
    }

    #[test]
    fn cap_is_deterministic_and_bounded(n in 0usize..2000, cap in 1usize..500, seed in any::<u64>()) {
        let a = cap_indices(n, cap, seed);
        prop_assert_eq!(&a, &cap_indices(n, cap, seed));
        match a {
            None => prop_assert!(n <= cap),
            Some(idx) => {
                prop_assert_eq!(idx.len(), cap);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < n));
            }
        }
    }

    #[test]
    fn few_shot_degrades_gracefully(n in 0usize..60, k in 1usize..40, seed in any::<u64>()) {
        let records: Vec<SchemaInstance> = (0..n)
            .map(|i| SchemaInstance {
                task_name: "t".into(),
                values: BTreeMap::new(),
                target: i.to_string(),
                choices: None,
            })
            .collect();
        let fs = few_shot_sample(&records, k, seed);
        prop_assert_eq!(fs.shots.len(), n.min(k));
        prop_assert_eq!(fs.warning.is_some(), n < k);
        let distinct: BTreeSet<&str> = fs.shots.iter().map(|r| r.target.as_str()).collect();
        prop_assert_eq!(distinct.len(), fs.shots.len());
    }

    #[test]
    fn rouge_bounds_and_identity(a in words(12), b in words(12)) {
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, rouge_l(&b, &a));
    }

    #[test]
    fn exact_match_reflexive_and_symmetric(a in "[A-Za-z .,!]{0,20}", b in "[A-Za-z .,!]{0,20}") {
        prop_assert_eq!(exact_match(&a, &[&a]), 1.0);
        prop_assert_eq!(exact_match(&a, &[&b]), exact_match(&b, &[&a]));
    }

    #[test]
    fn ranking_invariant_under_increasing_maps(lls in prop::collection::vec(-20.0f64..0.0, 2..10), c in -100.0f64..100.0, s in 0.1f64..10.0) {
        let make = |f: &dyn Fn(f64) -> f64| -> Vec<OptionScore> {
            lls.iter()
                .enumerate()
                .map(|(i, &l)| OptionScore { option_index: i, log_likelihood: f(l), length: 1 })
                .collect()
        };
        let base = rank_options(&make(&|x| x), false).unwrap();
        prop_assert_eq!(rank_options(&make(&|x| x.exp()), false).unwrap(), base);
        prop_assert_eq!(rank_options(&make(&|x| x * x * x), false).unwrap(), base);
        prop_assert_eq!(rank_options(&make(&|x| s * x + c), false).unwrap(), base);
    }
}
