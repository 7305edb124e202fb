//! Declarative experiment configuration and the end-to-end pipelines the
//! command-line tool runs.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::{AblationConfig, ComponentValue, SchemaInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate_task, prepare_zero_shot, DecodeOptions, EvalResult, Metric, Setting};
use crate::harness::{
    adapt_few_shot, fine_tune_full, train_multitask, Checkpoint, Encoder, Mode, TrainConfig, TrainLog,
};
use crate::ingest::{
    build_mixture_from_counts, derive_seed, few_shot_sample, read_records_at, DatasetSpec, MixtureManifest,
    NLPromptTemplate, Split, DEFAULT_CAP, DEFAULT_SHOTS,
};
use crate::nn::{Backbone, ModelConfig};
use crate::par::Exec;
use crate::prompts::{InitConfig, PromptTable};
use crate::schema::{load_taxonomy, SchemaRegistry, Taxonomy};
use crate::tokenizer::{Tokenizer, WordTokenizer};

/// Backbone shape; the vocabulary size comes from the fitted tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
}

fn default_backbone() -> Backbone {
    Backbone::ToyTransformer
}

impl Default for ModelShape {
    fn default() -> Self {
        let toy = ModelConfig::toy(0);
        Self {
            embed_dim: toy.embed_dim,
            num_layers: toy.num_layers,
            num_heads: toy.num_heads,
            ff_dim: toy.ff_dim,
            max_len: toy.max_len,
            backbone: toy.backbone,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            backbone: self.backbone,
        }
    }
}

/// Prompt lengths; the table seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptShape {
    pub key_length: usize,
    pub format_length: usize,
    pub task_length: usize,
    pub output_length: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.02
}

impl Default for PromptShape {
    fn default() -> Self {
        let d = InitConfig::default();
        Self {
            key_length: d.key_length,
            format_length: d.format_length,
            task_length: d.task_length,
            output_length: d.output_length,
            init_scale: d.init_scale,
        }
    }
}

impl PromptShape {
    pub fn init_config(&self, seed: u64) -> InitConfig {
        InitConfig {
            key_length: self.key_length,
            format_length: self.format_length,
            task_length: self.task_length,
            output_length: self.output_length,
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub taxonomy: PathBuf,
    pub schemas: PathBuf,
    /// JSON array of dataset specs.
    pub datasets: PathBuf,
    /// JSON lines of NL templates (required by the `nlpro_*` modes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub prompts: PromptShape,
    #[serde(default = "default_pretrain")]
    pub pretrain: String,
    #[serde(default = "default_fewshot")]
    pub fewshot: String,
    #[serde(default = "default_finetune")]
    pub finetune: String,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_pretrain() -> String {
    "pretrain_b1".into()
}
fn default_fewshot() -> String {
    "fewshot_b3".into()
}
fn default_finetune() -> String {
    "toy".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_cap() -> usize {
    DEFAULT_CAP
}
fn default_k() -> usize {
    DEFAULT_SHOTS
}
fn default_max_vocab() -> usize {
    1000
}

/// Loaded configuration plus every file it references.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub registry: SchemaRegistry,
    pub taxonomy: Taxonomy,
    pub templates: BTreeMap<String, Vec<NLPromptTemplate>>,
    /// Records by `(task, split)`.
    pub data: BTreeMap<(String, Split), Vec<SchemaInstance>>,
    /// Short hex digest of the canonical configuration.
    pub hash: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

pub fn load_templates(text: &str) -> Result<BTreeMap<String, Vec<NLPromptTemplate>>> {
    let mut out: BTreeMap<String, Vec<NLPromptTemplate>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t: NLPromptTemplate = serde_json::from_str(line)?;
        out.entry(t.task_name.clone()).or_default().push(t);
    }
    Ok(out)
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(&read_file(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base)
    }

    /// Resolves the paths in `config` against `base` and reads everything.
    pub fn from_config(config: ExperimentConfig, base: &Path) -> Result<Self> {
        let schemas = resolve(base, &config.schemas);
        let registry = SchemaRegistry::from_jsonl(BufReader::new(
            std::fs::File::open(&schemas).map_err(|_| Error::FileNotFound(schemas.clone()))?,
        ))?;
        let taxonomy = load_taxonomy(&read_file(&resolve(base, &config.taxonomy))?, &registry)?;
        let specs: Vec<DatasetSpec> = serde_json::from_str(&read_file(&resolve(base, &config.datasets))?)?;
        let data_base = resolve(base, &config.datasets);
        let data_base = data_base.parent().unwrap_or(base);
        let mut data = BTreeMap::new();
        for spec in &specs {
            if !taxonomy.train_tasks.contains(&spec.task_name) && !taxonomy.eval_tasks.contains(&spec.task_name) {
                continue;
            }
            let schema = registry.get(&spec.task_name)?;
            let report = read_records_at(spec, schema, data_base)?;
            data.insert((spec.task_name.clone(), spec.split), report.records);
        }
        let templates = match &config.templates {
            Some(p) => load_templates(&read_file(&resolve(base, p))?)?,
            None => BTreeMap::new(),
        };
        if config.mode != Mode::Schemapro && templates.is_empty() {
            return Err(Error::InvalidConfig(
                "nlpro modes need a `templates` file".into(),
            ));
        }
        Self::assemble(config, registry, taxonomy, templates, data)
    }

    /// Builds an experiment from in-memory parts.
    pub fn assemble(
        config: ExperimentConfig,
        registry: SchemaRegistry,
        taxonomy: Taxonomy,
        templates: BTreeMap<String, Vec<NLPromptTemplate>>,
        data: BTreeMap<(String, Split), Vec<SchemaInstance>>,
    ) -> Result<Self> {
        taxonomy.check(&registry)?;
        TrainConfig::resolve(&config.pretrain)?;
        TrainConfig::resolve(&config.fewshot)?;
        TrainConfig::resolve(&config.finetune)?;
        let canonical = serde_json::to_vec(&config)?;
        let digest = Sha256::digest(&canonical);
        let hash = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            config,
            registry,
            taxonomy,
            templates,
            data,
            hash,
        })
    }

    pub fn records(&self, task: &str, split: Split) -> Option<&[SchemaInstance]> {
        self.data.get(&(task.to_string(), split)).map(Vec::as_slice)
    }

    pub fn train_records(&self, task: &str) -> Result<&[SchemaInstance]> {
        self.records(task, Split::Train)
            .ok_or_else(|| Error::MissingSpec(task.to_string()))
    }

    /// Validation split when present, otherwise test.
    pub fn eval_records(&self, task: &str) -> Result<&[SchemaInstance]> {
        self.records(task, Split::Validation)
            .or_else(|| self.records(task, Split::Test))
            .ok_or_else(|| Error::MissingSpec(task.to_string()))
    }

    pub fn build_mixture(&self, cap: usize, seed: u64) -> Result<MixtureManifest> {
        let mut counts = BTreeMap::new();
        for task in &self.taxonomy.train_tasks {
            if let Some(r) = self.records(task, Split::Train) {
                counts.insert(task.clone(), r.len());
            }
        }
        build_mixture_from_counts(&self.taxonomy, &counts, cap, seed)
    }

    pub fn mixture_records(&self, manifest: &MixtureManifest) -> Result<Vec<SchemaInstance>> {
        let mut by_task = BTreeMap::new();
        for e in &manifest.entries {
            by_task.insert(e.task.clone(), self.train_records(&e.task)?.to_vec());
        }
        manifest.materialize(&by_task)
    }

    /// Vocabulary fitted on every text field of the training split, plus the
    /// option strings and targets of the evaluation tasks' training data
    /// when present.
    pub fn tokenizer(&self) -> WordTokenizer {
        let mut texts: Vec<&str> = Vec::new();
        for ((task, split), records) in &self.data {
            let is_train_task = self.taxonomy.train_tasks.contains(task);
            if *split != Split::Train && !is_train_task {
                continue;
            }
            for r in records {
                texts.push(&r.target);
                for v in r.values.values() {
                    match v {
                        ComponentValue::Text(t) => texts.push(t),
                        ComponentValue::List(items) => texts.extend(items.iter().map(String::as_str)),
                    }
                }
                if let Some(c) = &r.choices {
                    texts.extend(c.iter().map(String::as_str));
                }
            }
        }
        for ts in self.templates.values() {
            for t in ts {
                texts.push(&t.template_text);
                texts.push(&t.target_template);
            }
        }
        WordTokenizer::fit(texts, self.config.max_vocab)
    }

    pub fn encoder<'a>(&'a self, tokenizer: &'a dyn Tokenizer, ablation: AblationConfig) -> Encoder<'a> {
        Encoder {
            registry: &self.registry,
            tokenizer,
            mode: self.config.mode,
            ablation,
            templates: &self.templates,
            max_len: self.config.model.max_len,
        }
    }

    pub fn init_checkpoint(&self, seed: u64, ablation: AblationConfig) -> Result<Checkpoint> {
        let tokenizer = self.tokenizer();
        let table = PromptTable::new(
            self.config.model.embed_dim,
            self.config.prompts.init_config(derive_seed(seed, "prompts")),
        )?;
        Checkpoint::init(
            self.config.model.with_vocab(tokenizer.vocab_size()),
            table,
            tokenizer,
            ablation,
            self.config.mode,
            derive_seed(seed, "model"),
        )
    }

    /// Multi-task pre-training on the capped mixture.
    pub fn pretrain(
        &self,
        seed: u64,
        ablation: AblationConfig,
        train: &TrainConfig,
        exec: Exec,
    ) -> Result<(Checkpoint, TrainLog, MixtureManifest)> {
        let manifest = self.build_mixture(self.config.cap, seed)?;
        let records = self.mixture_records(&manifest)?;
        let mut ckpt = self.init_checkpoint(seed, ablation)?;
        let tokenizer = ckpt.tokenizer.clone();
        let encoder = self.encoder(&tokenizer, ablation);
        let examples = encoder.training_examples(&mut ckpt.table, &records, seed)?;
        let cfg = TrainConfig { seed, ..train.clone() };
        let (ckpt, log) = if cfg.total_updates(examples.len()) == 0 {
            (ckpt, TrainLog::default())
        } else {
            train_multitask(ckpt, &examples, &cfg, exec)?
        };
        Ok((ckpt, log, manifest))
    }

    fn check_ablation(&self, ckpt: &Checkpoint, ablation: AblationConfig) -> Result<()> {
        if ckpt.ablation != ablation {
            return Err(Error::AblationMismatch {
                found: ckpt.ablation.label(),
                requested: ablation.label(),
            });
        }
        Ok(())
    }

    fn stamp(&self, mut r: EvalResult, variant: Option<String>) -> EvalResult {
        r.config_hash = Some(self.hash.clone());
        r.variant = variant;
        r
    }

    /// Zero-shot evaluation of `task` (fresh task prompt if it was not trained).
    pub fn zero_shot(
        &self,
        ckpt: &Checkpoint,
        task: &str,
        metric: Option<Metric>,
        opts: DecodeOptions,
        seed: u64,
        exec: Exec,
    ) -> Result<EvalResult> {
        let schema = self.registry.get(task)?;
        let ready = if ckpt.mode == Mode::Schemapro {
            prepare_zero_shot(ckpt, schema)?.0
        } else {
            ckpt.clone()
        };
        let encoder = self.encoder(&ready.tokenizer, ready.ablation);
        let r = evaluate_task(
            &ready,
            &encoder,
            task,
            self.eval_records(task)?,
            Setting::ZeroShot,
            metric,
            opts,
            seed,
            exec,
        )?;
        Ok(self.stamp(r, None))
    }

    /// Few-shot adaptation on `k` sampled training records, then evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn few_shot(
        &self,
        ckpt: &Checkpoint,
        task: &str,
        k: usize,
        cfg: &TrainConfig,
        metric: Option<Metric>,
        opts: DecodeOptions,
        seed: u64,
        exec: Exec,
    ) -> Result<(EvalResult, TrainLog)> {
        let shots = few_shot_sample(self.train_records(task)?, k, derive_seed(seed, task)).shots;
        let encoder = self.encoder(&ckpt.tokenizer, ckpt.ablation);
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let (adapted, log) = adapt_few_shot(ckpt, &encoder, task, &shots, &cfg, exec)?;
        let r = evaluate_task(
            &adapted,
            &encoder,
            task,
            self.eval_records(task)?,
            Setting::FewShot,
            metric,
            opts,
            seed,
            exec,
        )?;
        Ok((self.stamp(r, None), log))
    }

    /// Fine-tuning on the task's whole training split, then evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn full_data(
        &self,
        ckpt: &Checkpoint,
        task: &str,
        cfg: &TrainConfig,
        metric: Option<Metric>,
        opts: DecodeOptions,
        seed: u64,
        exec: Exec,
    ) -> Result<(EvalResult, TrainLog)> {
        let encoder = self.encoder(&ckpt.tokenizer, ckpt.ablation);
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let (tuned, log) = fine_tune_full(ckpt, &encoder, task, self.train_records(task)?, &cfg, exec)?;
        let r = evaluate_task(
            &tuned,
            &encoder,
            task,
            self.eval_records(task)?,
            Setting::FullData,
            metric,
            opts,
            seed,
            exec,
        )?;
        Ok((self.stamp(r, None), log))
    }

    /// Runs `setting` for every evaluation task.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_all(
        &self,
        ckpt: &Checkpoint,
        setting: Setting,
        ablation: AblationConfig,
        metric: Option<Metric>,
        opts: DecodeOptions,
        seed: u64,
        exec: Exec,
    ) -> Result<Vec<EvalResult>> {
        self.check_ablation(ckpt, ablation)?;
        let variant = (ablation != AblationConfig::FULL).then(|| ablation.label());
        let mut out = Vec::new();
        for task in &self.taxonomy.eval_tasks {
            let r = match setting {
                Setting::ZeroShot => self.zero_shot(ckpt, task, metric, opts, seed, exec)?,
                Setting::FewShot => {
                    let cfg = TrainConfig::resolve(&self.config.fewshot)?;
                    self.few_shot(ckpt, task, self.config.k, &cfg, metric, opts, seed, exec)?.0
                }
                Setting::FullData => {
                    let cfg = TrainConfig::resolve(&self.config.finetune)?;
                    self.full_data(ckpt, task, &cfg, metric, opts, seed, exec)?.0
                }
            };
            out.push(self.stamp(r, variant.clone()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn synthetic_experiment(dir: &Path) -> Experiment {
        let suite = synth::generate(&synth::SynthConfig {
            train_per_task: 30,
            test_per_task: 6,
            seed: 1,
        });
        suite.write_to(dir).unwrap();
        let cfg = ExperimentConfig {
            taxonomy: "taxonomy.json".into(),
            schemas: "schemas.jsonl".into(),
            datasets: "datasets.json".into(),
            templates: None,
            model: ModelShape {
                embed_dim: 16,
                num_layers: 1,
                num_heads: 2,
                ff_dim: 32,
                max_len: 64,
                backbone: Backbone::ToyTransformer,
            },
            prompts: PromptShape {
                key_length: 1,
                format_length: 2,
                task_length: 2,
                output_length: 1,
                init_scale: 0.02,
            },
            pretrain: "toy".into(),
            fewshot: "toy_fewshot".into(),
            finetune: "toy".into(),
            ablation: AblationConfig::FULL,
            mode: Mode::Schemapro,
            seeds: vec![1],
            cap: 20,
            k: 4,
            max_vocab: 1000,
            out: None,
        };
        std::fs::write(dir.join("experiment.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Experiment::load(&dir.join("experiment.json")).unwrap()
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let exp = synthetic_experiment(dir.path());
        let manifest = exp.build_mixture(20, 1).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert!(manifest.entries.iter().all(|e| e.count == 20));

        let cfg = TrainConfig::toy().with_steps(2);
        let (ckpt, log, _) = exp.pretrain(1, AblationConfig::FULL, &cfg, Exec::Sequential).unwrap();
        assert_eq!(log.steps.len(), 2);
        let zs = exp
            .evaluate_all(&ckpt, Setting::ZeroShot, AblationConfig::FULL, None, DecodeOptions::default(), 1, Exec::Sequential)
            .unwrap();
        assert_eq!(zs.len(), 2);
        assert!(zs.iter().all(|r| r.metric == Metric::Accuracy && r.n_examples == 6));
        assert!(zs.iter().all(|r| r.config_hash.as_deref() == Some(exp.hash.as_str())));

        let few = TrainConfig::toy_fewshot().with_steps(2);
        let (r, log) = exp
            .few_shot(&ckpt, "c1", 4, &few, None, DecodeOptions::default(), 1, Exec::Sequential)
            .unwrap();
        assert_eq!(r.setting, Setting::FewShot);
        assert_eq!(log.steps.len(), 2);

        assert!(matches!(
            exp.evaluate_all(&ckpt, Setting::ZeroShot, AblationConfig::WITHOUT_TASK, None, DecodeOptions::default(), 1, Exec::Sequential),
            Err(Error::AblationMismatch { .. })
        ));
    }
}
