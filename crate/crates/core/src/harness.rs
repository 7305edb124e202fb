//! Training, adaptation and checkpointing for the encoder-decoder backbone.
//!
//! Per-example gradients are computed independently (optionally in
//! parallel) and summed in example order, so a run is reproducible
//! regardless of thread count. Data order within each epoch is a permutation
//! derived from `(seed, epoch)`; together with the stored step counter and
//! optimizer moments this makes checkpoints resumable without replaying
//! anything.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compose::{compose, AblationConfig, ComposedInput, SchemaInstance};
use crate::container;
use crate::error::{Error, Result};
use crate::ingest::{rng_for, split_for_multi_prompt, NLPromptTemplate, MAX_TEMPLATES};
use crate::nn::model::Bound;
use crate::nn::optim::{adam_update, AdamConfig, Moments};
use crate::nn::{Graph, Mat, ModelConfig, Seq2Seq};
use crate::par::Exec;
use crate::prompts::{GroupId, PromptTable, Role};
use crate::schema::{SchemaRegistry, TaskSchema, ATTRIBUTE_KEYS};
use crate::tokenizer::{Tokenizer, WordTokenizer};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    #[default]
    All,
    PromptsOnly,
    TaskPromptsOnly,
}

impl TrainableScope {
    pub fn backbone(self) -> bool {
        self == TrainableScope::All
    }

    pub fn prompt_role(self, role: Role) -> bool {
        match self {
            TrainableScope::All | TrainableScope::PromptsOnly => true,
            TrainableScope::TaskPromptsOnly => role == Role::TaskValue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainable_scope: TrainableScope,
}

impl TrainConfig {
    /// Multi-task pre-training: lr 1e-4, batch 4, accumulation 10, 10 epochs.
    pub fn pretrain_b1() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            grad_accum: 10,
            epochs: Some(10),
            max_steps: None,
            seed: 0,
            trainable_scope: TrainableScope::All,
        }
    }

    /// Few-shot adaptation: lr 1e-5, batch 1, no accumulation, 800 steps.
    pub fn fewshot_b3() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 1,
            grad_accum: 1,
            epochs: None,
            max_steps: Some(800),
            seed: 0,
            trainable_scope: TrainableScope::All,
        }
    }

    /// Pre-training sized for the toy backbone.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            grad_accum: 1,
            epochs: Some(2),
            max_steps: None,
            seed: 0,
            trainable_scope: TrainableScope::All,
        }
    }

    /// Few-shot adaptation sized for the toy backbone (800 steps, batch 1).
    pub fn toy_fewshot() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::fewshot_b3()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pretrain_b1" => Ok(Self::pretrain_b1()),
            "fewshot_b3" => Ok(Self::fewshot_b3()),
            "toy" => Ok(Self::toy()),
            "toy_fewshot" => Ok(Self::toy_fewshot()),
            other => Err(Error::InvalidConfig(format!("unknown train preset `{other}`"))),
        }
    }

    /// A preset name or a path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Ok(cfg) = Self::preset(name_or_path) {
            return Ok(cfg);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::InvalidConfig(format!(
                "`{name_or_path}` is neither a train preset nor a file"
            )));
        }
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig("batch_size and grad_accum must be >= 1".into()));
        }
        if self.epochs.is_some() == self.max_steps.is_some() {
            return Err(Error::InvalidConfig(
                "exactly one of epochs / max_steps must be set".into(),
            ));
        }
        Ok(())
    }

    pub fn examples_per_update(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Number of optimizer updates over `n` examples.
    pub fn total_updates(&self, n: usize) -> usize {
        match (self.epochs, self.max_steps) {
            (_, Some(steps)) => steps,
            (Some(epochs), None) => (epochs * n).div_ceil(self.examples_per_update()),
            (None, None) => 0,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.epochs = None;
        self.max_steps = Some(steps);
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = Some(epochs);
        self.max_steps = None;
        self
    }
}

/// How instances are turned into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Schemapro,
    NlproSingle,
    NlproMulti,
}

/// One teacher-forced training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ComposedInput,
    pub target: Vec<u32>,
}

impl Example {
    pub fn target_len(&self) -> usize {
        self.target.len() + 1
    }
}

/// Turns instances into [`Example`]s under a mode and ablation.
pub struct Encoder<'a> {
    pub registry: &'a SchemaRegistry,
    pub tokenizer: &'a dyn Tokenizer,
    pub mode: Mode,
    pub ablation: AblationConfig,
    pub templates: &'a BTreeMap<String, Vec<NLPromptTemplate>>,
    pub max_len: usize,
}

/// Prompt groups a composed input of `schema` would reference.
pub fn required_groups(schema: &TaskSchema, ablation: AblationConfig) -> Vec<GroupId> {
    let mut out = Vec::new();
    let mut attr = |key: &str, role: Role, name: &str| {
        out.push(GroupId::key(key));
        out.push(GroupId::new(role, name));
    };
    if ablation.include_format {
        attr(ATTRIBUTE_KEYS[0], Role::FormatValue, &schema.format_name);
    }
    if ablation.include_task {
        attr(ATTRIBUTE_KEYS[1], Role::TaskValue, &schema.task_name);
    }
    attr(ATTRIBUTE_KEYS[2], Role::OutputValue, &schema.output_name);
    if ablation.include_keys {
        out.extend(schema.components.iter().map(|c| GroupId::key(&c.key)));
    }
    out
}

impl<'a> Encoder<'a> {
    /// Creates any prompt group `task` needs that the table lacks; returns the
    /// ones created. A no-op outside schema mode.
    pub fn ensure_groups(&self, table: &mut PromptTable, task: &str) -> Result<Vec<GroupId>> {
        if self.mode != Mode::Schemapro {
            return Ok(Vec::new());
        }
        let schema = self.registry.get(task)?;
        Ok(required_groups(schema, self.ablation)
            .into_iter()
            .filter(|id| table.ensure(id))
            .collect())
    }

    fn target_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.max_len.saturating_sub(1));
        ids
    }

    pub fn schema_input(&self, table: &PromptTable, instance: &SchemaInstance) -> Result<ComposedInput> {
        let schema = self.registry.get(&instance.task_name)?;
        compose(instance, schema, self.ablation, self.tokenizer, table, self.max_len)
    }

    pub fn template_example(&self, instance: &SchemaInstance, template: &NLPromptTemplate) -> Result<Example> {
        let (input, target) = template.render(instance)?;
        let mut ids = self.tokenizer.encode(&input);
        ids.truncate(self.max_len);
        Ok(Example {
            input: ComposedInput::from_text(ids),
            target: self.target_ids(&target),
        })
    }

    fn templates_for(&self, task: &str) -> Result<&'a [NLPromptTemplate]> {
        match self.templates.get(task) {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(Error::InvalidConfig(format!("no NL template for task `{task}`"))),
        }
    }

    /// Training examples for `records` (any mix of tasks). In multi-template
    /// mode each task's records are partitioned across its templates.
    pub fn training_examples(
        &self,
        table: &mut PromptTable,
        records: &[SchemaInstance],
        seed: u64,
    ) -> Result<Vec<Example>> {
        match self.mode {
            Mode::Schemapro => {
                let mut tasks: Vec<&str> = records.iter().map(|r| r.task_name.as_str()).collect();
                tasks.sort_unstable();
                tasks.dedup();
                for task in tasks {
                    self.ensure_groups(table, task)?;
                }
                records
                    .iter()
                    .map(|r| {
                        Ok(Example {
                            input: self.schema_input(table, r)?,
                            target: self.target_ids(&r.target),
                        })
                    })
                    .collect()
            }
            Mode::NlproSingle => records
                .iter()
                .map(|r| self.template_example(r, &self.templates_for(&r.task_name)?[0]))
                .collect(),
            Mode::NlproMulti => {
                let mut by_task: BTreeMap<&str, Vec<&SchemaInstance>> = BTreeMap::new();
                for r in records {
                    by_task.entry(&r.task_name).or_default().push(r);
                }
                let mut out = Vec::with_capacity(records.len());
                for (task, recs) in by_task {
                    let templates = self.templates_for(task)?;
                    let templates = &templates[..templates.len().min(MAX_TEMPLATES)];
                    let parts = split_for_multi_prompt(&recs, templates, seed, MAX_TEMPLATES)?;
                    for (part, template) in parts {
                        for r in part {
                            out.push(self.template_example(r, &template)?);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Evaluation inputs of one instance: one per template in
    /// multi-template mode, otherwise exactly one.
    pub fn eval_inputs(&self, table: &PromptTable, instance: &SchemaInstance) -> Result<Vec<ComposedInput>> {
        match self.mode {
            Mode::Schemapro => Ok(vec![self.schema_input(table, instance)?]),
            Mode::NlproSingle => {
                let t = &self.templates_for(&instance.task_name)?[0];
                Ok(vec![self.template_example(instance, t)?.input])
            }
            Mode::NlproMulti => {
                let ts = self.templates_for(&instance.task_name)?;
                ts.iter()
                    .take(MAX_TEMPLATES)
                    .map(|t| Ok(self.template_example(instance, t)?.input))
                    .collect()
            }
        }
    }

    pub fn target_tokens(&self, text: &str) -> Vec<u32> {
        self.target_ids(text)
    }
}

/// Adam moments for the backbone and for each prompt group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub params: Vec<Moments>,
    pub prompts: BTreeMap<GroupId, Moments>,
}

/// Progress of one training phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    /// Optimizer updates completed.
    pub step: u64,
    pub seed: u64,
    pub optim: OptimState,
}

impl TrainState {
    pub fn fresh(seed: u64) -> Self {
        Self {
            step: 0,
            seed,
            optim: OptimState::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub epoch: usize,
    /// Mean per-token cross-entropy over the update.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
}

impl TrainLog {
    /// Mean step loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = acc.entry(s.epoch).or_default();
            e.0 += s.loss;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
            .collect()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub table: PromptTable,
    pub tokenizer: WordTokenizer,
    pub ablation: AblationConfig,
    pub mode: Mode,
    pub train_config: Option<TrainConfig>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: u64,
    seed: u64,
    ablation: AblationConfig,
    mode: Mode,
    tokenizer: WordTokenizer,
    param_names: Vec<String>,
    param_moments: bool,
    prompt_moments: Vec<GroupId>,
}

fn mat_bytes(m: &Mat) -> Vec<u8> {
    match m.as_slice() {
        Some(s) => container::f64s_to_bytes(s),
        None => container::f64s_to_bytes(&m.iter().copied().collect::<Vec<_>>()),
    }
}

fn mat_from(bytes: &[u8], shape: (usize, usize)) -> Result<Mat> {
    Mat::from_shape_vec(shape, container::bytes_to_f64s(bytes)?)
        .map_err(|e| Error::CorruptFile(format!("tensor shape: {e}")))
}

impl Checkpoint {
    /// Freshly initialized model and prompt table.
    pub fn init(
        model_config: ModelConfig,
        table: PromptTable,
        tokenizer: WordTokenizer,
        ablation: AblationConfig,
        mode: Mode,
        seed: u64,
    ) -> Result<Self> {
        if model_config.embed_dim != table.dim() {
            return Err(Error::DimMismatch(format!(
                "model embed_dim {} differs from prompt dim {}",
                model_config.embed_dim,
                table.dim()
            )));
        }
        Ok(Self {
            model: Seq2Seq::new(model_config, seed)?,
            table,
            tokenizer,
            ablation,
            mode,
            train_config: None,
            state: TrainState::fresh(seed),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let optim = &self.state.optim;
        let header = CheckpointHeader {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            step: self.state.step,
            seed: self.state.seed,
            ablation: self.ablation,
            mode: self.mode,
            tokenizer: self.tokenizer.clone(),
            param_names: self.model.param_names().to_vec(),
            param_moments: !optim.params.is_empty(),
            prompt_moments: optim.prompts.keys().cloned().collect(),
        };
        let mut blobs = vec![self.table.to_bytes()];
        blobs.extend(self.model.params.iter().map(mat_bytes));
        for m in &optim.params {
            blobs.push(mat_bytes(&m.m));
            blobs.push(mat_bytes(&m.v));
        }
        for m in optim.prompts.values() {
            blobs.push(mat_bytes(&m.m));
            blobs.push(mat_bytes(&m.v));
        }
        container::encode(MAGIC, VERSION, &header, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = container::decode::<CheckpointHeader>(bytes, MAGIC, VERSION)?;
        let h = decoded.header;
        let mut blobs = decoded.blobs.into_iter();
        let mut next = || blobs.next().ok_or_else(|| Error::CorruptFile("missing tensor blob".into()));
        let table = PromptTable::from_bytes(&next()?)?;
        let shapes = Seq2Seq::param_shapes(&h.model_config);
        if shapes.iter().map(|(n, _)| n).ne(h.param_names.iter()) {
            return Err(Error::CorruptFile("parameter directory does not match the model".into()));
        }
        let params = shapes
            .iter()
            .map(|(_, s)| mat_from(&next()?, *s))
            .collect::<Result<Vec<_>>>()?;
        let model = Seq2Seq::from_params(h.model_config.clone(), params)?;
        if h.model_config.embed_dim != table.dim() {
            return Err(Error::DimMismatch(format!(
                "model embed_dim {} differs from prompt dim {}",
                h.model_config.embed_dim,
                table.dim()
            )));
        }
        let mut optim = OptimState::default();
        if h.param_moments {
            for (_, s) in &shapes {
                let m = mat_from(&next()?, *s)?;
                let v = mat_from(&next()?, *s)?;
                optim.params.push(Moments { m, v });
            }
        }
        for id in h.prompt_moments {
            let shape = table
                .get(&id)
                .map(|g| g.values.dim())
                .ok_or_else(|| Error::CorruptFile(format!("moments for unknown group {id}")))?;
            let m = mat_from(&next()?, shape)?;
            let v = mat_from(&next()?, shape)?;
            optim.prompts.insert(id, Moments { m, v });
        }
        if blobs.next().is_some() {
            return Err(Error::CorruptFile("trailing tensor blobs".into()));
        }
        Ok(Self {
            model,
            table,
            tokenizer: h.tokenizer,
            ablation: h.ablation,
            mode: h.mode,
            train_config: h.train_config,
            state: TrainState {
                step: h.step,
                seed: h.seed,
                optim,
            },
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Like [`load_checkpoint`], also checking the backbone width.
pub fn load_checkpoint_expecting(path: &Path, embed_dim: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.config().embed_dim;
    if found != embed_dim {
        return Err(Error::DimMismatch(format!(
            "checkpoint embed_dim {found}, expected {embed_dim}"
        )));
    }
    Ok(ckpt)
}

struct ExampleGrad {
    nll: f64,
    params: Vec<Option<Mat>>,
    prompts: Vec<(GroupId, Mat)>,
}

fn example_grad(model: &Seq2Seq, table: &PromptTable, ex: &Example, backbone: bool) -> Result<ExampleGrad> {
    let mut g = Graph::new();
    let bound: Bound = model.bind(&mut g, table, &[&ex.input])?;
    let loss = model.loss(&mut g, &bound, &ex.input, &ex.target)?;
    let nll = g.value(loss)[[0, 0]];
    let mut grads = g.backward(loss);
    let params = if backbone {
        bound.param_vars().iter().map(|&v| grads.take(v)).collect()
    } else {
        Vec::new()
    };
    let mut prompts: Vec<(GroupId, Mat)> = bound
        .prompt_vars()
        .filter_map(|(id, v)| grads.take(v).map(|m| (id.clone(), m)))
        .collect();
    prompts.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(ExampleGrad { nll, params, prompts })
}

/// Mean per-token loss of `examples` under the current parameters.
pub fn mean_loss(model: &Seq2Seq, table: &PromptTable, examples: &[Example], exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let nlls = exec.map(examples, |ex| -> Result<f64> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, table, &[&ex.input])?;
        let loss = model.loss(&mut g, &bound, &ex.input, &ex.target)?;
        Ok(g.value(loss)[[0, 0]])
    });
    let total: f64 = nlls.into_iter().collect::<Result<Vec<_>>>()?.iter().sum();
    let tokens: usize = examples.iter().map(Example::target_len).sum();
    Ok(total / tokens as f64)
}

/// Runs optimizer updates until the schedule in `cfg` is exhausted,
/// continuing from `ckpt.state.step`.
pub fn train(ckpt: &mut Checkpoint, examples: &[Example], cfg: &TrainConfig, exec: Exec) -> Result<TrainLog> {
    cfg.validate()?;
    let total = cfg.total_updates(examples.len()) as u64;
    let mut log = TrainLog::default();
    if ckpt.state.step >= total {
        return Ok(log);
    }
    if examples.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let n = examples.len();
    let per_update = cfg.examples_per_update();
    let stream_len = cfg.epochs.map(|e| e * n);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let backbone = cfg.trainable_scope.backbone();
    let seed = ckpt.state.seed;
    let mut perm_cache: Option<(usize, Vec<usize>)> = None;
    let mut order_at = |pos: usize| -> usize {
        let epoch = pos / n;
        if perm_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, &format!("epoch/{epoch}")));
            perm_cache = Some((epoch, perm));
        }
        perm_cache.as_ref().expect("filled above").1[pos % n]
    };

    while ckpt.state.step < total {
        let step = ckpt.state.step;
        let start = step as usize * per_update;
        let end = match stream_len {
            Some(len) => (start + per_update).min(len),
            None => start + per_update,
        };
        let batch: Vec<&Example> = (start..end).map(|p| &examples[order_at(p)]).collect();
        let epoch = start / n;

        let model = &ckpt.model;
        let table = &ckpt.table;
        let results = exec.map(&batch, |ex| example_grad(model, table, ex, backbone));
        let tokens: usize = batch.iter().map(|ex| ex.target_len()).sum();
        let scale = 1.0 / tokens as f64;

        let mut nll = 0.0;
        let mut param_sum: Vec<Option<Mat>> = Vec::new();
        let mut prompt_sum: BTreeMap<GroupId, Mat> = BTreeMap::new();
        for r in results {
            let r = r?;
            nll += r.nll;
            if param_sum.is_empty() {
                param_sum = r.params;
            } else {
                for (acc, g) in param_sum.iter_mut().zip(r.params) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => *a += &g,
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            for (id, g) in r.prompts {
                match prompt_sum.get_mut(&id) {
                    Some(a) => *a += &g,
                    None => {
                        prompt_sum.insert(id, g);
                    }
                }
            }
        }
        let loss = nll * scale;
        if !loss.is_finite() {
            return Err(Error::NaNLoss {
                step,
                detail: format!("loss {loss} over {} example(s) in epoch {epoch}", batch.len()),
            });
        }

        let t = step + 1;
        let optim = &mut ckpt.state.optim;
        if backbone {
            if optim.params.is_empty() {
                optim.params = ckpt.model.params.iter().map(|p| Moments::zeros(p.dim())).collect();
            }
            for ((p, g), m) in ckpt.model.params.iter_mut().zip(&param_sum).zip(&mut optim.params) {
                if let Some(g) = g {
                    adam_update(&adam, t, p, &(g * scale), m);
                }
            }
        }
        for (id, g) in &prompt_sum {
            let group = ckpt.table.get_mut(id).ok_or_else(|| Error::UnknownGroup(id.clone()))?;
            if !group.trainable || !cfg.trainable_scope.prompt_role(id.role) {
                continue;
            }
            let m = optim
                .prompts
                .entry(id.clone())
                .or_insert_with(|| Moments::zeros(group.values.dim()));
            adam_update(&adam, t, &mut group.values, &(g * scale), m);
        }
        ckpt.state.step = t;
        log.steps.push(StepLoss { step: t, epoch, loss });
        log::debug!("step {t} epoch {epoch} loss {loss:.5}");
    }
    for (epoch, mean) in log.epoch_means() {
        log::info!("epoch {epoch}: mean loss {mean:.5}");
    }
    Ok(log)
}

/// Multi-task training on an already-encoded mixture. The returned
/// checkpoint is the last one.
pub fn train_multitask(
    init: Checkpoint,
    mixture: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, TrainLog)> {
    if mixture.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let mut ckpt = init;
    ckpt.state.seed = cfg.seed;
    ckpt.train_config = Some(cfg.clone());
    let log = train(&mut ckpt, mixture, cfg, exec)?;
    Ok((ckpt, log))
}

/// A new training phase on top of `base`: fresh optimizer state and step
/// counter, every group of the tasks in `records` present.
fn new_phase(
    base: &Checkpoint,
    encoder: &Encoder<'_>,
    records: &[SchemaInstance],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if cfg.total_updates(records.len()) == 0 {
        return Ok((base.clone(), TrainLog::default()));
    }
    let mut ckpt = base.clone();
    ckpt.state = TrainState::fresh(cfg.seed);
    ckpt.train_config = Some(cfg.clone());
    let examples = encoder.training_examples(&mut ckpt.table, records, cfg.seed)?;
    let log = train(&mut ckpt, &examples, cfg, exec)?;
    Ok((ckpt, log))
}

/// Few-shot adaptation of `base` to `task` on `shots`. The task's value
/// prompt is created (randomly initialized) if it does not exist yet.
pub fn adapt_few_shot(
    base: &Checkpoint,
    encoder: &Encoder<'_>,
    task: &str,
    shots: &[SchemaInstance],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, TrainLog)> {
    if let Some(bad) = shots.iter().find(|s| s.task_name != task) {
        return Err(Error::InvalidConfig(format!(
            "few-shot data for `{task}` contains a `{}` record",
            bad.task_name
        )));
    }
    new_phase(base, encoder, shots, cfg, exec)
}

/// Full-data fine-tuning of `base` on one task's training set.
pub fn fine_tune_full(
    base: &Checkpoint,
    encoder: &Encoder<'_>,
    task: &str,
    train_set: &[SchemaInstance],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, TrainLog)> {
    adapt_few_shot(base, encoder, task, train_set, cfg, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::ComponentValue;
    use crate::prompts::InitConfig;
    use crate::schema::ComponentDecl;

    fn small_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            max_len: 64,
            backbone: crate::nn::Backbone::ToyTransformer,
        }
    }

    struct Fixture {
        registry: SchemaRegistry,
        tokenizer: WordTokenizer,
        templates: BTreeMap<String, Vec<NLPromptTemplate>>,
        records: Vec<SchemaInstance>,
    }

    fn fixture() -> Fixture {
        let mut registry = SchemaRegistry::new();
        registry
            .register(TaskSchema::new(
                "lookup",
                "colors",
                "word",
                vec![ComponentDecl::text("passage"), ComponentDecl::text("question")],
            ))
            .unwrap();
        let words = ["red", "blue", "green", "cat", "dog"];
        let records: Vec<SchemaInstance> = (0..6)
            .map(|i| SchemaInstance {
                task_name: "colors".into(),
                values: [
                    (
                        "passage".to_string(),
                        ComponentValue::Text(format!("{} {}", words[i % 5], words[(i + 3) % 5])),
                    ),
                    ("question".to_string(), ComponentValue::Text("color ?".into())),
                ]
                .into(),
                target: words[i % 5].into(),
                choices: None,
            })
            .collect();
        let tokenizer = WordTokenizer::fit(["red blue green cat dog color ?"], 100);
        let templates = [(
            "colors".to_string(),
            vec![NLPromptTemplate {
                task_name: "colors".into(),
                template_text: "{passage} . {question}".into(),
                target_template: "{target}".into(),
                answer_choices: None,
            }],
        )]
        .into();
        Fixture {
            registry,
            tokenizer,
            templates,
            records,
        }
    }

    fn encoder(f: &Fixture, mode: Mode) -> Encoder<'_> {
        Encoder {
            registry: &f.registry,
            tokenizer: &f.tokenizer,
            mode,
            ablation: AblationConfig::FULL,
            templates: &f.templates,
            max_len: 64,
        }
    }

    fn init(f: &Fixture) -> Checkpoint {
        let layout = InitConfig {
            key_length: 2,
            format_length: 2,
            task_length: 2,
            output_length: 2,
            ..InitConfig::default()
        };
        Checkpoint::init(
            small_config(f.tokenizer.vocab_size()),
            PromptTable::new(16, layout).unwrap(),
            f.tokenizer.clone(),
            AblationConfig::FULL,
            Mode::Schemapro,
            7,
        )
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 2,
            grad_accum: 1,
            epochs: None,
            max_steps: Some(steps),
            seed: 5,
            trainable_scope: TrainableScope::All,
        }
    }

    #[test]
    fn presets_and_validation() {
        let b1 = TrainConfig::preset("pretrain_b1").unwrap();
        assert_eq!((b1.learning_rate, b1.batch_size, b1.grad_accum, b1.epochs), (1e-4, 4, 10, Some(10)));
        let b3 = TrainConfig::preset("fewshot_b3").unwrap();
        assert_eq!((b3.learning_rate, b3.batch_size, b3.grad_accum, b3.max_steps), (1e-5, 1, 1, Some(800)));
        assert!(TrainConfig::preset("nope").is_err());
        let mut bad = b1.clone();
        bad.max_steps = Some(3);
        assert!(bad.validate().is_err());
        bad = b1.clone();
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        assert_eq!(b1.total_updates(81), 21);
    }

    #[test]
    fn single_example_overfits() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let mut ckpt = init(&f);
        let ex = enc.training_examples(&mut ckpt.table, &f.records[..1], 0).unwrap();
        let mut c = cfg(20);
        c.batch_size = 1;
        let log = train(&mut ckpt, &ex, &c, Exec::Sequential).unwrap();
        let losses: Vec<f64> = log.steps.iter().map(|s| s.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn prompts_only_freezes_backbone() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let mut ckpt = init(&f);
        let ex = enc.training_examples(&mut ckpt.table, &f.records, 0).unwrap();
        let before_model = ckpt.model.clone();
        let before_table = ckpt.table.clone();
        let mut c = cfg(3);
        c.trainable_scope = TrainableScope::PromptsOnly;
        train(&mut ckpt, &ex, &c, Exec::Sequential).unwrap();
        assert_eq!(ckpt.model, before_model);
        assert_ne!(ckpt.table, before_table);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let mut ckpt = init(&f);
        let ex = enc.training_examples(&mut ckpt.table, &f.records, 0).unwrap();
        let frozen = GroupId::key("passage");
        ckpt.table
            .set_trainable(&crate::prompts::Selector::Groups([frozen.clone()].into()), false)
            .unwrap();
        let before = ckpt.table.group_checksum(&frozen);
        train(&mut ckpt, &ex, &cfg(3), Exec::Sequential).unwrap();
        assert_eq!(ckpt.table.group_checksum(&frozen), before);
        assert_ne!(
            ckpt.table.group_checksum(&GroupId::key("question")),
            init(&f).table.group_checksum(&GroupId::key("question"))
        );
    }

    #[test]
    fn deterministic_and_parallel_agree() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let run = |exec| {
            let mut ckpt = init(&f);
            let ex = enc.training_examples(&mut ckpt.table, &f.records, 0).unwrap();
            let log = train(&mut ckpt, &ex, &cfg(4), exec).unwrap();
            (ckpt, log)
        };
        let (a, la) = run(Exec::Sequential);
        let (b, lb) = run(Exec::Sequential);
        let (c, lc) = run(Exec::Parallel);
        assert_eq!(la, lb);
        assert_eq!(la, lc);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let mut unbroken = init(&f);
        let ex = enc.training_examples(&mut unbroken.table, &f.records, 0).unwrap();
        let full_log = train(&mut unbroken, &ex, &cfg(10), Exec::Sequential).unwrap();

        let mut first = init(&f);
        enc.training_examples(&mut first.table, &f.records, 0).unwrap();
        train(&mut first, &ex, &cfg(5), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed, first);
        let rest = train(&mut resumed, &ex, &cfg(10), Exec::Sequential).unwrap();
        assert_eq!(rest.steps, full_log.steps[5..]);
        assert_eq!(resumed, unbroken);

        assert!(matches!(
            load_checkpoint_expecting(&path, 32),
            Err(Error::DimMismatch(_))
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn few_shot_identity_and_new_task_prompt() {
        let f = fixture();
        let enc = encoder(&f, Mode::Schemapro);
        let base = init(&f);
        let (same, log) = adapt_few_shot(&base, &enc, "colors", &[], &cfg(0), Exec::Sequential).unwrap();
        assert_eq!(same, base);
        assert!(log.steps.is_empty());

        let (adapted, _) = adapt_few_shot(&base, &enc, "colors", &f.records, &cfg(5), Exec::Sequential).unwrap();
        let task = GroupId::new(Role::TaskValue, "colors");
        let mut fresh = base.table.clone();
        fresh.ensure(&task);
        assert_ne!(adapted.table.get(&task).unwrap().values, fresh.get(&task).unwrap().values);

        let (zero_epochs, _) =
            fine_tune_full(&base, &enc, "colors", &f.records, &cfg(0).with_epochs(0), Exec::Sequential).unwrap();
        assert_eq!(zero_epochs, base);
    }

    #[test]
    fn nl_modes_have_no_slots() {
        let f = fixture();
        for mode in [Mode::NlproSingle, Mode::NlproMulti] {
            let enc = encoder(&f, mode);
            let mut table = init(&f).table;
            let ex = enc.training_examples(&mut table, &f.records, 0).unwrap();
            assert_eq!(ex.len(), f.records.len());
            assert!(ex.iter().all(|e| e.input.slot_len() == 0));
            assert!(table.is_empty());
        }
    }

    #[test]
    fn empty_mixture_errors() {
        let f = fixture();
        assert!(matches!(
            train_multitask(init(&f), &[], &cfg(1), Exec::Sequential),
            Err(Error::EmptyMixture)
        ));
    }
}
