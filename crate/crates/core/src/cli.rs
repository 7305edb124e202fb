//! Command-line front end.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::compose::{compose, render_debug, AblationConfig, SlotLayout};
use crate::error::{Error, Result};
use crate::eval::{prepare_zero_shot, render_table, results_to_jsonl, DecodeOptions, EvalResult, Metric, Setting};
use crate::experiment::{Experiment, PromptShape};
use crate::harness::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use crate::ingest::parse_record;
use crate::par::Exec;
use crate::prompts::PromptTable;
use crate::schema::{key_union, SchemaRegistry};
use crate::synth;
use crate::tokenizer::WordTokenizer;

#[derive(Debug, Parser)]
#[command(name = "schemapro", version, about = "Schema-prompt multi-task training and evaluation")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (default: the config's `out`, else `./out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    WoF,
    WoT,
    WoK,
}

impl AblationArg {
    pub fn config(self) -> AblationConfig {
        match self {
            AblationArg::Full => AblationConfig::FULL,
            AblationArg::WoF => AblationConfig::WITHOUT_FORMAT,
            AblationArg::WoT => AblationConfig::WITHOUT_TASK,
            AblationArg::WoK => AblationConfig::WITHOUT_KEYS,
        }
    }
}

fn slug(ablation: AblationConfig) -> String {
    let label = ablation.label();
    if label == "full" {
        label
    } else {
        label.replace("w/o ", "wo_").replace(',', "").to_lowercase()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    ZeroShot,
    FewShot,
    FullData,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::ZeroShot => Setting::ZeroShot,
            SettingArg::FewShot => Setting::FewShot,
            SettingArg::FullData => Setting::FullData,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Em,
    RougeL,
    Accuracy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Em => Metric::Em,
            MetricArg::RougeL => Metric::RougeL,
            MetricArg::Accuracy => Metric::Accuracy,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preset (`pretrain_b1`, `fewshot_b3`, `toy`, `toy_fewshot`) or JSON file.
    #[arg(long)]
    pub train_config: Option<String>,
    /// Replace the schedule with this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

impl TrainArgs {
    fn resolve(&self, default: &str) -> Result<TrainConfig> {
        let cfg = TrainConfig::resolve(self.train_config.as_deref().unwrap_or(default))?;
        Ok(match self.steps {
            Some(s) => cfg.with_steps(s),
            None => cfg,
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "zero-shot")]
    pub setting: SettingArg,
    /// Checked against the task's format.
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Divide option log-likelihoods by their length.
    #[arg(long)]
    pub length_normalize: bool,
    /// Few-shot sample size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Replaces the checkpoint's prompt table.
    #[arg(long)]
    pub prompt_table: Option<PathBuf>,
    /// Ablation the checkpoint must have been trained with.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the capped multi-task mixture manifest.
    BuildMixture {
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Multi-task pre-training.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Initial prompt table instead of a fresh one.
        #[arg(long)]
        prompt_table: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Evaluate a checkpoint on every evaluation task.
    Eval(EvalArgs),
    /// Few-shot adaptation then evaluation (same as `eval --setting few-shot`).
    Fewshot(EvalArgs),
    /// Full-data fine-tuning then evaluation (same as `eval --setting full-data`).
    Finetune(EvalArgs),
    /// Pre-train and evaluate ablated variants, or check one checkpoint
    /// against a requested variant.
    Ablation {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full,wo-f,wo-t,wo-k")]
        variants: Vec<AblationArg>,
        /// Evaluate this checkpoint as `--variant` instead of pre-training.
        #[arg(long, requires = "variant")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<AblationArg>,
        /// Also run few-shot adaptation.
        #[arg(long)]
        few_shot: bool,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Pre-train on the training formats and evaluate the composed format.
    ComposeExperiment {
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print the composed schema prompt of one record.
    ComposeDebug {
        /// Schema file (defaults to the config's).
        #[arg(long)]
        schemas: Option<PathBuf>,
        /// Task of the record (defaults to the record's `task` field).
        #[arg(long)]
        task: Option<String>,
        /// One JSON record.
        #[arg(long, conflicts_with = "record_file")]
        record: Option<String>,
        /// File whose first non-blank line is the record.
        #[arg(long)]
        record_file: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        /// Take slot lengths from this prompt table.
        #[arg(long)]
        prompt_table: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
    },
    /// Write the synthetic benchmark and a matching config.
    GenSynthetic {
        #[arg(long, default_value_t = 2000)]
        train_per_task: usize,
        #[arg(long, default_value_t = 200)]
        test_per_task: usize,
    },
}

struct Ctx {
    exp: Experiment,
    out: PathBuf,
    seeds: Vec<u64>,
    exec: Exec,
}

impl Cli {
    fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn ctx(&self) -> Result<Ctx> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
        let exp = Experiment::load(path)?;
        let out = self
            .out
            .clone()
            .or_else(|| {
                exp.config
                    .out
                    .as_ref()
                    .map(|o| path.parent().unwrap_or(Path::new(".")).join(o))
            })
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        let seeds = match self.seed {
            Some(s) => vec![s],
            None => exp.config.seeds.clone(),
        };
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds configured".into()));
        }
        Ok(Ctx {
            exp,
            out,
            seeds,
            exec: self.exec(),
        })
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn banner(exp: &Experiment, seeds: &[u64]) -> String {
    format!(
        "config {} seeds {}",
        exp.hash,
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    )
}

/// Runs the parsed command; returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::BuildMixture { cap } => build_mixture(cli, *cap),
        Command::Pretrain {
            train,
            ablation,
            prompt_table,
            cap,
        } => pretrain(cli, train, *ablation, prompt_table.as_deref(), *cap),
        Command::Eval(args) => evaluate(cli, args, args.setting.into()),
        Command::Fewshot(args) => evaluate(cli, args, Setting::FewShot),
        Command::Finetune(args) => evaluate(cli, args, Setting::FullData),
        Command::Ablation {
            variants,
            checkpoint,
            variant,
            few_shot,
            k,
            train,
        } => ablation(cli, variants, checkpoint.as_deref(), *variant, *few_shot, *k, train),
        Command::ComposeExperiment { k, train } => compose_experiment(cli, *k, train),
        Command::ComposeDebug {
            schemas,
            task,
            record,
            record_file,
            ablation,
            prompt_table,
            max_len,
        } => compose_debug(
            cli,
            schemas.as_deref(),
            task.as_deref(),
            record.as_deref(),
            record_file.as_deref(),
            ablation.config(),
            prompt_table.as_deref(),
            *max_len,
        ),
        Command::GenSynthetic {
            train_per_task,
            test_per_task,
        } => gen_synthetic(cli, *train_per_task, *test_per_task),
    }
}

fn build_mixture(cli: &Cli, cap: Option<usize>) -> Result<String> {
    let ctx = cli.ctx()?;
    let seed = ctx.seeds[0];
    let manifest = ctx.exp.build_mixture(cap.unwrap_or(ctx.exp.config.cap), seed)?;
    write(&ctx.out.join("manifest.json"), &manifest.to_json())?;
    let mut s = banner(&ctx.exp, &[seed]) + "\n";
    for e in &manifest.entries {
        let _ = writeln!(s, "{}\t{}\t(of {})", e.task, e.count, e.available);
    }
    let _ = writeln!(s, "total\t{}", manifest.total());
    Ok(s)
}

fn pretrain(
    cli: &Cli,
    train: &TrainArgs,
    ablation: Option<AblationArg>,
    prompt_table: Option<&Path>,
    cap: Option<usize>,
) -> Result<String> {
    let mut ctx = cli.ctx()?;
    if let Some(c) = cap {
        ctx.exp.config.cap = c;
    }
    let seed = ctx.seeds[0];
    let ablation = ablation.map(AblationArg::config).unwrap_or(ctx.exp.config.ablation);
    let cfg = train.resolve(&ctx.exp.config.pretrain.clone())?;
    let (ckpt, log, manifest) = match prompt_table {
        None => ctx.exp.pretrain(seed, ablation, &cfg, ctx.exec)?,
        Some(p) => pretrain_from_table(&ctx, seed, ablation, &cfg, &PromptTable::load(p)?)?,
    };
    let tag = slug(ablation);
    let suffix = if tag == "full" { String::new() } else { format!(".{tag}") };
    save_checkpoint(&ckpt, &ctx.out.join(format!("checkpoint{suffix}.spck")))?;
    ckpt.table.save(&ctx.out.join(format!("prompts{suffix}.sppt")))?;
    write(&ctx.out.join(format!("loss_log{suffix}.jsonl")), &log.to_jsonl())?;
    write(&ctx.out.join("manifest.json"), &manifest.to_json())?;
    let mut s = banner(&ctx.exp, &[seed]) + "\n";
    let _ = writeln!(s, "ablation {} steps {}", ablation.label(), ckpt.state.step);
    for (epoch, loss) in log.epoch_means() {
        let _ = writeln!(s, "epoch {epoch}\tloss {loss:.6}");
    }
    Ok(s)
}

fn pretrain_from_table(
    ctx: &Ctx,
    seed: u64,
    ablation: AblationConfig,
    cfg: &TrainConfig,
    table: &PromptTable,
) -> Result<(Checkpoint, crate::harness::TrainLog, crate::ingest::MixtureManifest)> {
    let manifest = ctx.exp.build_mixture(ctx.exp.config.cap, seed)?;
    let records = ctx.exp.mixture_records(&manifest)?;
    let mut ckpt = ctx.exp.init_checkpoint(seed, ablation)?;
    if table.dim() != ckpt.model.config().embed_dim {
        return Err(Error::DimMismatch(format!(
            "prompt table dim {} but model embed_dim {}",
            table.dim(),
            ckpt.model.config().embed_dim
        )));
    }
    ckpt.table = table.clone();
    let tokenizer = ckpt.tokenizer.clone();
    let encoder = ctx.exp.encoder(&tokenizer, ablation);
    let examples = encoder.training_examples(&mut ckpt.table, &records, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    if cfg.total_updates(examples.len()) == 0 {
        return Ok((ckpt, Default::default(), manifest));
    }
    let (ckpt, log) = crate::harness::train_multitask(ckpt, &examples, &cfg, ctx.exec)?;
    Ok((ckpt, log, manifest))
}

fn load_for_eval(path: &Path, prompt_table: Option<&Path>) -> Result<Checkpoint> {
    let mut ckpt = load_checkpoint(path)?;
    if let Some(p) = prompt_table {
        let table = PromptTable::load(p)?;
        if table.dim() != ckpt.model.config().embed_dim {
            return Err(Error::DimMismatch(format!(
                "prompt table dim {} but model embed_dim {}",
                table.dim(),
                ckpt.model.config().embed_dim
            )));
        }
        ckpt.table = table;
    }
    Ok(ckpt)
}

fn setting_slug(s: Setting) -> &'static str {
    match s {
        Setting::ZeroShot => "zero_shot",
        Setting::FewShot => "few_shot",
        Setting::FullData => "full_data",
    }
}

fn evaluate(cli: &Cli, args: &EvalArgs, setting: Setting) -> Result<String> {
    let mut ctx = cli.ctx()?;
    let ckpt = load_for_eval(&args.checkpoint, args.prompt_table.as_deref())?;
    let ablation = args.ablation.map(AblationArg::config).unwrap_or(ckpt.ablation);
    if let Some(k) = args.k {
        ctx.exp.config.k = k;
    }
    if args.train.train_config.is_some() || args.train.steps.is_some() {
        let default = match setting {
            Setting::FullData => ctx.exp.config.finetune.clone(),
            _ => ctx.exp.config.fewshot.clone(),
        };
        let cfg = args.train.resolve(&default)?;
        let path = ctx.out.join("train_config.override.json");
        write(&path, &serde_json::to_string_pretty(&cfg)?)?;
        let p = path.to_string_lossy().into_owned();
        match setting {
            Setting::FullData => ctx.exp.config.finetune = p,
            _ => ctx.exp.config.fewshot = p,
        }
    }
    let opts = DecodeOptions {
        length_normalize: args.length_normalize,
        max_new_tokens: None,
    };
    let metric = args.metric.map(Metric::from);
    let mut results = Vec::new();
    for &seed in &ctx.seeds {
        results.extend(ctx.exp.evaluate_all(&ckpt, setting, ablation, metric, opts, seed, ctx.exec)?);
    }
    report(&ctx, &results, setting_slug(setting))
}

fn report(ctx: &Ctx, results: &[EvalResult], name: &str) -> Result<String> {
    write(&ctx.out.join(format!("results.{name}.jsonl")), &results_to_jsonl(results))?;
    let table = render_table(results);
    write(&ctx.out.join(format!("report.{name}.md")), &table)?;
    Ok(table)
}

fn ablation(
    cli: &Cli,
    variants: &[AblationArg],
    checkpoint: Option<&Path>,
    variant: Option<AblationArg>,
    few_shot: bool,
    k: Option<usize>,
    train: &TrainArgs,
) -> Result<String> {
    let mut ctx = cli.ctx()?;
    if let Some(k) = k {
        ctx.exp.config.k = k;
    }
    let opts = DecodeOptions::default();
    let mut results = Vec::new();
    if let (Some(path), Some(v)) = (checkpoint, variant) {
        let ckpt = load_checkpoint(path)?;
        for &seed in &ctx.seeds {
            results.extend(ctx.exp.evaluate_all(&ckpt, Setting::ZeroShot, v.config(), None, opts, seed, ctx.exec)?);
        }
        return report(&ctx, &results, &format!("ablation.{}", slug(v.config())));
    }
    let cfg = train.resolve(&ctx.exp.config.pretrain.clone())?;
    for &seed in &ctx.seeds {
        for v in variants {
            let ab = v.config();
            let (ckpt, _, _) = ctx.exp.pretrain(seed, ab, &cfg, ctx.exec)?;
            save_checkpoint(&ckpt, &ctx.out.join(format!("checkpoint.{}.seed{seed}.spck", slug(ab))))?;
            let label = Some(ab.label());
            for r in ctx.exp.evaluate_all(&ckpt, Setting::ZeroShot, ab, None, opts, seed, ctx.exec)? {
                results.push(EvalResult { variant: label.clone(), ..r });
            }
            if few_shot {
                for r in ctx.exp.evaluate_all(&ckpt, Setting::FewShot, ab, None, opts, seed, ctx.exec)? {
                    results.push(EvalResult { variant: label.clone(), ..r });
                }
            }
        }
    }
    report(&ctx, &results, "ablation")
}

fn compose_experiment(cli: &Cli, k: Option<usize>, train: &TrainArgs) -> Result<String> {
    let mut ctx = cli.ctx()?;
    if let Some(k) = k {
        ctx.exp.config.k = k;
    }
    let exp = &ctx.exp;
    let mut trained_keys: BTreeSet<String> = BTreeSet::new();
    for task in &exp.taxonomy.train_tasks {
        let schema = exp.registry.get(task)?;
        trained_keys = key_union(schema, schema).union(&trained_keys).cloned().collect();
    }
    let mut s = banner(exp, &ctx.seeds) + "\n";
    let _ = writeln!(
        s,
        "training formats: {}",
        exp.taxonomy.train_formats(&exp.registry).into_iter().collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(s, "trained keys: {}", trained_keys.iter().cloned().collect::<Vec<_>>().join(", "));
    let cfg = train.resolve(&exp.config.pretrain)?;
    let opts = DecodeOptions::default();
    let mut results = Vec::new();
    let mut flagged: BTreeSet<String> = BTreeSet::new();
    for &seed in &ctx.seeds {
        let (ckpt, _, _) = exp.pretrain(seed, exp.config.ablation, &cfg, ctx.exec)?;
        for task in &exp.taxonomy.eval_tasks {
            let (_, zs) = prepare_zero_shot(&ckpt, exp.registry.get(task)?)?;
            for g in zs.unseen() {
                flagged.insert(format!("{task}: {g} (fresh init)"));
            }
        }
        results.extend(exp.evaluate_all(&ckpt, Setting::ZeroShot, exp.config.ablation, None, opts, seed, ctx.exec)?);
        results.extend(exp.evaluate_all(&ckpt, Setting::FewShot, exp.config.ablation, None, opts, seed, ctx.exec)?);
    }
    for task in &exp.taxonomy.eval_tasks {
        let keys = exp.registry.get(task)?.key_set();
        let missing: Vec<&String> = keys.iter().filter(|k| !trained_keys.contains(*k)).collect();
        let _ = writeln!(
            s,
            "{task}: keys {} {}",
            keys.iter().cloned().collect::<Vec<_>>().join(","),
            if missing.is_empty() { "(all pre-trained)".to_string() } else { format!("(untrained: {missing:?})") }
        );
    }
    for f in &flagged {
        let _ = writeln!(s, "flagged {f}");
    }
    s.push_str(&report(&ctx, &results, "compose")?);
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn compose_debug(
    cli: &Cli,
    schemas: Option<&Path>,
    task: Option<&str>,
    record: Option<&str>,
    record_file: Option<&Path>,
    ablation: AblationConfig,
    prompt_table: Option<&Path>,
    max_len: usize,
) -> Result<String> {
    let (registry, shape) = match (schemas, &cli.config) {
        (Some(p), _) => {
            let file = std::fs::File::open(p).map_err(|_| Error::FileNotFound(p.to_path_buf()))?;
            (SchemaRegistry::from_jsonl(std::io::BufReader::new(file))?, PromptShape::default())
        }
        (None, Some(_)) => {
            let ctx = cli.ctx()?;
            (ctx.exp.registry, ctx.exp.config.prompts)
        }
        (None, None) => return Err(Error::InvalidConfig("pass --schemas or --config".into())),
    };
    let line = match (record, record_file) {
        (Some(r), _) => r.to_string(),
        (None, Some(p)) => std::fs::read_to_string(p)
            .map_err(|_| Error::FileNotFound(p.to_path_buf()))?
            .lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or_default()
            .to_string(),
        (None, None) => return Err(Error::InvalidConfig("pass --record or --record-file".into())),
    };
    let value: serde_json::Value = serde_json::from_str(&line)?;
    let task = match task {
        Some(t) => t.to_string(),
        None => value
            .get("task")
            .and_then(|t| t.as_str())
            .map(String::from)
            .ok_or_else(|| Error::InvalidConfig("record has no `task` field; pass --task".into()))?,
    };
    let schema = registry.get(&task)?;
    let mut obj = value;
    if obj.get("target").is_none() {
        obj["target"] = "".into();
    }
    let instance = parse_record(&obj.to_string(), schema).ok_or_else(|| Error::EncodingError {
        path: PathBuf::from("<record>"),
        reason: format!("record does not match the `{task}` schema"),
    })?;
    let words: Vec<String> = instance
        .values
        .values()
        .map(|v| match v {
            crate::compose::ComponentValue::Text(t) => t.clone(),
            crate::compose::ComponentValue::List(l) => l.join(" "),
        })
        .collect();
    let tokenizer = WordTokenizer::fit(words.iter().map(String::as_str), usize::MAX);
    let table;
    let layout: &dyn SlotLayout = match prompt_table {
        Some(p) => {
            table = PromptTable::load(p)?;
            &table
        }
        None => &shape.init_config(0),
    };
    let composed = compose(&instance, schema, ablation, &tokenizer, layout, max_len)?;
    Ok(render_debug(&composed, &tokenizer) + "\n")
}

fn gen_synthetic(cli: &Cli, train_per_task: usize, test_per_task: usize) -> Result<String> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let suite = synth::generate(&synth::SynthConfig {
        train_per_task,
        test_per_task,
        seed: cli.seed.unwrap_or(0),
    });
    suite.write_to(&out)?;
    let config = serde_json::json!({
        "taxonomy": "taxonomy.json",
        "schemas": "schemas.jsonl",
        "datasets": "datasets.json",
        "prompts": {"key_length": 2, "format_length": 3, "task_length": 3, "output_length": 2},
        "pretrain": "toy",
        "fewshot": "toy_fewshot",
        "finetune": "toy",
        "seeds": [0, 1, 2, 3, 4],
        "k": 32,
        "out": "out"
    });
    write(&out.join("experiment.json"), &serde_json::to_string_pretty(&config)?)?;
    Ok(format!("wrote synthetic suite to {}\n", out.display()))
}
