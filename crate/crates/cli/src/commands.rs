use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use biolm_core::bpe::Vocabulary;
use biolm_core::checkpoint::Checkpoint;
use biolm_core::corpus::{load_dataset, load_split_files, read_documents, write_documents, SplitName};
use biolm_core::decode::{generate as run_generate, DecodeConfig, Strategy};
use biolm_core::eval::evaluate_pipeline;
use biolm_core::pipeline::{self, AblationInputs};
use biolm_core::prompt::inference_prefix;
use biolm_core::synthbench::{make_doc_dataset, make_qa_dataset, make_re_dataset, SynthSpec};
use biolm_core::taskcodec::{RelationLexicon, TaskCodec};
use biolm_core::training::{loss_log_csv, TrainOutcome};
use biolm_core::{DatasetSplit, ModelConfig, PromptSpec, TargetFormat, Task, Tokenizer, TrainConfig, Weights};

use crate::config::Resolver;
use crate::{
    AblateArgs, Common, DataArgs, DecodeArgs, EvaluateArgs, FinetuneArgs, GenerateArgs, LearnBpeArgs, PretrainArgs,
    SynthArgs, TrainArgs,
};

pub const DETERMINISTIC_ENV: &str = "BIOLM_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Marks an error as a usage or configuration problem (exit status 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let config_error = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(
                c.downcast_ref::<biolm_core::Error>(),
                Some(biolm_core::Error::Config(_))
            )
    });
    if config_error {
        2
    } else {
        1
    }
}

/// Reads settings, turning any problem into a usage error.
fn resolver(common: &Common) -> Result<Resolver> {
    if let Some(path) = &common.config {
        require_file(path, "config file")?;
    }
    Resolver::new(common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn path_setting(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    r.require::<String>(key, flag.map(|p| p.display().to_string()))
        .map(PathBuf::from)
        .map_err(|e| usage(e.to_string()))
}

fn opt_path(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
    Ok(r.opt::<String>(key, flag.map(|p| p.display().to_string()))
        .map_err(|e| usage(e.to_string()))?
        .map(PathBuf::from))
}

/// Settings lookups whose failures are usage errors.
macro_rules! setting {
    ($r:expr, $method:ident, $($arg:expr),+) => {
        $r.$method($($arg),+).map_err(|e| usage(e.to_string()))?
    };
}

fn out_dir(r: &mut Resolver, common: &Common) -> Result<PathBuf> {
    let dir = path_setting(r, "out_dir", common.out_dir.clone())?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn echo_config(dir: &Path, r: &Resolver) -> Result<()> {
    for key in r.unused() {
        log::warn!("config key {key} is not used by this command");
    }
    write(dir, "run_config.txt", r.echo())?;
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse().map_err(|e: biolm_core::Error| usage(e.to_string()))
}

fn load_tokenizer(r: &mut Resolver, flag: Option<PathBuf>) -> Result<Tokenizer> {
    let dir = path_setting(r, "tokenizer", flag)?;
    require_dir(&dir, "tokenizer directory")?;
    for f in ["merges.txt", "vocab.txt"] {
        require_file(&dir.join(f), "tokenizer file")?;
    }
    Ok(Tokenizer::load(&dir)?)
}

fn load_checkpoint(r: &mut Resolver, flag: Option<PathBuf>) -> Result<Checkpoint> {
    let path = path_setting(r, "checkpoint", flag)?;
    require_file(&path, "checkpoint")?;
    Checkpoint::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

struct TaskData {
    task: Task,
    split: DatasetSplit,
    lexicon: Option<RelationLexicon>,
    format: Option<TargetFormat>,
}

impl TaskData {
    fn codec(&self) -> Result<TaskCodec> {
        Ok(match self.task {
            Task::RelationExtraction => TaskCodec::Relations {
                format: self
                    .format
                    .ok_or_else(|| usage("relation extraction needs --target-format"))?,
                lexicon: self
                    .lexicon
                    .clone()
                    .ok_or_else(|| usage("relation extraction needs --lexicon"))?,
            },
            Task::QuestionAnswering => TaskCodec::Answer,
            Task::DocClassification => TaskCodec::hallmarks(),
            Task::Generation => return Err(usage("generation datasets have no labels to fine-tune or score")),
        })
    }
}

/// Loads the dataset described by `args`; `meta` supplies defaults saved in a checkpoint.
fn load_data(r: &mut Resolver, args: &DataArgs, meta: Option<&Checkpoint>) -> Result<TaskData> {
    let from_meta = |key: &str| meta.and_then(|c| c.meta(key)).map(str::to_owned);
    let task_name: String = match setting!(r, opt, "task", args.task.clone()) {
        Some(t) => t,
        None => {
            let t = from_meta("task").ok_or_else(|| usage("--task is required"))?;
            r.note("task", &t);
            t
        }
    };
    let task = parse_task(&task_name)?;
    let dataset = opt_path(r, "dataset", args.dataset.clone())?;
    let train = opt_path(r, "train", args.train.clone())?;
    let valid = opt_path(r, "valid", args.valid.clone())?;
    let test = opt_path(r, "test", args.test.clone())?;
    for p in [&dataset, &train, &valid, &test].into_iter().flatten() {
        require_file(p, "dataset file")?;
    }
    let lexicon_path = opt_path(r, "lexicon", args.lexicon.clone())?;
    if let Some(p) = &lexicon_path {
        require_file(p, "lexicon")?;
    }
    let format = match setting!(r, opt, "target_format", args.target_format.clone()) {
        Some(f) => Some(f),
        None => from_meta("target_format").inspect(|f| r.note("target_format", f)),
    };
    let format = format
        .map(|f| f.parse::<TargetFormat>().map_err(|e| usage(e.to_string())))
        .transpose()?;
    let split = match (&dataset, &train, &valid, &test) {
        (Some(d), ..) => load_dataset(d, task)?,
        (None, None, None, None) => return Err(usage("give --dataset or at least one of --train/--valid/--test")),
        _ => load_split_files(train.as_deref(), valid.as_deref(), test.as_deref(), task)?,
    };
    let lexicon = lexicon_path.map(|p| RelationLexicon::load(&p)).transpose()?;
    let format = match (task, format) {
        (Task::RelationExtraction, None) => {
            r.note("target_format", TargetFormat::RelIs);
            Some(TargetFormat::RelIs)
        }
        (_, f) => f,
    };
    Ok(TaskData {
        task,
        split,
        lexicon,
        format,
    })
}

fn resolve_train(r: &mut Resolver, args: &TrainArgs, defaults: TrainConfig) -> Result<TrainConfig> {
    let seed = setting!(r, opt, "seed", args.seed).ok_or_else(|| usage("training commands need --seed"))?;
    let epochs = match setting!(r, opt, "epochs", args.epochs) {
        Some(e) => Some(e),
        None => {
            if let Some(e) = defaults.epochs {
                r.note("epochs", e);
            }
            defaults.epochs
        }
    };
    let checkpoint_every = setting!(r, opt, "checkpoint_every", args.checkpoint_every).or(defaults.checkpoint_every);
    let config = TrainConfig {
        peak_lr: setting!(r, get, "peak_lr", args.peak_lr, defaults.peak_lr),
        warmup_steps: setting!(r, get, "warmup_steps", args.warmup_steps, defaults.warmup_steps),
        total_steps: setting!(r, get, "total_steps", args.total_steps, defaults.total_steps),
        epochs,
        tokens_per_batch: setting!(
            r,
            get,
            "tokens_per_batch",
            args.tokens_per_batch,
            defaults.tokens_per_batch
        ),
        accumulation_steps: setting!(
            r,
            get,
            "accumulation_steps",
            args.accumulation_steps,
            defaults.accumulation_steps
        ),
        beta1: setting!(r, get, "beta1", None, defaults.beta1),
        beta2: setting!(r, get, "beta2", None, defaults.beta2),
        epsilon: setting!(r, get, "epsilon", None, defaults.epsilon),
        seed,
        average_last: setting!(r, get, "average_last", args.average_last, defaults.average_last),
        checkpoint_every,
    };
    config.validate()?;
    Ok(config)
}

fn resolve_decode(
    r: &mut Resolver,
    args: &DecodeArgs,
    default_beam: usize,
    default_max: usize,
) -> Result<DecodeConfig> {
    let beam = setting!(r, get, "beam", args.beam, default_beam);
    let max_new_tokens = setting!(r, get, "max_new_tokens", args.max_new_tokens, default_max);
    let length_penalty = setting!(r, get, "length_penalty", args.length_penalty, 0.0);
    let config = DecodeConfig {
        strategy: if beam <= 1 { Strategy::Greedy } else { Strategy::Beam },
        beam_size: beam.max(1),
        max_new_tokens,
        eos_id: Vocabulary::EOS_ID,
        length_penalty,
    };
    config.validate()?;
    Ok(config)
}

/// The prompt from flag or file, else the one recorded in the checkpoint.
fn resolve_prompt(
    r: &mut Resolver,
    flag: Option<String>,
    ck: Option<&Checkpoint>,
    fallback: Option<PromptSpec>,
) -> Result<Option<PromptSpec>> {
    let text = match setting!(r, opt, "prompt", flag) {
        Some(t) => Some(t),
        None => ck.and_then(|c| c.meta("prompt")).map(str::to_owned),
    };
    let spec = match text.as_deref() {
        Some("none") => None,
        Some(t) => Some(t.parse::<PromptSpec>().map_err(|e| usage(e.to_string()))?),
        None => fallback,
    };
    r.note("prompt", spec.as_ref().map_or("none".to_owned(), ToString::to_string));
    Ok(spec)
}

fn save_outcome(dir: &Path, outcome: &TrainOutcome, meta: &[(&str, String)], prefix: &str) -> Result<Weights<f32>> {
    let with_meta = |w: &Weights<f32>| {
        meta.iter()
            .fold(Checkpoint::new(w.clone()), |c, (k, v)| c.with_meta(k, v))
    };
    for (step, w) in &outcome.checkpoints {
        with_meta(w).save(&dir.join(format!("{prefix}-{step}.bin")))?;
    }
    let averaged = outcome.averaged()?;
    with_meta(&averaged).save(&dir.join("checkpoint.bin"))?;
    write(dir, "loss.csv", loss_log_csv(&outcome.log))?;
    if let Some(d) = outcome.diverged {
        bail!("training diverged at step {} (loss {})", d.step, d.loss);
    }
    Ok(averaged)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let task = parse_task(&setting!(r, require, "task", a.task))?;
    let seed = setting!(r, require, "seed", a.seed);
    let documents = setting!(r, get, "documents", a.documents, 1000usize);
    let dir = out_dir(&mut r, &a.common)?;
    let spec = SynthSpec {
        seed,
        documents,
        ..SynthSpec::default()
    };
    let split = match task {
        Task::RelationExtraction => {
            let re = make_re_dataset(&spec);
            re.lexicon.save(&dir.join("lexicon.json"))?;
            write_documents(&dir.join("corpus.jsonl"), &re.corpus)?;
            re.dataset
        }
        Task::QuestionAnswering => make_qa_dataset(&spec),
        Task::DocClassification => make_doc_dataset(&spec),
        Task::Generation => return Err(usage("synth supports re, qa and doc")),
    };
    split.write(&dir.join("dataset.jsonl"))?;
    echo_config(&dir, &r)?;
    let (tr, va, te) = split.sizes();
    println!(
        "wrote {} (train={tr} valid={va} test={te})",
        dir.join("dataset.jsonl").display()
    );
    Ok(())
}

pub fn learn_bpe(a: LearnBpeArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let corpus = opt_path(&mut r, "corpus", a.corpus.clone())?;
    let mut documents = Vec::new();
    if let Some(p) = &corpus {
        require_file(p, "corpus")?;
        documents = read_documents(p)?;
    }
    let has_data = a.data.dataset.is_some() || a.data.train.is_some() || r.opt::<String>("dataset", None)?.is_some();
    let (train, codecs) = if has_data {
        let data = load_data(&mut r, &a.data, None)?;
        let codecs = match data.task {
            // Cover every typed format so one vocabulary serves an ablation.
            Task::RelationExtraction if a.data.target_format.is_none() => {
                let lexicon = data
                    .lexicon
                    .clone()
                    .ok_or_else(|| usage("relation extraction needs --lexicon"))?;
                let formats: &[TargetFormat] = if lexicon.binary_relation().is_some() {
                    &[TargetFormat::RelExists, TargetFormat::Structured]
                } else {
                    &TargetFormat::TYPED
                };
                formats
                    .iter()
                    .map(|&format| TaskCodec::Relations {
                        format,
                        lexicon: lexicon.clone(),
                    })
                    .collect()
            }
            _ => vec![data.codec()?],
        };
        (data.split.train, codecs)
    } else {
        (Vec::new(), Vec::new())
    };
    if documents.is_empty() && train.is_empty() {
        return Err(usage("learn-bpe needs --corpus and/or a dataset"));
    }
    let merges = setting!(r, get, "merges", a.merges, 400usize);
    let prompts: Vec<&str> = a.hard_prompt.iter().map(String::as_str).collect();
    let lines = pipeline::tokenizer_lines(&documents, &train, &codecs, &prompts)?;
    let dir = out_dir(&mut r, &a.common)?;
    let tokenizer = Tokenizer::train(&lines, merges)?;
    tokenizer.save(&dir)?;
    echo_config(&dir, &r)?;
    println!(
        "learned {} merges, vocabulary of {} tokens in {}",
        tokenizer.merges().len(),
        tokenizer.vocab_size(),
        dir.display()
    );
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let corpus = path_setting(&mut r, "corpus", a.corpus.clone())?;
    require_file(&corpus, "corpus")?;
    let tokenizer = load_tokenizer(&mut r, a.tokenizer.clone())?;
    let preset = setting!(r, get, "preset", a.preset.clone(), "desk".to_owned());
    let base = match preset.as_str() {
        "desk" => ModelConfig::desk(tokenizer.vocab_size()),
        "paper" => ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            ..ModelConfig::paper()
        },
        other => return Err(usage(format!("unknown preset {other:?} (desk or paper)"))),
    };
    let model = ModelConfig {
        num_layers: setting!(r, get, "num_layers", a.num_layers, base.num_layers),
        hidden_size: setting!(r, get, "hidden_size", a.hidden_size, base.hidden_size),
        num_heads: setting!(r, get, "num_heads", a.num_heads, base.num_heads),
        ffn_size: setting!(r, get, "ffn_size", a.ffn_size, base.ffn_size),
        max_positions: setting!(r, get, "max_positions", a.max_positions, base.max_positions),
        vocab_size: base.vocab_size,
        dropout: setting!(r, get, "dropout", a.dropout, base.dropout),
    };
    r.note("vocab_size", model.vocab_size);
    model.validate()?;
    let train = resolve_train(&mut r, &a.train, TrainConfig::default())?;
    let dir = out_dir(&mut r, &a.common)?;
    echo_config(&dir, &r)?;
    let documents = read_documents(&corpus)?;
    let outcome = pipeline::pretrain(&tokenizer, &documents, model, &train)?;
    save_outcome(&dir, &outcome, &[("stage", "pretrain".to_owned())], "step")?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "pretrained {} steps, final loss {last:.4}; wrote {}",
        outcome.log.len(),
        dir.join("checkpoint.bin").display()
    );
    Ok(())
}

/// Paper fine-tuning defaults: peak 1e-5, 100 warm-up steps, 100 epochs,
/// average of the last 5 epochs.
fn finetune_defaults() -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-5,
        warmup_steps: 100,
        epochs: Some(100),
        average_last: 5,
        ..TrainConfig::default()
    }
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let base = load_checkpoint(&mut r, a.checkpoint.clone())?;
    let tokenizer = load_tokenizer(&mut r, a.tokenizer.clone())?;
    if tokenizer.vocab_size() != base.weights.config().vocab_size {
        return Err(usage(format!(
            "tokenizer has {} tokens but the checkpoint expects {}",
            tokenizer.vocab_size(),
            base.weights.config().vocab_size
        )));
    }
    let data = load_data(&mut r, &a.data, None)?;
    let codec = data.codec()?;
    let prompt = resolve_prompt(&mut r, a.prompt.clone(), None, Some(PromptSpec::default()))?
        .ok_or_else(|| usage("fine-tuning needs a prompt"))?;
    let train = resolve_train(&mut r, &a.train, finetune_defaults())?;
    let dir = out_dir(&mut r, &a.common)?;
    echo_config(&dir, &r)?;
    if data.split.train.is_empty() {
        return Err(usage("the dataset has no training examples"));
    }
    let outcome = pipeline::finetune(&base.weights, &tokenizer, &data.split.train, &codec, &prompt, &train)?;
    let mut meta = vec![
        ("stage", "finetune".to_owned()),
        ("task", data.task.to_string()),
        ("prompt", prompt.to_string()),
    ];
    if let Some(f) = data.format {
        meta.push(("target_format", f.to_string()));
    }
    save_outcome(&dir, &outcome, &meta, "epoch")?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "fine-tuned {} steps, final loss {last:.4}; wrote {}",
        outcome.log.len(),
        dir.join("checkpoint.bin").display()
    );
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let ck = load_checkpoint(&mut r, a.checkpoint.clone())?;
    let tokenizer = load_tokenizer(&mut r, a.tokenizer.clone())?;
    let text = setting!(r, require, "prefix_text", a.prefix_text.clone());
    let prompt = resolve_prompt(&mut r, a.prompt.clone(), Some(&ck), None)?;
    let decode = resolve_decode(&mut r, &a.decode, 5, 32)?;
    if let Some(dir) = opt_path(&mut r, "out_dir", a.common.out_dir.clone())? {
        fs::create_dir_all(&dir)?;
        echo_config(&dir, &r)?;
    }
    let prompt_items = prompt.as_ref().map(|p| p.items(&tokenizer)).unwrap_or_default();
    let source = tokenizer.encode(&text);
    let prefix = inference_prefix(
        &source,
        &prompt_items,
        ck.weights.config().max_positions,
        decode.max_new_tokens,
    )?;
    let out = run_generate(&ck.weights, &prefix, &decode)?;
    println!("{}", tokenizer.decode(&out.tokens)?);
    Ok(())
}

fn split_name(r: &mut Resolver, flag: Option<String>, default: &str) -> Result<SplitName> {
    setting!(r, get, "split", flag, default.to_owned())
        .parse()
        .map_err(|e: biolm_core::Error| usage(e.to_string()))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let ck = load_checkpoint(&mut r, a.checkpoint.clone())?;
    let tokenizer = load_tokenizer(&mut r, a.tokenizer.clone())?;
    let data = load_data(&mut r, &a.data, Some(&ck))?;
    let codec = data.codec()?;
    let split = split_name(&mut r, a.split.clone(), "test")?;
    let prompt = resolve_prompt(&mut r, a.prompt.clone(), Some(&ck), None)?
        .ok_or_else(|| usage("evaluation needs the prompt used in fine-tuning (--prompt)"))?;
    let decode = resolve_decode(&mut r, &a.decode, 1, 64)?;
    let out = opt_path(&mut r, "out_dir", a.common.out_dir.clone())?;
    let examples = data.split.get(split);
    if examples.is_empty() {
        return Err(usage(format!("the {} split is empty", split.as_str())));
    }
    let report = evaluate_pipeline(&ck.weights, &tokenizer, &prompt, examples, &codec, &decode)?;
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        echo_config(&dir, &r)?;
        write(&dir, "report.json", report.to_json() + "\n")?;
    }
    println!("{}", report.metric_line());
    Ok(())
}

/// Hard prompts and continuous lengths of the prompt comparison grid.
fn default_prompts() -> Vec<PromptSpec> {
    let mut prompts: Vec<PromptSpec> = ["we have that", "in conclusion,", "we can conclude that"]
        .into_iter()
        .map(|t| PromptSpec::Hard(t.to_owned()))
        .collect();
    prompts.extend([1, 5, 9, 13, 17].map(PromptSpec::Continuous));
    prompts
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut r = resolver(&a.common)?;
    let base = load_checkpoint(&mut r, a.checkpoint.clone())?;
    let tokenizer = load_tokenizer(&mut r, a.tokenizer.clone())?;
    let data = load_data(&mut r, &a.data, None)?;
    if data.task != Task::RelationExtraction {
        return Err(usage("ablate compares relation-extraction target formats"));
    }
    let lexicon = data
        .lexicon
        .clone()
        .ok_or_else(|| usage("relation extraction needs --lexicon"))?;
    let formats: Vec<TargetFormat> = match setting!(r, opt, "formats", a.formats.clone()) {
        Some(list) => list
            .split(',')
            .map(|f| f.trim().parse().map_err(|e: biolm_core::Error| usage(e.to_string())))
            .collect::<Result<_>>()?,
        None => TargetFormat::TYPED.to_vec(),
    };
    let prompts: Vec<PromptSpec> = match setting!(r, opt, "prompts", a.prompts.clone()) {
        Some(list) => list
            .split(';')
            .map(|p| p.trim().parse().map_err(|e: biolm_core::Error| usage(e.to_string())))
            .collect::<Result<_>>()?,
        None => default_prompts(),
    };
    r.note(
        "formats",
        formats.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    r.note(
        "prompts",
        prompts.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
    );
    let split = split_name(&mut r, a.split.clone(), "valid")?;
    let train = resolve_train(&mut r, &a.train, finetune_defaults())?;
    let decode = resolve_decode(&mut r, &a.decode, 1, 64)?;
    let dir = out_dir(&mut r, &a.common)?;
    echo_config(&dir, &r)?;
    let inputs = AblationInputs {
        base: &base.weights,
        tokenizer: &tokenizer,
        train: &data.split.train,
        eval: data.split.get(split),
        lexicon: &lexicon,
        finetune: &train,
        decode: &decode,
    };
    let report = pipeline::ablate(&inputs, &formats, &prompts)?;
    write(&dir, "ablation.tsv", report.to_table())?;
    write(&dir, "ablation.json", report.to_json() + "\n")?;
    print!("{}", report.to_table());
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        return Err(anyhow!("{failed} of {} cells failed", report.cells.len()));
    }
    Ok(())
}
