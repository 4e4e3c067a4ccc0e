//! Pretrain → fine-tune → evaluate workflows and the format × prompt grid.

use rayon::prelude::*;
use serde::Serialize;

use crate::bpe::{Tokenizer, Vocabulary};
use crate::corpus::{Document, TaskExample};
use crate::decode::DecodeConfig;
use crate::eval::{evaluate_pipeline, EvalReport};
use crate::model::{ModelConfig, ModelParams, Weights};
use crate::prompt::{assemble, lm_sequence, Assembled, PromptParams, PromptSpec};
use crate::taskcodec::{RelationLexicon, TargetFormat, TaskCodec};
use crate::training::{train_loop, LossRecord, TrainConfig, TrainMode, TrainOutcome};
use crate::{Error, Result};

/// Text lines a task tokenizer is learned from: documents, training
/// sources, their rendered targets and any hard prompt texts.
pub fn tokenizer_lines(
    documents: &[Document],
    train: &[TaskExample],
    codecs: &[TaskCodec],
    hard_prompts: &[&str],
) -> Result<Vec<String>> {
    let mut lines: Vec<String> = documents.iter().map(Document::pretraining_text).collect();
    for ex in train {
        lines.push(ex.source.clone());
        for codec in codecs {
            lines.push(codec.encode(&ex.label)?);
        }
    }
    lines.extend(hard_prompts.iter().map(|p| (*p).to_owned()));
    Ok(lines)
}

/// Each document as one `title\nabstract</s>` sequence, split into windows
/// of at most `max_positions` tokens.
pub fn pretrain_sequences(tokenizer: &Tokenizer, documents: &[Document], max_positions: usize) -> Vec<Assembled> {
    let mut out = Vec::new();
    for doc in documents {
        let mut ids = tokenizer.encode(&doc.pretraining_text());
        ids.push(Vocabulary::EOS_ID);
        for window in ids.chunks(max_positions) {
            if window.len() >= 2 {
                out.push(lm_sequence(window));
            }
        }
    }
    out
}

/// `[source; prompt; target</s>]` for every example.
pub fn finetune_sequences(
    tokenizer: &Tokenizer,
    examples: &[TaskExample],
    codec: &TaskCodec,
    prompt: &PromptSpec,
    max_positions: usize,
) -> Result<Vec<Assembled>> {
    prompt.validate()?;
    let prompt_items = prompt.items(tokenizer);
    examples
        .iter()
        .map(|ex| {
            let source = tokenizer.encode(&ex.source);
            let mut target = tokenizer.encode(&codec.encode(&ex.label)?);
            target.push(Vocabulary::EOS_ID);
            assemble(&source, &prompt_items, &target, max_positions)
        })
        .collect()
}

/// Adds freshly initialized virtual-token embeddings for a continuous
/// prompt; hard prompts need none.
pub fn with_prompt(mut weights: Weights<f32>, prompt: &PromptSpec, seed: u64) -> Weights<f32> {
    weights.prompt = prompt
        .continuous_length()
        .map(|n| PromptParams::init(n, weights.config().hidden_size, seed ^ 0x7072_6f6d_7074));
    weights
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub num_merges: usize,
    /// Architecture; `vocab_size` is replaced by the learned vocabulary size.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub prompt: PromptSpec,
    pub format: TargetFormat,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Two-layer, 64-wide relation-extraction run sized for a single core.
    pub fn desk_re(seed: u64) -> Self {
        ExperimentConfig {
            num_merges: 400,
            model: ModelConfig::desk(0),
            pretrain: TrainConfig {
                peak_lr: 2e-3,
                warmup_steps: 50,
                total_steps: 500,
                tokens_per_batch: 4096,
                seed,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                peak_lr: 2e-3,
                warmup_steps: 100,
                epochs: Some(20),
                tokens_per_batch: 512,
                average_last: 5,
                seed,
                ..TrainConfig::default()
            },
            prompt: PromptSpec::default(),
            format: TargetFormat::RelIs,
            decode: DecodeConfig::greedy(64, Vocabulary::EOS_ID),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub tokenizer: Tokenizer,
    pub pretrained: Weights<f32>,
    pub pretrain_log: Vec<LossRecord>,
    /// Average of the trailing fine-tuning checkpoints.
    pub finetuned: Weights<f32>,
    pub finetune_log: Vec<LossRecord>,
    pub report: EvalReport,
}

pub fn pretrain(
    tokenizer: &Tokenizer,
    documents: &[Document],
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let data = pretrain_sequences(tokenizer, documents, model.max_positions);
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let init = Weights::new(ModelParams::init(model, config.seed)?);
    let outcome = train_loop(init, &data, config, TrainMode::Pretrain, |r| {
        if r.step % 50 == 0 {
            log::info!("pretrain step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    if let Some(d) = outcome.diverged {
        return Err(Error::Diverged {
            step: d.step,
            loss: d.loss,
        });
    }
    Ok(outcome)
}

pub fn finetune(
    base: &Weights<f32>,
    tokenizer: &Tokenizer,
    train: &[TaskExample],
    codec: &TaskCodec,
    prompt: &PromptSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let data = finetune_sequences(tokenizer, train, codec, prompt, base.config().max_positions)?;
    let mut init = base.clone();
    init.prompt = None;
    let init = with_prompt(init, prompt, config.seed);
    train_loop(init, &data, config, TrainMode::Finetune, |r| {
        if r.step % 100 == 0 {
            log::info!("finetune step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    })
}

/// Learns BPE, pretrains on `documents`, fine-tunes on the training split
/// and evaluates on `eval_examples`.
pub fn run_re_experiment(
    documents: &[Document],
    train: &[TaskExample],
    eval_examples: &[TaskExample],
    lexicon: &RelationLexicon,
    config: &ExperimentConfig,
) -> Result<ExperimentRun> {
    let codec = TaskCodec::Relations {
        format: config.format,
        lexicon: lexicon.clone(),
    };
    let lines = tokenizer_lines(documents, train, std::slice::from_ref(&codec), &[])?;
    let tokenizer = Tokenizer::train(&lines, config.num_merges)?;
    let model = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        ..config.model
    };
    let pre = pretrain(&tokenizer, documents, model, &config.pretrain)?;
    let ft = finetune(
        &pre.weights,
        &tokenizer,
        train,
        &codec,
        &config.prompt,
        &config.finetune,
    )?;
    if let Some(d) = ft.diverged {
        return Err(Error::Diverged {
            step: d.step,
            loss: d.loss,
        });
    }
    let finetuned = ft.averaged()?;
    let report = evaluate_pipeline(
        &finetuned,
        &tokenizer,
        &config.prompt,
        eval_examples,
        &codec,
        &config.decode,
    )?;
    Ok(ExperimentRun {
        tokenizer,
        pretrained: pre.weights,
        pretrain_log: pre.log,
        finetuned,
        finetune_log: ft.log,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub skipped: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub format: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<CellResult>,
    /// Failure message; the rest of the grid still runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// Tab-separated table, one row per cell.
    pub fn to_table(&self) -> String {
        let mut out = String::from("format\tprompt\tP\tR\tF1\tstatus\n");
        for c in &self.cells {
            match (&c.result, &c.error) {
                (Some(r), _) => out.push_str(&format!(
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\tok\n",
                    c.format, c.prompt, r.precision, r.recall, r.f1
                )),
                (None, e) => out.push_str(&format!(
                    "{}\t{}\t-\t-\t-\tfailed: {}\n",
                    c.format,
                    c.prompt,
                    e.as_deref().unwrap_or("unknown")
                )),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct AblationInputs<'a> {
    pub base: &'a Weights<f32>,
    pub tokenizer: &'a Tokenizer,
    pub train: &'a [TaskExample],
    pub eval: &'a [TaskExample],
    pub lexicon: &'a RelationLexicon,
    pub finetune: &'a TrainConfig,
    pub decode: &'a DecodeConfig,
}

fn run_cell(inputs: &AblationInputs<'_>, format: TargetFormat, prompt: &PromptSpec) -> Result<CellResult> {
    let codec = TaskCodec::Relations {
        format,
        lexicon: inputs.lexicon.clone(),
    };
    let outcome = finetune(
        inputs.base,
        inputs.tokenizer,
        inputs.train,
        &codec,
        prompt,
        inputs.finetune,
    )?;
    if let Some(d) = outcome.diverged {
        return Err(Error::Diverged {
            step: d.step,
            loss: d.loss,
        });
    }
    let weights = outcome.averaged()?;
    let report = evaluate_pipeline(&weights, inputs.tokenizer, prompt, inputs.eval, &codec, inputs.decode)?;
    Ok(CellResult {
        precision: report.precision.unwrap_or(0.0),
        recall: report.recall.unwrap_or(0.0),
        f1: report.f1.unwrap_or(0.0),
        skipped: report.skipped,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Fine-tunes and evaluates every `format × prompt` cell from the same base
/// weights and seed. Cells run concurrently; the report keeps grid order.
pub fn ablate(inputs: &AblationInputs<'_>, formats: &[TargetFormat], prompts: &[PromptSpec]) -> Result<AblationReport> {
    if formats.is_empty() || prompts.is_empty() {
        return Err(Error::Config(
            "ablation grid needs at least one format and one prompt".into(),
        ));
    }
    let grid: Vec<(TargetFormat, &PromptSpec)> = formats
        .iter()
        .flat_map(|&f| prompts.iter().map(move |p| (f, p)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(format, prompt)| {
            let outcome = run_cell(inputs, format, prompt);
            if let Err(e) = &outcome {
                log::error!("ablation cell {format} / {prompt} failed: {e}");
            }
            let (result, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationCell {
                format: format.to_string(),
                prompt: prompt.to_string(),
                result,
                error,
            }
        })
        .collect();
    Ok(AblationReport { cells })
}
