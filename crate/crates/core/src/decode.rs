//! Greedy and beam-search generation from an embedded prefix.

use std::cmp::Ordering;

use crate::linalg::log_softmax;
use crate::model::{last_logits, Item, Scalar, Weights};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub eos_id: u32,
    /// Exponent of the length normalizer `len^length_penalty`; 0 ranks by
    /// the plain sum of log-probabilities.
    pub length_penalty: f64,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize, eos_id: u32) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 1,
            max_new_tokens,
            eos_id,
            length_penalty: 0.0,
        }
    }

    /// Beam search with the text-generation beam width of 5.
    pub fn beam(beam_size: usize, max_new_tokens: usize, eos_id: u32) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size,
            max_new_tokens,
            eos_id,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 || self.max_new_tokens < 1 {
            return Err(Error::Config("beam_size and max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Length-normalized score of a hypothesis with `len` emitted tokens.
    pub fn score(&self, log_prob: f64, len: usize) -> f64 {
        if self.length_penalty == 0.0 {
            log_prob
        } else {
            log_prob / (len.max(1) as f64).powf(self.length_penalty)
        }
    }
}

/// Anything that yields next-token log-probabilities for a sequence.
pub trait NextTokenModel {
    fn max_positions(&self) -> usize;

    fn next_log_probs(&self, sequence: &[Item]) -> Result<Vec<f64>>;
}

impl<F: Scalar> NextTokenModel for Weights<F> {
    fn max_positions(&self) -> usize {
        self.config().max_positions
    }

    fn next_log_probs(&self, sequence: &[Item]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = last_logits(sequence, self)?
            .into_iter()
            .map(|v| v.to_f64().expect("finite logit"))
            .collect();
        Ok(log_softmax(&logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Emitted tokens, end-of-sequence excluded.
    pub tokens: Vec<u32>,
    /// Whether generation ended with end-of-sequence.
    pub finished: bool,
    /// Sum of per-token log-probabilities, end-of-sequence included.
    pub log_prob: f64,
    /// `log_prob` divided by the length normalizer.
    pub score: f64,
}

fn check_budget<M: NextTokenModel + ?Sized>(model: &M, prefix: &[Item], config: &DecodeConfig) -> Result<()> {
    config.validate()?;
    if prefix.is_empty() {
        return Err(Error::Config("generation needs a non-empty prefix".into()));
    }
    let len = prefix.len() + config.max_new_tokens;
    if len > model.max_positions() {
        return Err(Error::LengthOverflow {
            len,
            max: model.max_positions(),
        });
    }
    Ok(())
}

/// Lowest index among the maxima.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_generate<M: NextTokenModel + ?Sized>(
    model: &M,
    prefix: &[Item],
    config: &DecodeConfig,
) -> Result<Generated> {
    check_budget(model, prefix, config)?;
    let mut seq = prefix.to_vec();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut finished = false;
    for _ in 0..config.max_new_tokens {
        let lp = model.next_log_probs(&seq)?;
        let tok = argmax(&lp);
        log_prob += lp[tok];
        if tok as u32 == config.eos_id {
            finished = true;
            break;
        }
        tokens.push(tok as u32);
        seq.push(Item::Token(tok as u32));
    }
    let len = tokens.len() + usize::from(finished);
    Ok(Generated {
        score: config.score(log_prob, len),
        tokens,
        finished,
        log_prob,
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// Beam search. Each step keeps the `beam_size` best extensions; those
/// ending in end-of-sequence leave the beam and are only compared with the
/// surviving hypotheses once the search is over.
pub fn beam_generate<M: NextTokenModel + ?Sized>(
    model: &M,
    prefix: &[Item],
    config: &DecodeConfig,
) -> Result<Generated> {
    check_budget(model, prefix, config)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_new_tokens {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut seq = prefix.to_vec();
            seq.extend(hyp.tokens.iter().copied().map(Item::Token));
            let lp = model.next_log_probs(&seq)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        candidates.truncate(config.beam_size);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&config.eos_id) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // Plain sums only shrink as hypotheses grow.
        if config.length_penalty == 0.0 {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.log_prob < best_done) {
                break;
            }
        }
    }
    let best = finished
        .into_iter()
        .chain(live)
        .map(|h| (config.score(h.log_prob, h.tokens.len()), h))
        .min_by(|(sa, a), (sb, b)| rank(*sa, &a.tokens, *sb, &b.tokens))
        .expect("at least one hypothesis");
    let (score, mut hyp) = best;
    let finished = hyp.tokens.last() == Some(&config.eos_id);
    if finished {
        hyp.tokens.pop();
    }
    Ok(Generated {
        tokens: hyp.tokens,
        finished,
        log_prob: hyp.log_prob,
        score,
    })
}

pub fn generate<M: NextTokenModel + ?Sized>(model: &M, prefix: &[Item], config: &DecodeConfig) -> Result<Generated> {
    match config.strategy {
        Strategy::Greedy => greedy_generate(model, prefix, config),
        Strategy::Beam => beam_generate(model, prefix, config),
    }
}
