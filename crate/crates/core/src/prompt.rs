//! Prompts and the `[source; prompt; target]` sequence layout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bpe::Tokenizer;
use crate::model::{cst, Item, Scalar};
use crate::training::LossMask;
use crate::{Error, Result};

/// Prompt length used for relation extraction and QA.
pub const DEFAULT_CONTINUOUS_LENGTH: usize = 9;
/// Prompt length used for document classification.
pub const DOC_CLASSIFICATION_CONTINUOUS_LENGTH: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PromptSpec {
    /// Natural-language instruction tokenized like ordinary text.
    Hard(String),
    /// Learned virtual tokens.
    Continuous(usize),
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PromptSpec::Hard(text) if text.trim().is_empty() => Err(Error::Config("hard prompt text is empty".into())),
            PromptSpec::Continuous(0) => Err(Error::Config("continuous prompt length must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Prompt positions as model inputs.
    pub fn items(&self, tokenizer: &Tokenizer) -> Vec<Item> {
        match self {
            PromptSpec::Hard(text) => tokenizer.encode(text).into_iter().map(Item::Token).collect(),
            PromptSpec::Continuous(n) => (0..*n).map(Item::Virtual).collect(),
        }
    }

    pub fn continuous_length(&self) -> Option<usize> {
        match self {
            PromptSpec::Continuous(n) => Some(*n),
            PromptSpec::Hard(_) => None,
        }
    }
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec::Continuous(DEFAULT_CONTINUOUS_LENGTH)
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptSpec::Hard(text) => write!(f, "hard:{text}"),
            PromptSpec::Continuous(n) => write!(f, "cont:{n}"),
        }
    }
}

impl FromStr for PromptSpec {
    type Err = Error;

    /// `hard:<text>` or `cont:<length>`.
    fn from_str(s: &str) -> Result<Self> {
        let spec = if let Some(text) = s.strip_prefix("hard:") {
            PromptSpec::Hard(text.to_owned())
        } else if let Some(n) = s.strip_prefix("cont:") {
            PromptSpec::Continuous(
                n.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad continuous prompt length {n:?}")))?,
            )
        } else {
            return Err(Error::Config(format!(
                "prompt must be hard:<text> or cont:<length>, got {s:?}"
            )));
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Learned virtual-token embeddings, `length × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams<F> {
    pub length: usize,
    pub hidden: usize,
    pub embeddings: Vec<F>,
}

impl<F: Scalar> PromptParams<F> {
    /// Checkpoint tensor name.
    pub const TENSOR_NAME: &'static str = "prompt.embeddings";

    pub fn init(length: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        PromptParams {
            length,
            hidden,
            embeddings: (0..length * hidden).map(|_| cst(normal.sample(&mut rng))).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PromptParams {
            length: self.length,
            hidden: self.hidden,
            embeddings: vec![F::zero(); self.embeddings.len()],
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.embeddings[i * self.hidden..(i + 1) * self.hidden]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.embeddings[i * self.hidden..(i + 1) * self.hidden]
    }

    pub fn cast<G: Scalar>(&self) -> PromptParams<G> {
        PromptParams {
            length: self.length,
            hidden: self.hidden,
            embeddings: self
                .embeddings
                .iter()
                .map(|v| cst(v.to_f64().expect("finite")))
                .collect(),
        }
    }
}

/// A training sequence with its next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub items: Vec<Item>,
    /// `targets[t]` is the token expected after position `t`; only
    /// meaningful where the mask is set.
    pub targets: Vec<u32>,
    pub mask: LossMask,
    /// Index of the first prompt position (equals the kept source length).
    pub prompt_start: usize,
    /// Source tokens dropped from the left to fit `max_positions`.
    pub truncated: usize,
}

fn fit_source(source: &[u32], reserved: usize, max_positions: usize) -> Result<(&[u32], usize)> {
    if reserved > max_positions {
        return Err(Error::LengthOverflow {
            len: reserved,
            max: max_positions,
        });
    }
    let room = max_positions - reserved;
    if source.len() <= room {
        return Ok((source, 0));
    }
    let dropped = source.len() - room;
    log::warn!("source truncated by {dropped} token(s) from the left to fit {max_positions} positions");
    Ok((&source[dropped..], dropped))
}

/// Builds `[source; prompt; target]`. The loss mask selects exactly the
/// positions whose next token belongs to the target.
pub fn assemble(source: &[u32], prompt: &[Item], target: &[u32], max_positions: usize) -> Result<Assembled> {
    let (source, truncated) = fit_source(source, prompt.len() + target.len(), max_positions)?;
    let mut items: Vec<Item> = source.iter().copied().map(Item::Token).collect();
    let prompt_start = items.len();
    items.extend_from_slice(prompt);
    let target_start = items.len();
    items.extend(target.iter().copied().map(Item::Token));

    let n = items.len();
    let mut targets = vec![0u32; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        if t + 1 >= target_start {
            if let Item::Token(id) = items[t + 1] {
                targets[t] = id;
                mask[t] = true;
            }
        }
    }
    Ok(Assembled {
        items,
        targets,
        mask: LossMask(mask),
        prompt_start,
        truncated,
    })
}

/// Plain language-modeling sequence: every next token is a target.
pub fn lm_sequence(ids: &[u32]) -> Assembled {
    let items: Vec<Item> = ids.iter().copied().map(Item::Token).collect();
    let n = items.len();
    let mut targets = vec![0u32; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = ids[t + 1];
        mask[t] = true;
    }
    Assembled {
        items,
        targets,
        mask: LossMask(mask),
        prompt_start: n,
        truncated: 0,
    }
}

/// `[source; prompt]`, the conditioning prefix for generation. `reserve`
/// positions are kept free for generated tokens.
pub fn inference_prefix(source: &[u32], prompt: &[Item], max_positions: usize, reserve: usize) -> Result<Vec<Item>> {
    let (source, _) = fit_source(source, prompt.len() + reserve, max_positions)?;
    let mut items: Vec<Item> = source.iter().copied().map(Item::Token).collect();
    items.extend_from_slice(prompt);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("cont:9".parse::<PromptSpec>().unwrap(), PromptSpec::Continuous(9));
        assert_eq!(
            "hard:we can conclude that".parse::<PromptSpec>().unwrap(),
            PromptSpec::Hard("we can conclude that".into())
        );
        assert!("cont:0".parse::<PromptSpec>().is_err());
        assert!("hard:".parse::<PromptSpec>().is_err());
        assert!("soft:3".parse::<PromptSpec>().is_err());
        assert_eq!(PromptSpec::default().to_string(), "cont:9");
    }

    #[test]
    fn hard_prompt_is_tokenized_between_source_and_target() {
        let tok = Tokenizer::train(&["we can conclude that x inhibits y."], 20).unwrap();
        let prompt = PromptSpec::Hard("we can conclude that".into()).items(&tok);
        let source = tok.encode("x inhibits y.");
        let target = tok.encode("y.");
        let a = assemble(&source, &prompt, &target, 64).unwrap();
        assert_eq!(a.items.len(), source.len() + prompt.len() + target.len());
        assert_eq!(&a.items[a.prompt_start..a.prompt_start + prompt.len()], &prompt[..]);
        assert!(prompt.iter().all(|i| matches!(i, Item::Token(_))));
    }

    #[test]
    fn continuous_length_one_adds_one_position() {
        let prompt = PromptSpec::Continuous(DOC_CLASSIFICATION_CONTINUOUS_LENGTH);
        let tok = Tokenizer::train(&["ab"], 0).unwrap();
        let prefix = inference_prefix(&[4, 5, 6], &prompt.items(&tok), 32, 4).unwrap();
        assert_eq!(prefix.len(), 4);
        assert_eq!(prefix[3], Item::Virtual(0));
    }

    #[test]
    fn empty_source_prefix_is_prompt_only() {
        let prompt: Vec<Item> = (0..3).map(Item::Virtual).collect();
        assert_eq!(inference_prefix(&[], &prompt, 16, 4).unwrap(), prompt);
    }

    #[test]
    fn overflow_truncates_source_from_the_left() {
        let prompt: Vec<Item> = (0..2).map(Item::Virtual).collect();
        let a = assemble(&[10, 11, 12, 13, 14], &prompt, &[20, 21], 6).unwrap();
        assert_eq!(a.truncated, 3);
        assert_eq!(a.items[..2], [Item::Token(13), Item::Token(14)]);
        assert_eq!(a.items.len(), 6);
        assert!(assemble(&[1], &prompt, &[1; 5], 6).is_err());
    }

    #[test]
    fn lm_sequence_masks_all_but_last() {
        let s = lm_sequence(&[5, 6, 7]);
        assert_eq!(s.mask.0, [true, true, false]);
        assert_eq!(s.targets[..2], [6, 7]);
    }

    proptest! {
        #[test]
        fn mask_covers_exactly_the_target(src in 0usize..10, plen in 1usize..6, tgt in 1usize..8) {
            let source: Vec<u32> = (0..src as u32).collect();
            let prompt: Vec<Item> = (0..plen).map(Item::Virtual).collect();
            let target: Vec<u32> = (100..100 + tgt as u32).collect();
            let a = assemble(&source, &prompt, &target, 64).unwrap();
            prop_assert_eq!(a.items.len(), src + plen + tgt);
            prop_assert_eq!(a.prompt_start, src);
            let target_start = src + plen;
            for t in 0..a.items.len() {
                prop_assert_eq!(a.mask.0[t], t + 1 >= target_start && t + 1 < a.items.len());
                if a.mask.0[t] {
                    prop_assert_eq!(Item::Token(a.targets[t]), a.items[t + 1]);
                }
            }
        }

        #[test]
        fn swapping_prompt_kind_keeps_source_and_target(src in 0usize..6, tgt in 1usize..5) {
            let tok = Tokenizer::train(&["in conclusion, a b c"], 10).unwrap();
            let source: Vec<u32> = vec![7; src];
            let target: Vec<u32> = vec![8; tgt];
            let hard = assemble(&source, &PromptSpec::Hard("in conclusion,".into()).items(&tok), &target, 64).unwrap();
            let soft = assemble(&source, &PromptSpec::Continuous(4).items(&tok), &target, 64).unwrap();
            prop_assert_eq!(&hard.items[..src], &soft.items[..src]);
            prop_assert_eq!(&hard.items[hard.items.len() - tgt..], &soft.items[soft.items.len() - tgt..]);
        }
    }
}
