//! Micro-averaged precision/recall/F1, QA accuracy, and the end-to-end
//! evaluation harness.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::corpus::{Label, QaAnswer, TaskExample};
use crate::decode::{generate, DecodeConfig};
use crate::model::Weights;
use crate::prompt::{inference_prefix, PromptSpec};
use crate::taskcodec::{decode_doc_target, decode_qa_target, normalize, TaskCodec, TripletParser};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

impl Counts {
    pub fn of_sets<T: Eq + Hash>(pred: &HashSet<T>, gold: &HashSet<T>) -> Self {
        let tp = pred.intersection(gold).count();
        Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn prf(self) -> Prf {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Pairs each predicted entry with the gold entry of the same id.
fn align<'a, P, G>(pred: &'a [(String, P)], gold: &'a [(String, G)]) -> Result<Vec<(&'a str, &'a P, &'a G)>> {
    if pred.len() != gold.len() {
        return Err(Error::Misaligned(format!(
            "{} predictions for {} gold documents",
            pred.len(),
            gold.len()
        )));
    }
    let mut by_id: HashMap<&str, &P> = HashMap::with_capacity(pred.len());
    for (id, p) in pred {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(Error::Misaligned(format!("duplicate prediction id {id:?}")));
        }
    }
    let mut out = Vec::with_capacity(gold.len());
    for (id, g) in gold {
        let p = by_id
            .remove(id.as_str())
            .ok_or_else(|| Error::Misaligned(format!("no prediction for document {id:?}")))?;
        out.push((id.as_str(), p, g));
    }
    Ok(out)
}

/// Per-document counts, in gold order, and their micro-averaged scores.
pub fn micro_counts<T: Eq + Hash>(
    pred: &[(String, HashSet<T>)],
    gold: &[(String, HashSet<T>)],
) -> Result<(Vec<Counts>, Counts)> {
    let per_doc: Vec<Counts> = align(pred, gold)?
        .into_iter()
        .map(|(_, p, g)| Counts::of_sets(p, g))
        .collect();
    let total = per_doc.iter().fold(Counts::default(), |a, &c| a + c);
    Ok((per_doc, total))
}

pub fn micro_prf<T: Eq + Hash>(pred: &[(String, HashSet<T>)], gold: &[(String, HashSet<T>)]) -> Result<Prf> {
    Ok(micro_counts(pred, gold)?.1.prf())
}

/// Fraction of exact matches; a `None` prediction (rejected answer) is wrong.
pub fn qa_accuracy(pred: &[(String, Option<QaAnswer>)], gold: &[(String, QaAnswer)]) -> Result<f64> {
    let pairs = align(pred, gold)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let correct = pairs.iter().filter(|(_, p, g)| **p == Some(**g)).count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocReport {
    pub id: String,
    pub prediction: String,
    #[serde(flatten)]
    pub counts: Counts,
    /// Clauses (or answers) that could not be parsed.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(flatten)]
    pub counts: Counts,
    pub skipped: usize,
    pub documents: Vec<DocReport>,
}

impl EvalReport {
    pub fn metric_line(&self) -> String {
        match (self.precision, self.recall, self.f1, self.accuracy) {
            (Some(p), Some(r), Some(f), _) => format!("P={p:.4} R={r:.4} F1={f:.4}"),
            (_, _, _, Some(a)) => format!("ACC={a:.4}"),
            _ => String::from("no metric"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Turns generated text into a prediction and scores it against `label`.
pub(crate) fn score_text(
    codec: &TaskCodec,
    parser: Option<&TripletParser>,
    text: &str,
    label: &Label,
) -> Result<(Counts, usize)> {
    match (codec, label) {
        (TaskCodec::Relations { .. }, Label::Triplets(gold)) => {
            let decoded = parser.expect("parser for relation codec").decode(text);
            let gold: HashSet<_> = gold.iter().map(|t| t.normalized()).collect();
            Ok((Counts::of_sets(&decoded.set(), &gold), decoded.skipped))
        }
        (TaskCodec::Answer, Label::Answer(gold)) => {
            let pred = decode_qa_target(text);
            let correct = usize::from(pred == Some(*gold));
            Ok((
                Counts {
                    tp: correct,
                    fp: 1 - correct,
                    fn_: 1 - correct,
                },
                usize::from(pred.is_none()),
            ))
        }
        (TaskCodec::Classes { universe }, Label::Classes(gold)) => {
            let universe: Vec<&str> = universe.iter().map(String::as_str).collect();
            let pred: HashSet<String> = decode_doc_target(text, &universe).into_iter().collect();
            let gold: HashSet<String> = gold
                .iter()
                .map(|g| {
                    universe
                        .iter()
                        .find(|u| normalize(u) == normalize(g))
                        .map(|u| (*u).to_owned())
                        .unwrap_or_else(|| g.clone())
                })
                .collect();
            Ok((Counts::of_sets(&pred, &gold), 0))
        }
        _ => Err(Error::Config(format!("label does not belong to task {}", codec.task()))),
    }
}

/// Generates a prediction for every example and scores the split.
pub fn evaluate_pipeline(
    weights: &Weights<f32>,
    tokenizer: &Tokenizer,
    prompt: &PromptSpec,
    examples: &[TaskExample],
    codec: &TaskCodec,
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    decode.validate()?;
    if let Some(ex) = examples.iter().find(|e| e.task != codec.task()) {
        return Err(Error::Config(format!(
            "example {} is {}, evaluation expects {}",
            ex.id,
            ex.task,
            codec.task()
        )));
    }
    if let Some(n) = prompt.continuous_length() {
        let have = weights.prompt.as_ref().map(|p| p.length);
        if have != Some(n) {
            return Err(Error::CheckpointMismatch(format!(
                "prompt {prompt} needs {n} learned vectors, checkpoint has {}",
                have.map_or("none".to_owned(), |h| h.to_string())
            )));
        }
    }
    let parser = match codec {
        TaskCodec::Relations { format, lexicon } => Some(TripletParser::new(*format, lexicon)),
        _ => None,
    };
    let prompt_items = prompt.items(tokenizer);
    let max_positions = weights.config().max_positions;

    let documents: Vec<DocReport> = examples
        .par_iter()
        .map(|ex| -> Result<DocReport> {
            let source = tokenizer.encode(&ex.source);
            let prefix = inference_prefix(&source, &prompt_items, max_positions, decode.max_new_tokens)?;
            let generated = generate(weights, &prefix, decode)?;
            let prediction = tokenizer.decode(&generated.tokens)?;
            let (counts, skipped) = score_text(codec, parser.as_ref(), &prediction, &ex.label)?;
            Ok(DocReport {
                id: ex.id.clone(),
                prediction,
                counts,
                skipped,
            })
        })
        .collect::<Result<_>>()?;
    Ok(build_report(codec, documents))
}

pub(crate) fn build_report(codec: &TaskCodec, documents: Vec<DocReport>) -> EvalReport {
    let counts = documents.iter().fold(Counts::default(), |a, d| a + d.counts);
    let skipped = documents.iter().map(|d| d.skipped).sum();
    let mut report = EvalReport {
        task: codec.task().to_string(),
        examples: documents.len(),
        precision: None,
        recall: None,
        f1: None,
        accuracy: None,
        counts,
        skipped,
        documents,
    };
    match codec {
        TaskCodec::Answer => {
            report.accuracy = Some(if report.examples == 0 {
                0.0
            } else {
                counts.tp as f64 / report.examples as f64
            });
        }
        _ => {
            let prf = counts.prf();
            report.precision = Some(prf.precision);
            report.recall = Some(prf.recall);
            report.f1 = Some(prf.f1);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(sets: &[(&str, &[&str])]) -> Vec<(String, HashSet<String>)> {
        sets.iter()
            .map(|(id, items)| (id.to_string(), items.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn hand_counted_two_documents() {
        let gold = docs(&[("doc1", &["a", "b"]), ("doc2", &["c"])]);
        let pred = docs(&[("doc1", &["a"]), ("doc2", &["c", "d"])]);
        let (_, c) = micro_counts(&pred, &gold).unwrap();
        assert_eq!(c, Counts { tp: 2, fp: 1, fn_: 1 });
        let prf = c.prf();
        for v in [prf.precision, prf.recall, prf.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = docs(&[("a", &["x", "y"]), ("b", &["z"])]);
        let prf = micro_prf(&gold, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        let empty = docs(&[("a", &[]), ("b", &[])]);
        let prf = micro_prf(&empty, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let gold = docs(&[("a", &["x"])]);
        assert!(matches!(
            micro_prf(&docs(&[("b", &["x"])]), &gold),
            Err(Error::Misaligned(_))
        ));
        assert!(matches!(micro_prf(&docs(&[]), &gold), Err(Error::Misaligned(_))));
        let dup = docs(&[("a", &[]), ("a", &[])]);
        assert!(micro_prf(&dup, &docs(&[("a", &[]), ("b", &[])])).is_err());
    }

    #[test]
    fn rejected_answer_counts_as_wrong() {
        let ids = ["1", "2", "3", "4"].map(String::from);
        let gold: Vec<_> = ids
            .iter()
            .cloned()
            .zip([QaAnswer::Yes, QaAnswer::No, QaAnswer::Maybe, QaAnswer::Yes])
            .collect();
        let pred: Vec<_> = ids
            .iter()
            .cloned()
            .zip([Some(QaAnswer::Yes), Some(QaAnswer::No), Some(QaAnswer::Maybe), None])
            .collect();
        assert_eq!(qa_accuracy(&pred, &gold).unwrap(), 0.75);
        let all: Vec<_> = gold.iter().map(|(i, a)| (i.clone(), Some(*a))).collect();
        assert_eq!(qa_accuracy(&all, &gold).unwrap(), 1.0);
    }

    #[test]
    fn metric_line_format() {
        let report = build_report(
            &TaskCodec::hallmarks(),
            vec![DocReport {
                id: "d".into(),
                prediction: String::new(),
                counts: Counts { tp: 1, fp: 1, fn_: 0 },
                skipped: 0,
            }],
        );
        assert_eq!(report.metric_line(), "P=0.5000 R=1.0000 F1=0.6667");
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["fn"], 0);
        assert_eq!(json["documents"][0]["tp"], 1);
    }

    fn arb_docs() -> impl Strategy<Value = Vec<(HashSet<u8>, HashSet<u8>)>> {
        prop::collection::vec(
            (
                prop::collection::hash_set(0u8..12, 0..6),
                prop::collection::hash_set(0u8..12, 0..6),
            ),
            1..8,
        )
    }

    fn split(d: &[(HashSet<u8>, HashSet<u8>)]) -> (Vec<(String, HashSet<u8>)>, Vec<(String, HashSet<u8>)>) {
        let pred = d
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (i.to_string(), p.clone()))
            .collect();
        let gold = d
            .iter()
            .enumerate()
            .map(|(i, (_, g))| (i.to_string(), g.clone()))
            .collect();
        (pred, gold)
    }

    proptest! {
        #[test]
        fn reordering_documents_is_harmless(d in arb_docs(), rot in 0usize..8) {
            let (pred, gold) = split(&d);
            let mut shuffled = pred.clone();
            shuffled.rotate_left(rot % pred.len());
            prop_assert_eq!(micro_prf(&pred, &gold).unwrap(), micro_prf(&shuffled, &gold).unwrap());
        }

        #[test]
        fn f1_is_harmonic_mean(d in arb_docs()) {
            let (pred, gold) = split(&d);
            let prf = micro_prf(&pred, &gold).unwrap();
            if prf.precision + prf.recall > 0.0 {
                let h = 2.0 * prf.precision * prf.recall / (prf.precision + prf.recall);
                prop_assert!((prf.f1 - h).abs() < 1e-12);
            } else {
                prop_assert_eq!(prf.f1, 0.0);
            }
        }

        #[test]
        fn correct_prediction_never_hurts(d in arb_docs(), doc in 0usize..8) {
            let (pred, gold) = split(&d);
            let doc = doc % pred.len();
            let missing: Vec<u8> = gold[doc].1.difference(&pred[doc].1).copied().collect();
            prop_assume!(!missing.is_empty());
            let before = micro_prf(&pred, &gold).unwrap();
            let mut better = pred.clone();
            better[doc].1.insert(missing[0]);
            let after = micro_prf(&better, &gold).unwrap();
            prop_assert!(after.precision >= before.precision);
            prop_assert!(after.recall >= before.recall);
            prop_assert!(after.f1 >= before.f1);
        }

        #[test]
        fn wrong_prediction_never_raises_recall(d in arb_docs(), doc in 0usize..8) {
            let (pred, gold) = split(&d);
            let doc = doc % pred.len();
            let before = micro_prf(&pred, &gold).unwrap();
            let mut worse = pred.clone();
            worse[doc].1.insert(200);
            prop_assert!(micro_prf(&worse, &gold).unwrap().recall <= before.recall);
        }

        #[test]
        fn single_document_equals_set_level_scores(p in prop::collection::hash_set(0u8..10, 0..6), g in prop::collection::hash_set(0u8..10, 0..6)) {
            let prf = micro_prf(&[("x".to_string(), p.clone())], &[("x".to_string(), g.clone())]).unwrap();
            let tp = p.intersection(&g).count() as f64;
            let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
            let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
            prop_assert_eq!(prf.precision, precision);
            prop_assert_eq!(prf.recall, recall);
        }
    }
}
