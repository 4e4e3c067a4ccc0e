//! Deterministic synthetic corpora and task datasets.
//!
//! Relation documents are built from fixed sentence templates around a
//! drug/target inventory of invented names, so gold labels can always be
//! read back from the text.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::corpus::{qa_source, DatasetSplit, Document, Label, QaAnswer, Task, TaskExample};
use crate::taskcodec::{sort_by_appearance, RelationLexicon, Triplet, HALLMARKS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRelation {
    pub id: String,
    /// Third-person verb used in source sentences and svo targets.
    pub verb: String,
    pub noun: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Total documents, split 8/1/1 into train/valid/test.
    pub documents: usize,
    pub drugs: usize,
    pub targets: usize,
    pub relations: Vec<SynthRelation>,
    pub max_triplets: usize,
    /// Share of relation documents without any triplet.
    pub empty_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let rel = |id: &str, verb: &str, noun: &str| SynthRelation {
            id: id.into(),
            verb: verb.into(),
            noun: noun.into(),
        };
        SynthSpec {
            seed: 0,
            documents: 1000,
            drugs: 40,
            targets: 40,
            relations: vec![
                rel("inhibitor", "inhibits", "inhibitor"),
                rel("activator", "activates", "activator"),
                rel("binder", "binds to", "binder"),
                rel("antagonist", "blocks", "antagonist"),
            ],
            max_triplets: 3,
            empty_fraction: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        SynthSpec {
            seed,
            ..SynthSpec::default()
        }
    }

    pub fn lexicon(&self) -> RelationLexicon {
        RelationLexicon::typed(
            self.relations
                .iter()
                .map(|r| (r.id.as_str(), r.verb.as_str(), r.noun.as_str())),
        )
    }

    /// `(train, valid, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = self.documents * 8 / 10;
        let valid = self.documents / 10;
        (train, valid, self.documents - train - valid)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// `count` distinct lowercase names of `syllables` CV syllables plus `suffix`.
fn inventory(
    rng: &mut ChaCha8Rng,
    count: usize,
    syllables: usize,
    suffix: &str,
    taken: &mut HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            name.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        name.push_str(suffix);
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn split_examples(spec: &SynthSpec, mut examples: Vec<TaskExample>) -> DatasetSplit {
    let (train, valid, _) = spec.split_sizes();
    let test = examples.split_off(train + valid);
    let valid_part = examples.split_off(train);
    DatasetSplit {
        train: examples,
        valid: valid_part,
        test,
    }
}

/// Indices of exactly `round(fraction · n)` documents.
fn flagged(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> HashSet<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(((n as f64) * fraction).round() as usize);
    idx.into_iter().collect()
}

const RELATION_TEMPLATES: [&str; 3] = [
    "{h} {v} {t}.",
    "we found that {h} {v} {t}.",
    "in treated cells, {h} {v} {t}.",
];
const DRUG_FILLERS: [&str; 2] = ["{e} was well tolerated.", "patients received {e} daily."];
const TARGET_FILLERS: [&str; 2] = ["expression of {e} was measured.", "the levels of {e} were stable."];

#[derive(Debug, Clone)]
pub struct SynthRe {
    pub dataset: DatasetSplit,
    pub lexicon: RelationLexicon,
    /// Pretraining documents built from the training split.
    pub corpus: Vec<Document>,
}

pub fn make_re_dataset(spec: &SynthSpec) -> SynthRe {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = HashSet::new();
    let drugs = inventory(&mut rng, spec.drugs, 3, "n", &mut taken);
    let targets = inventory(&mut rng, spec.targets, 2, "x", &mut taken);
    let empty = flagged(&mut rng, spec.documents, spec.empty_fraction);
    let max_k = spec
        .max_triplets
        .max(1)
        .min(spec.drugs.min(spec.targets).saturating_sub(1).max(1));

    let mut examples = Vec::with_capacity(spec.documents);
    let mut titles = Vec::with_capacity(spec.documents);
    for i in 0..spec.documents {
        let k = if empty.contains(&i) {
            0
        } else {
            rng.gen_range(1..=max_k)
        };
        let ds: Vec<&String> = drugs.choose_multiple(&mut rng, k + 1).collect();
        let ts: Vec<&String> = targets.choose_multiple(&mut rng, k + 1).collect();
        let mut sentences = Vec::new();
        let mut triplets = Vec::new();
        for j in 0..k {
            let rel = &spec.relations[rng.gen_range(0..spec.relations.len())];
            let template = RELATION_TEMPLATES[rng.gen_range(0..RELATION_TEMPLATES.len())];
            sentences.push(
                template
                    .replace("{h}", ds[j])
                    .replace("{v}", &rel.verb)
                    .replace("{t}", ts[j]),
            );
            triplets.push(Triplet::new(ds[j].as_str(), ts[j].as_str(), rel.id.as_str()));
        }
        // One unrelated mention, plus a second one for relation-free documents.
        let fillers = if k == 0 { 2 } else { 1 };
        for f in 0..fillers {
            let sentence = if f == 0 {
                DRUG_FILLERS[rng.gen_range(0..DRUG_FILLERS.len())].replace("{e}", ds[k])
            } else {
                TARGET_FILLERS[rng.gen_range(0..TARGET_FILLERS.len())].replace("{e}", ts[k])
            };
            let at = rng.gen_range(0..=sentences.len());
            sentences.insert(at, sentence);
        }
        let source = sentences.join(" ");
        sort_by_appearance(&mut triplets, &source);
        titles.push(format!("pharmacology of {}", ds[0]));
        examples.push(TaskExample {
            id: format!("re-{i:05}"),
            task: Task::RelationExtraction,
            source,
            label: Label::Triplets(triplets),
        });
    }
    let (train, _, _) = spec.split_sizes();
    let corpus = examples[..train]
        .iter()
        .zip(&titles)
        .map(|(ex, title)| Document {
            id: ex.id.clone(),
            title: title.clone(),
            abstract_text: ex.source.clone(),
        })
        .collect();
    SynthRe {
        dataset: split_examples(spec, examples),
        lexicon: spec.lexicon(),
        corpus,
    }
}

/// Reads triplets back from a relation document's templates.
pub fn oracle_extract(source: &str, lexicon: &RelationLexicon) -> Vec<Triplet> {
    let mut verbs: Vec<(String, String)> = lexicon
        .relations
        .iter()
        .filter_map(|(id, f)| f.verb.clone().map(|v| (v, id.clone())))
        .collect();
    verbs.sort_by_key(|(v, _)| std::cmp::Reverse(v.len()));
    if verbs.is_empty() {
        return Vec::new();
    }
    let alternation = verbs
        .iter()
        .map(|(v, _)| regex::escape(v))
        .collect::<Vec<_>>()
        .join("|");
    let re = Regex::new(&format!(r"(\w+) ({alternation}) (\w+)\.")).expect("valid regex");
    re.captures_iter(source)
        .map(|c| {
            let id = &verbs.iter().find(|(v, _)| v == &c[2]).expect("matched verb").1;
            Triplet::new(&c[1], &c[3], id.as_str())
        })
        .collect()
}

const QA_QUESTIONS: [&str; 2] = ["does {d} affect {t}?", "is {t} modulated by {d}?"];

/// Context sentence and long answer per label.
fn qa_context(answer: QaAnswer, verb: &str) -> (String, &'static str) {
    match answer {
        QaAnswer::Yes => (
            format!("{{d}} {verb} {{t}} in vitro."),
            "these data confirm the effect.",
        ),
        QaAnswer::No => ("{d} does not affect {t}.".to_owned(), "no effect was observed."),
        QaAnswer::Maybe => (
            "the effect of {d} on {t} remains unclear.".to_owned(),
            "further studies are needed.",
        ),
    }
}

pub fn make_qa_dataset(spec: &SynthSpec) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x51a5);
    let mut taken = HashSet::new();
    let drugs = inventory(&mut rng, spec.drugs, 3, "n", &mut taken);
    let targets = inventory(&mut rng, spec.targets, 2, "x", &mut taken);
    let (train, valid, _) = spec.split_sizes();
    let examples = (0..spec.documents)
        .map(|i| {
            // Round-robin within each split keeps every split balanced.
            let offset = if i < train {
                i
            } else if i < train + valid {
                i - train
            } else {
                i - train - valid
            };
            let answer = QaAnswer::ALL[offset % 3];
            let d = drugs[rng.gen_range(0..drugs.len())].as_str();
            let t = targets[rng.gen_range(0..targets.len())].as_str();
            let verb = &spec.relations[rng.gen_range(0..spec.relations.len())].verb;
            let question = QA_QUESTIONS[rng.gen_range(0..QA_QUESTIONS.len())];
            let (context, long_answer) = qa_context(answer, verb);
            let fill = |s: &str| s.replace("{d}", d).replace("{t}", t);
            TaskExample {
                id: format!("qa-{i:05}"),
                task: Task::QuestionAnswering,
                source: qa_source(&fill(question), &fill(&context), long_answer),
                label: Label::Answer(answer),
            }
        })
        .collect();
    split_examples(spec, examples)
}

/// Inverse of the QA context templates.
pub fn oracle_answer(source: &str) -> QaAnswer {
    if source.contains("does not affect") {
        QaAnswer::No
    } else if source.contains("remains unclear") {
        QaAnswer::Maybe
    } else {
        QaAnswer::Yes
    }
}

/// One cue sentence per hallmark, in `HALLMARKS` order.
const HALLMARK_CUES: [&str; 10] = [
    "{d} triggered constant growth signals.",
    "{d} disabled growth brakes.",
    "{d} prevented apoptosis.",
    "{d} extended telomeres.",
    "{d} promoted new vessel formation.",
    "{d} increased cell migration.",
    "{d} caused dna damage.",
    "{d} raised cytokine release.",
    "{d} shifted glucose uptake.",
    "{d} helped cells escape lymphocytes.",
];

pub fn make_doc_dataset(spec: &SynthSpec) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd0c5);
    let mut taken = HashSet::new();
    let drugs = inventory(&mut rng, spec.drugs, 3, "n", &mut taken);
    let empty = flagged(&mut rng, spec.documents, spec.empty_fraction);
    let examples = (0..spec.documents)
        .map(|i| {
            let k = if empty.contains(&i) { 0 } else { rng.gen_range(1..=3) };
            let classes: BTreeSet<usize> = rand::seq::index::sample(&mut rng, HALLMARKS.len(), k)
                .into_iter()
                .collect();
            let d = drugs[rng.gen_range(0..drugs.len())].as_str();
            let mut sentences: Vec<String> = classes.iter().map(|&c| HALLMARK_CUES[c].replace("{d}", d)).collect();
            sentences.shuffle(&mut rng);
            sentences.insert(0, format!("we studied {d} in tumor cells."));
            TaskExample {
                id: format!("doc-{i:05}"),
                task: Task::DocClassification,
                source: sentences.join(" "),
                label: Label::Classes(classes.iter().map(|&c| HALLMARKS[c].to_owned()).collect()),
            }
        })
        .collect();
    split_examples(spec, examples)
}

/// Inverse of the hallmark cue sentences, in `HALLMARKS` order.
pub fn oracle_classes(source: &str) -> Vec<String> {
    HALLMARK_CUES
        .iter()
        .zip(HALLMARKS)
        .filter(|(cue, _)| source.contains(cue.trim_start_matches("{d} ")))
        .map(|(_, label)| label.to_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskcodec::in_appearance_order;

    fn small() -> SynthSpec {
        SynthSpec {
            documents: 200,
            ..SynthSpec::with_seed(3)
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = make_re_dataset(&small());
        let b = make_re_dataset(&small());
        assert_eq!(a.dataset.to_jsonl(), b.dataset.to_jsonl());
        assert_eq!(
            make_qa_dataset(&small()).to_jsonl(),
            make_qa_dataset(&small()).to_jsonl()
        );
        assert_eq!(
            make_doc_dataset(&small()).to_jsonl(),
            make_doc_dataset(&small()).to_jsonl()
        );
    }

    #[test]
    fn thousand_documents_split_eight_one_one() {
        let re = make_re_dataset(&SynthSpec::default());
        assert_eq!(re.dataset.sizes(), (800, 100, 100));
        assert_eq!(re.corpus.len(), 800);
        re.dataset.check_disjoint().unwrap();
    }

    #[test]
    fn gold_entities_occur_in_source_in_order() {
        let re = make_re_dataset(&small());
        let mut empty = 0;
        for (_, ex) in re.dataset.iter_tagged() {
            let Label::Triplets(ts) = &ex.label else {
                panic!("relation label")
            };
            empty += usize::from(ts.is_empty());
            for t in ts {
                assert!(ex.source.contains(&t.head) && ex.source.contains(&t.tail));
                assert!(re.lexicon.relations.contains_key(&t.relation));
            }
            assert!(in_appearance_order(ts, &ex.source));
        }
        assert_eq!(empty, 20);
    }

    #[test]
    fn oracle_extractor_recovers_gold() {
        let re = make_re_dataset(&small());
        for (_, ex) in re.dataset.iter_tagged() {
            let Label::Triplets(ts) = &ex.label else {
                panic!("relation label")
            };
            assert_eq!(&oracle_extract(&ex.source, &re.lexicon), ts, "{}", ex.source);
        }
    }

    #[test]
    fn qa_labels_balanced_and_recoverable() {
        let qa = make_qa_dataset(&small());
        for split in [&qa.train, &qa.valid, &qa.test] {
            let count = |a| split.iter().filter(|e| e.label == Label::Answer(a)).count() as i64;
            let counts = QaAnswer::ALL.map(count);
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        for (_, ex) in qa.iter_tagged() {
            assert_eq!(ex.label, Label::Answer(oracle_answer(&ex.source)));
        }
    }

    #[test]
    fn doc_labels_nonempty_unless_flagged_and_recoverable() {
        let docs = make_doc_dataset(&small());
        let mut empty = 0;
        for (_, ex) in docs.iter_tagged() {
            let Label::Classes(cs) = &ex.label else {
                panic!("class label")
            };
            empty += usize::from(cs.is_empty());
            assert_eq!(&oracle_classes(&ex.source), cs);
        }
        assert_eq!(empty, 20);
    }

    #[test]
    fn new_seed_changes_text_not_sizes() {
        let a = make_re_dataset(&small());
        let b = make_re_dataset(&SynthSpec { seed: 4, ..small() });
        assert_eq!(a.dataset.sizes(), b.dataset.sizes());
        assert_ne!(a.dataset.to_jsonl(), b.dataset.to_jsonl());
        let qa = make_qa_dataset(&SynthSpec { seed: 4, ..small() });
        assert_eq!(qa.sizes(), make_qa_dataset(&small()).sizes());
    }
}
