//! Structured labels ↔ natural-language target sequences.
//!
//! Relation triplets render as one clause each, joined by `"; "` and closed
//! by a single `"."`:
//!
//! | format       | clause                                           |
//! |--------------|--------------------------------------------------|
//! | `svo`        | `head verb tail`                                 |
//! | `is-of`      | `head is the noun of tail`                       |
//! | `rel-is`     | `the relation between head and tail is noun`     |
//! | `rel-exists` | `the relation between head and tail exists`      |
//! | `structured` | `<head> head <tail> tail <relation> relation`    |
//!
//! An empty triplet list renders as [`NO_RELATION`] (empty string for
//! `structured`).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, QaAnswer, Task};
use crate::{Error, Result};

pub const NO_RELATION: &str = "no relation found.";
pub const QA_TARGET_PREFIX: &str = "the answer to the question given the context is ";
pub const DOC_TARGET_PREFIX: &str = "the type of this document is ";
pub const NO_CLASS: &str = "none";

/// The ten hallmarks of cancer used as the document-classification label universe.
pub const HALLMARKS: [&str; 10] = [
    "sustaining proliferative signaling",
    "evading growth suppressors",
    "resisting cell death",
    "enabling replicative immortality",
    "inducing angiogenesis",
    "activating invasion and metastasis",
    "genomic instability and mutation",
    "tumor promoting inflammation",
    "cellular energetics",
    "avoiding immune destruction",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub tail: String,
    pub relation: String,
}

/// Case-folds, collapses internal whitespace and trims punctuation at both ends.
pub fn normalize(text: &str) -> String {
    let folded = text.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

impl Triplet {
    pub fn new(head: impl Into<String>, tail: impl Into<String>, relation: impl Into<String>) -> Self {
        Triplet {
            head: head.into(),
            tail: tail.into(),
            relation: relation.into(),
        }
    }

    pub fn normalized(&self) -> Triplet {
        Triplet::new(normalize(&self.head), normalize(&self.tail), normalize(&self.relation))
    }
}

/// Stable sort by the first mention of the head, then of the tail.
/// Entities missing from `source` sort last.
pub fn sort_by_appearance(triplets: &mut [Triplet], source: &str) {
    let pos = |e: &str| source.find(e).unwrap_or(usize::MAX);
    triplets.sort_by_key(|t| (pos(&t.head), pos(&t.tail)));
}

pub fn in_appearance_order(triplets: &[Triplet], source: &str) -> bool {
    let mut sorted = triplets.to_vec();
    sort_by_appearance(&mut sorted, source);
    sorted == triplets
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RelationForms {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub binary: bool,
}

/// Surface forms per relation id. A lexicon with a `binary` entry
/// describes an untyped (relation-exists) dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationLexicon {
    pub relations: BTreeMap<String, RelationForms>,
}

impl RelationLexicon {
    pub fn typed<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Self {
        RelationLexicon {
            relations: entries
                .into_iter()
                .map(|(id, verb, noun)| {
                    (
                        id.to_owned(),
                        RelationForms {
                            verb: Some(verb.to_owned()),
                            noun: Some(noun.to_owned()),
                            binary: false,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn binary(relation_id: &str) -> Self {
        let mut relations = BTreeMap::new();
        relations.insert(
            relation_id.to_owned(),
            RelationForms {
                binary: true,
                ..RelationForms::default()
            },
        );
        RelationLexicon { relations }
    }

    /// Relation id used for every triplet of a binary-relation dataset.
    pub fn binary_relation(&self) -> Option<&str> {
        self.relations.iter().find(|(_, f)| f.binary).map(|(id, _)| id.as_str())
    }

    fn forms(&self, relation: &str) -> Result<&RelationForms> {
        self.relations
            .get(relation)
            .ok_or_else(|| Error::MissingRelation(relation.to_owned()))
    }

    fn verb(&self, relation: &str) -> Result<&str> {
        self.forms(relation)?
            .verb
            .as_deref()
            .ok_or_else(|| Error::MissingRelation(relation.to_owned()))
    }

    fn noun(&self, relation: &str) -> Result<&str> {
        self.forms(relation)?
            .noun
            .as_deref()
            .ok_or_else(|| Error::MissingRelation(relation.to_owned()))
    }

    fn id_for_noun(&self, noun: &str) -> Option<&str> {
        let noun = normalize(noun);
        self.relations
            .iter()
            .find(|(_, f)| f.noun.as_deref().map(normalize).as_deref() == Some(noun.as_str()))
            .map(|(id, _)| id.as_str())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("lexicon serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetFormat {
    Svo,
    IsOf,
    RelIs,
    RelExists,
    Structured,
}

impl TargetFormat {
    pub const ALL: [TargetFormat; 5] = [
        TargetFormat::Svo,
        TargetFormat::IsOf,
        TargetFormat::RelIs,
        TargetFormat::RelExists,
        TargetFormat::Structured,
    ];

    /// Formats applicable to typed relation datasets.
    pub const TYPED: [TargetFormat; 4] = [
        TargetFormat::Structured,
        TargetFormat::Svo,
        TargetFormat::IsOf,
        TargetFormat::RelIs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetFormat::Svo => "svo",
            TargetFormat::IsOf => "is-of",
            TargetFormat::RelIs => "rel-is",
            TargetFormat::RelExists => "rel-exists",
            TargetFormat::Structured => "structured",
        }
    }
}

impl fmt::Display for TargetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s || f.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown target format {s:?}")))
    }
}

/// `<head> h <tail> t <relation> r` per triplet, blocks separated by a space.
pub fn encode_structured(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("<head> {} <tail> {} <relation> {}", t.head, t.tail, t.relation))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn encode_triplets(triplets: &[Triplet], format: TargetFormat, lexicon: &RelationLexicon) -> Result<String> {
    if format == TargetFormat::Structured {
        return Ok(encode_structured(triplets));
    }
    if format == TargetFormat::RelExists && lexicon.binary_relation().is_none() {
        return Err(Error::FormatNotApplicable("rel-exists"));
    }
    if triplets.is_empty() {
        return Ok(NO_RELATION.to_owned());
    }
    let mut clauses = Vec::with_capacity(triplets.len());
    for t in triplets {
        let clause = match format {
            TargetFormat::Svo => format!("{} {} {}", t.head, lexicon.verb(&t.relation)?, t.tail),
            TargetFormat::IsOf => format!("{} is the {} of {}", t.head, lexicon.noun(&t.relation)?, t.tail),
            TargetFormat::RelIs => format!(
                "the relation between {} and {} is {}",
                t.head,
                t.tail,
                lexicon.noun(&t.relation)?
            ),
            TargetFormat::RelExists => format!("the relation between {} and {} exists", t.head, t.tail),
            TargetFormat::Structured => unreachable!("handled above"),
        };
        clauses.push(clause);
    }
    Ok(format!("{}.", clauses.join("; ")))
}

/// Triplets recovered from generated text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedTriplets {
    /// Normalized and deduplicated, in order of first occurrence.
    pub triplets: Vec<Triplet>,
    /// Clauses that matched no pattern.
    pub skipped: usize,
}

impl DecodedTriplets {
    pub fn set(&self) -> HashSet<Triplet> {
        self.triplets.iter().cloned().collect()
    }

    fn push(&mut self, t: Triplet) {
        let t = t.normalized();
        if t.head.is_empty() || t.tail.is_empty() {
            self.skipped += 1;
        } else if !self.triplets.contains(&t) {
            self.triplets.push(t);
        }
    }
}

/// Compiled clause patterns for one format and lexicon.
pub struct TripletParser {
    format: TargetFormat,
    lexicon: RelationLexicon,
    pattern: Regex,
    verb_ids: BTreeMap<String, String>,
}

impl TripletParser {
    pub fn new(format: TargetFormat, lexicon: &RelationLexicon) -> Self {
        let mut verb_ids = BTreeMap::new();
        for (id, forms) in &lexicon.relations {
            if let Some(v) = &forms.verb {
                verb_ids.entry(normalize(v)).or_insert_with(|| id.clone());
            }
        }
        let pattern = match format {
            TargetFormat::Svo => {
                let mut verbs: Vec<&String> = verb_ids.keys().collect();
                // Longest first so that "binds to" wins over "binds".
                verbs.sort_by_key(|v| std::cmp::Reverse(v.len()));
                let alternation = verbs.iter().map(|v| regex::escape(v)).collect::<Vec<_>>().join("|");
                format!(r"(?i)^(?P<head>.+?) (?P<rel>{alternation}) (?P<tail>.+)$")
            }
            TargetFormat::IsOf => r"(?i)^(?P<head>.+?) is the (?P<rel>.+?) of (?P<tail>.+)$".to_owned(),
            // Greedy pair: the last " is " separates the relation.
            TargetFormat::RelIs => r"(?i)^the relation between (?P<pair>.+) is (?P<rel>.+)$".to_owned(),
            TargetFormat::RelExists => r"(?i)^the relation between (?P<pair>.+) exists$".to_owned(),
            TargetFormat::Structured => {
                r"(?s)^\s*(?P<head>.+?)\s*<tail>\s*(?P<tail>.+?)\s*<relation>\s*(?P<rel>.+?)\s*$".to_owned()
            }
        };
        let pattern = if format == TargetFormat::Svo && verb_ids.is_empty() {
            Regex::new(r"^\b\B$").expect("never-matching regex")
        } else {
            Regex::new(&pattern).expect("valid clause regex")
        };
        TripletParser {
            format,
            lexicon: lexicon.clone(),
            pattern,
            verb_ids,
        }
    }

    fn relation_from_noun(&self, noun: &str) -> String {
        self.lexicon
            .id_for_noun(noun)
            .map(str::to_owned)
            .unwrap_or_else(|| normalize(noun))
    }

    fn parse_clause(&self, clause: &str) -> Option<Triplet> {
        let caps = self.pattern.captures(clause)?;
        let split_pair = |pair: &str| -> Option<(String, String)> {
            let (h, t) = pair.split_once(" and ")?;
            Some((h.to_owned(), t.to_owned()))
        };
        match self.format {
            TargetFormat::Svo => {
                let id = self.verb_ids.get(&normalize(&caps["rel"]))?;
                Some(Triplet::new(&caps["head"], &caps["tail"], id.as_str()))
            }
            TargetFormat::IsOf => Some(Triplet::new(
                &caps["head"],
                &caps["tail"],
                self.relation_from_noun(&caps["rel"]),
            )),
            TargetFormat::RelIs => {
                let (h, t) = split_pair(&caps["pair"])?;
                Some(Triplet::new(h, t, self.relation_from_noun(&caps["rel"])))
            }
            TargetFormat::RelExists => {
                let (h, t) = split_pair(&caps["pair"])?;
                let rel = self.lexicon.binary_relation().unwrap_or("exists");
                Some(Triplet::new(h, t, rel))
            }
            TargetFormat::Structured => Some(Triplet::new(&caps["head"], &caps["tail"], &caps["rel"])),
        }
    }

    /// Total: any text decodes, unparseable clauses are counted in `skipped`.
    pub fn decode(&self, text: &str) -> DecodedTriplets {
        let mut out = DecodedTriplets::default();
        let text = text.trim();
        if self.format == TargetFormat::Structured {
            let mut chunks = text.split("<head>");
            let lead = chunks.next().unwrap_or_default();
            if !lead.trim().is_empty() {
                out.skipped += 1;
            }
            for chunk in chunks {
                match self.parse_clause(chunk) {
                    Some(t) => out.push(t),
                    None => out.skipped += 1,
                }
            }
            return out;
        }
        if normalize(text) == normalize(NO_RELATION) {
            return out;
        }
        let body = text.strip_suffix('.').unwrap_or(text);
        for clause in body.split(';') {
            let clause = clause.trim();
            if clause.is_empty() {
                continue;
            }
            let clause = clause.strip_suffix('.').unwrap_or(clause).trim_end();
            match self.parse_clause(clause) {
                Some(t) => out.push(t),
                None => out.skipped += 1,
            }
        }
        out
    }
}

pub fn decode_triplets(text: &str, format: TargetFormat, lexicon: &RelationLexicon) -> DecodedTriplets {
    TripletParser::new(format, lexicon).decode(text)
}

pub fn encode_qa_target(label: QaAnswer) -> String {
    format!("{QA_TARGET_PREFIX}{}.", label.as_str())
}

/// Last standalone yes/no/maybe in the text; `None` rejects the answer.
pub fn decode_qa_target(text: &str) -> Option<QaAnswer> {
    static PATTERN: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = PATTERN.get_or_init(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").expect("valid regex"));
    re.find_iter(text)
        .last()
        .and_then(|m| QaAnswer::parse(&m.as_str().to_lowercase()))
}

/// Labels in universe order, joined by `"; "`; [`NO_CLASS`] when empty.
pub fn encode_doc_target<S: AsRef<str>>(labels: &[S], universe: &[&str]) -> Result<String> {
    let wanted: HashSet<&str> = labels.iter().map(AsRef::as_ref).collect();
    if let Some(unknown) = wanted.iter().find(|l| !universe.contains(l)) {
        return Err(Error::UnknownLabel((*unknown).to_owned()));
    }
    let ordered: Vec<&str> = universe.iter().copied().filter(|u| wanted.contains(u)).collect();
    let body = if ordered.is_empty() {
        NO_CLASS.to_owned()
    } else {
        ordered.join("; ")
    };
    Ok(format!("{DOC_TARGET_PREFIX}{body}."))
}

/// Every universe label occurring as a substring, in universe order.
pub fn decode_doc_target(text: &str, universe: &[&str]) -> Vec<String> {
    let text = normalize(text);
    universe
        .iter()
        .filter(|label| text.contains(&normalize(label)))
        .map(|l| (*l).to_owned())
        .collect()
}

/// Label-to-text codec for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskCodec {
    Relations {
        format: TargetFormat,
        lexicon: RelationLexicon,
    },
    Answer,
    Classes {
        universe: Vec<String>,
    },
}

impl TaskCodec {
    pub fn task(&self) -> Task {
        match self {
            TaskCodec::Relations { .. } => Task::RelationExtraction,
            TaskCodec::Answer => Task::QuestionAnswering,
            TaskCodec::Classes { .. } => Task::DocClassification,
        }
    }

    pub fn hallmarks() -> Self {
        TaskCodec::Classes {
            universe: HALLMARKS.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    pub fn encode(&self, label: &Label) -> Result<String> {
        match (self, label) {
            (TaskCodec::Relations { format, lexicon }, Label::Triplets(ts)) => encode_triplets(ts, *format, lexicon),
            (TaskCodec::Answer, Label::Answer(a)) => Ok(encode_qa_target(*a)),
            (TaskCodec::Classes { universe }, Label::Classes(cs)) => {
                let universe: Vec<&str> = universe.iter().map(String::as_str).collect();
                encode_doc_target(cs, &universe)
            }
            _ => Err(Error::Config(format!("label does not belong to task {}", self.task()))),
        }
    }
}
