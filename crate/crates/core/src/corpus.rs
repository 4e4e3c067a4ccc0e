//! Pretraining documents and task datasets.
//!
//! Both live in line-delimited JSON. Documents carry `id`, `title` and
//! `abstract`; task examples carry `id`, `task`, `source`, `label` and an
//! optional `split` (`train`, `valid` or `test`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::taskcodec::Triplet;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

impl Document {
    /// Text fed to the language model during pretraining.
    pub fn pretraining_text(&self) -> String {
        format!("{}\n{}", self.title, self.abstract_text)
    }

    fn is_retained(&self) -> bool {
        !self.title.trim().is_empty() && !self.abstract_text.trim().is_empty()
    }
}

/// Keeps documents that have both a title and an abstract, in input order.
pub fn filter_documents(docs: Vec<Document>) -> Vec<Document> {
    docs.into_iter().filter(Document::is_retained).collect()
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(Error::Schema {
                line: idx + 1,
                message: "document id is empty".into(),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    RelationExtraction,
    QuestionAnswering,
    DocClassification,
    Generation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::RelationExtraction => "relation_extraction",
            Task::QuestionAnswering => "question_answering",
            Task::DocClassification => "doc_classification",
            Task::Generation => "generation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relation_extraction" | "re" => Ok(Task::RelationExtraction),
            "question_answering" | "qa" => Ok(Task::QuestionAnswering),
            "doc_classification" | "doc" => Ok(Task::DocClassification),
            "generation" => Ok(Task::Generation),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaAnswer {
    Yes,
    No,
    Maybe,
}

impl QaAnswer {
    pub const ALL: [QaAnswer; 3] = [QaAnswer::Yes, QaAnswer::No, QaAnswer::Maybe];

    pub fn as_str(self) -> &'static str {
        match self {
            QaAnswer::Yes => "yes",
            QaAnswer::No => "no",
            QaAnswer::Maybe => "maybe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        QaAnswer::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    /// Triplets in order of first appearance in the source.
    Triplets(Vec<Triplet>),
    Answer(QaAnswer),
    Classes(Vec<String>),
    None,
}

impl Label {
    fn matches(&self, task: Task) -> bool {
        matches!(
            (self, task),
            (Label::Triplets(_), Task::RelationExtraction)
                | (Label::Answer(_), Task::QuestionAnswering)
                | (Label::Classes(_), Task::DocClassification)
                | (Label::None, Task::Generation)
        )
    }

    fn to_json(&self) -> Value {
        match self {
            Label::Triplets(ts) => Value::Array(
                ts.iter()
                    .map(|t| json!({"head": t.head, "tail": t.tail, "relation": t.relation}))
                    .collect(),
            ),
            Label::Answer(a) => Value::String(a.as_str().into()),
            Label::Classes(cs) => Value::Array(cs.iter().cloned().map(Value::String).collect()),
            Label::None => Value::Null,
        }
    }

    fn from_json(task: Task, value: &Value) -> std::result::Result<Self, String> {
        match task {
            Task::RelationExtraction => {
                let items = value
                    .as_array()
                    .ok_or("relation_extraction label must be an array of triplets")?;
                let mut triplets = Vec::with_capacity(items.len());
                for item in items {
                    let field = |name: &str| {
                        item.get(name)
                            .and_then(Value::as_str)
                            .map(str::to_owned)
                            .ok_or_else(|| format!("triplet field {name:?} missing or not a string"))
                    };
                    triplets.push(Triplet::new(field("head")?, field("tail")?, field("relation")?));
                }
                Ok(Label::Triplets(triplets))
            }
            Task::QuestionAnswering => value
                .as_str()
                .and_then(QaAnswer::parse)
                .map(Label::Answer)
                .ok_or_else(|| "question_answering label must be one of yes/no/maybe".into()),
            Task::DocClassification => {
                let items = value
                    .as_array()
                    .ok_or("doc_classification label must be an array of class names")?;
                items
                    .iter()
                    .map(|v| v.as_str().map(str::to_owned).ok_or("class label must be a string"))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(Label::Classes)
                    .map_err(str::to_owned)
            }
            Task::Generation => match value {
                Value::Null => Ok(Label::None),
                _ => Err("generation examples carry a null label".into()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "validation" | "dev" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub id: String,
    pub task: Task,
    pub source: String,
    pub label: Label,
}

impl TaskExample {
    pub fn to_json_line(&self, split: Option<SplitName>) -> String {
        let mut obj = json!({
            "id": self.id,
            "task": self.task.as_str(),
            "source": self.source,
            "label": self.label.to_json(),
        });
        if let Some(split) = split {
            obj["split"] = Value::String(split.as_str().into());
        }
        serde_json::to_string(&obj).expect("json value serializes")
    }
}

/// Source text for a question-answering example.
pub fn qa_source(question: &str, context: &str, answer: &str) -> String {
    format!("question: {question} context: {context} answer: {answer}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<TaskExample>,
    pub valid: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    pub fn is_empty(&self) -> bool {
        self.sizes() == (0, 0, 0)
    }

    pub fn get(&self, split: SplitName) -> &[TaskExample] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: SplitName) -> &mut Vec<TaskExample> {
        match split {
            SplitName::Train => &mut self.train,
            SplitName::Valid => &mut self.valid,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn iter_tagged(&self) -> impl Iterator<Item = (SplitName, &TaskExample)> {
        let tag = |split: SplitName| move |ex| (split, ex);
        self.train
            .iter()
            .map(tag(SplitName::Train))
            .chain(self.valid.iter().map(tag(SplitName::Valid)))
            .chain(self.test.iter().map(tag(SplitName::Test)))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (split, ex) in self.iter_tagged() {
            out.push_str(&ex.to_json_line(Some(split)));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Rejects datasets whose splits share an example id.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (_, ex) in self.iter_tagged() {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Schema {
                    line: 0,
                    message: format!("example id {:?} appears more than once", ex.id),
                });
            }
        }
        Ok(())
    }
}

/// Parses JSONL task examples. Records without a `split` field go to
/// `default_split`.
pub fn parse_dataset(text: &str, task: Task, default_split: SplitName) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let schema = |message: String| Error::Schema { line: line_no, message };
        let str_field = |name: &str| value.get(name).and_then(Value::as_str);

        let id = str_field("id")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema("missing or empty \"id\"".into()))?
            .to_owned();
        let record_task: Task = str_field("task")
            .ok_or_else(|| schema("missing \"task\"".into()))?
            .parse()
            .map_err(|e: Error| schema(e.to_string()))?;
        if record_task != task {
            return Err(schema(format!("record task {record_task} does not match {task}")));
        }
        let source = match str_field("source") {
            Some(s) => s.to_owned(),
            None if task == Task::QuestionAnswering => {
                let q = str_field("question").ok_or_else(|| schema("missing \"source\" or \"question\"".into()))?;
                let c = str_field("context").unwrap_or_default();
                let a = str_field("long_answer")
                    .or_else(|| str_field("answer"))
                    .unwrap_or_default();
                qa_source(q, c, a)
            }
            None => return Err(schema("missing \"source\"".into())),
        };
        let label = Label::from_json(task, value.get("label").unwrap_or(&Value::Null)).map_err(schema)?;
        debug_assert!(label.matches(task));
        let which = match str_field("split") {
            Some(s) => s.parse().map_err(|e: Error| schema(e.to_string()))?,
            None => default_split,
        };
        split.get_mut(which).push(TaskExample {
            id,
            task,
            source,
            label,
        });
    }
    Ok(split)
}

/// Loads a task dataset from one JSONL file.
pub fn load_dataset(path: &Path, task: Task) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = parse_dataset(&text, task, SplitName::Train)?;
    split.check_disjoint()?;
    let (train, valid, test) = split.sizes();
    if split.is_empty() {
        log::warn!("{}: dataset is empty", path.display());
    } else {
        log::info!("{}: loaded train={train} valid={valid} test={test}", path.display());
    }
    Ok(split)
}

/// Loads one file per split; every record is assigned to the split of the file it came from.
pub fn load_split_files(
    train: Option<&Path>,
    valid: Option<&Path>,
    test: Option<&Path>,
    task: Task,
) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (path, which) in [
        (train, SplitName::Train),
        (valid, SplitName::Valid),
        (test, SplitName::Test),
    ] {
        let Some(path) = path else { continue };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut part = parse_dataset(&text, task, which)?;
        for name in [SplitName::Train, SplitName::Valid, SplitName::Test] {
            split.get_mut(which).append(part.get_mut(name));
        }
    }
    split.check_disjoint()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, title: &str, abs: &str) -> Document {
        Document {
            id: id.into(),
            title: title.into(),
            abstract_text: abs.into(),
        }
    }

    #[test]
    fn title_without_abstract_is_dropped() {
        assert!(filter_documents(vec![doc("1", "T", "")]).is_empty());
        assert_eq!(filter_documents(vec![doc("1", "T", "A")]), vec![doc("1", "T", "A")]);
        assert!(filter_documents(vec![]).is_empty());
    }

    #[test]
    fn filter_keeps_order() {
        let docs = vec![
            doc("a", "x", "y"),
            doc("b", "", "y"),
            doc("c", "p", "q"),
            doc("d", "t", " "),
        ];
        let ids: Vec<_> = filter_documents(docs).into_iter().map(|d| d.id).collect();
        assert_eq!(ids, ["a", "c"]);
    }

    #[test]
    fn document_json_uses_abstract_field() {
        let d: Document = serde_json::from_str(r#"{"id":"1","title":"t","abstract":"a"}"#).unwrap();
        assert_eq!(d.pretraining_text(), "t\na");
    }

    fn re_line(id: &str, split: &str) -> String {
        format!(
            r#"{{"id":"{id}","task":"relation_extraction","source":"x inhibits y.","label":[{{"head":"x","tail":"y","relation":"inhibitor"}}],"split":"{split}"}}"#
        )
    }

    #[test]
    fn split_sizes_follow_records() {
        let mut text = String::new();
        for (n, split) in [(12, "train"), (1, "valid"), (3, "test")] {
            for i in 0..n {
                text.push_str(&re_line(&format!("{split}{i}"), split));
                text.push('\n');
            }
        }
        let ds = parse_dataset(&text, Task::RelationExtraction, SplitName::Train).unwrap();
        assert_eq!(ds.sizes(), (12, 1, 3));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!("{}\n{{not json\n", re_line("a", "train"));
        match parse_dataset(&text, Task::RelationExtraction, SplitName::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_task_mismatch_is_schema_error() {
        let text = r#"{"id":"q1","task":"question_answering","source":"s","label":["a"]}"#;
        assert!(matches!(
            parse_dataset(text, Task::QuestionAnswering, SplitName::Train),
            Err(Error::Schema { line: 1, .. })
        ));
        let text = r#"{"id":"q1","task":"question_answering","source":"s","label":"yes"}"#;
        assert!(matches!(
            parse_dataset(text, Task::RelationExtraction, SplitName::Train),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn qa_records_assemble_source() {
        let text = r#"{"id":"q1","task":"question_answering","question":"does x work?","context":"it does.","long_answer":"yes it works.","label":"maybe"}"#;
        let ds = parse_dataset(text, Task::QuestionAnswering, SplitName::Test).unwrap();
        assert_eq!(
            ds.test[0].source,
            "question: does x work? context: it does. answer: yes it works."
        );
        assert_eq!(ds.test[0].label, Label::Answer(QaAnswer::Maybe));
    }

    #[test]
    fn empty_file_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, Task::QuestionAnswering).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}\n", re_line("a", "train"), re_line("a", "test"));
        let ds = parse_dataset(&text, Task::RelationExtraction, SplitName::Train).unwrap();
        assert!(ds.check_disjoint().is_err());
    }

    fn arb_doc() -> impl Strategy<Value = Document> {
        ("[a-z]{1,3}", "[a-z ]{0,4}", "[a-z ]{0,4}").prop_map(|(id, t, a)| doc(&id, &t, &a))
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(docs in proptest::collection::vec(arb_doc(), 0..20)) {
            let once = filter_documents(docs);
            prop_assert_eq!(filter_documents(once.clone()), once);
        }

        #[test]
        fn dataset_round_trips_through_jsonl(
            rows in proptest::collection::vec(("[a-z]{1,8}( [a-z]{1,8}){0,3}", 0usize..3, 0usize..3), 0..12)
        ) {
            let mut ds = DatasetSplit::default();
            for (i, (text, nt, which)) in rows.iter().enumerate() {
                let triplets = (0..*nt)
                    .map(|k| Triplet::new(format!("h{k}"), format!("t \"{k}\""), "rel".to_string()))
                    .collect();
                let ex = TaskExample {
                    id: format!("e{i}"),
                    task: Task::RelationExtraction,
                    source: text.clone(),
                    label: Label::Triplets(triplets),
                };
                [&mut ds.train, &mut ds.valid, &mut ds.test][*which].push(ex);
            }
            let back = parse_dataset(&ds.to_jsonl(), Task::RelationExtraction, SplitName::Train).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
