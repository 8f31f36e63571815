//! Dialogue records, JSON Lines ingestion with line-accurate validation, and
//! the synthetic clinical-dialogue generator.

mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use serde::Serialize;
use serde_json::{Map, Value};

pub use synthetic::{
    diagnosis_for, generate_synthetic, knowledge_base, SyntheticCorpus, DIAGNOSES, SYMPTOMS,
};

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeSnippet;
use crate::textproc;
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

impl Speaker {
    pub fn parse(label: &str) -> Option<Speaker> {
        match label {
            "patient" => Some(Speaker::Patient),
            "doctor" => Some(Speaker::Doctor),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Speaker::Patient => "patient",
            Speaker::Doctor => "doctor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Gold generation targets. Empty strings mean "not provided", which is
/// only allowed for inference inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SummaryTriple {
    pub mcs: String,
    pub di: String,
    pub summary: String,
}

impl SummaryTriple {
    pub fn get(&self, task: Task) -> &str {
        match task {
            Task::Sum => &self.summary,
            Task::Mcs => &self.mcs,
            Task::Di => &self.di,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub visual: Option<Vec<f64>>,
    pub targets: SummaryTriple,
}

/// The documented classes of malformed dataset records (plus two that only
/// apply to knowledge-base files).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaViolation {
    MalformedJson,
    NotAnObject,
    MissingField,
    WrongType,
    EmptyId,
    DuplicateId,
    TooFewUtterances,
    FirstSpeakerNotPatient,
    UnknownSpeaker,
    EmptyUtterance,
    VisualDimension,
    EmptyTarget,
    DuplicateTerm,
    EmptyKnowledgeField,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use SchemaViolation::*;
        f.write_str(match self {
            MalformedJson => "malformed JSON",
            NotAnObject => "record is not a JSON object",
            MissingField => "missing required field",
            WrongType => "wrong JSON type",
            EmptyId => "empty id",
            DuplicateId => "duplicate id",
            TooFewUtterances => "fewer than two utterances",
            FirstSpeakerNotPatient => "first utterance is not from the patient",
            UnknownSpeaker => "unknown speaker label",
            EmptyUtterance => "empty utterance text",
            VisualDimension => "visual vector has the wrong length",
            EmptyTarget => "empty target text",
            DuplicateTerm => "duplicate knowledge term",
            EmptyKnowledgeField => "empty knowledge field",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Required visual length; `None` takes it from the first record that
    /// carries a visual vector.
    pub d_vis: Option<usize>,
    /// Training and evaluation data must carry all three targets; inference
    /// inputs need not.
    pub require_targets: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            d_vis: None,
            require_targets: true,
        }
    }
}

struct RecordParser {
    line: usize,
}

impl RecordParser {
    fn err(&self, field: &str, kind: SchemaViolation, message: impl Into<String>) -> Error {
        Error::Schema {
            line: self.line,
            field: field.to_string(),
            kind,
            message: message.into(),
        }
    }

    fn field<'a>(&self, obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
        obj.get(name).ok_or_else(|| {
            self.err(
                name,
                SchemaViolation::MissingField,
                format!("`{name}` is required"),
            )
        })
    }

    fn string<'a>(&self, v: &'a Value, path: &str) -> Result<&'a str> {
        v.as_str().ok_or_else(|| {
            self.err(
                path,
                SchemaViolation::WrongType,
                format!("expected a string, got {}", type_name(v)),
            )
        })
    }

    fn parse(&self, line: &str, opts: &mut LoadOptions) -> Result<Dialogue> {
        let value: Value = serde_json::from_str(line)
            .map_err(|e| self.err("$", SchemaViolation::MalformedJson, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| {
            self.err(
                "$",
                SchemaViolation::NotAnObject,
                format!("got {}", type_name(&value)),
            )
        })?;

        let id = self.string(self.field(obj, "id")?, "id")?;
        if id.trim().is_empty() {
            return Err(self.err("id", SchemaViolation::EmptyId, "id must be non-empty"));
        }

        let utts = self.field(obj, "utterances")?.as_array().ok_or_else(|| {
            self.err(
                "utterances",
                SchemaViolation::WrongType,
                "expected an array",
            )
        })?;
        let mut utterances = Vec::with_capacity(utts.len());
        for (i, u) in utts.iter().enumerate() {
            let path = format!("utterances[{i}]");
            let uo = u
                .as_object()
                .ok_or_else(|| self.err(&path, SchemaViolation::WrongType, "expected an object"))?;
            let speaker_path = format!("{path}.speaker");
            let label = self.string(
                uo.get("speaker").ok_or_else(|| {
                    self.err(
                        &speaker_path,
                        SchemaViolation::MissingField,
                        "`speaker` is required",
                    )
                })?,
                &speaker_path,
            )?;
            let speaker = Speaker::parse(label).ok_or_else(|| {
                self.err(
                    &speaker_path,
                    SchemaViolation::UnknownSpeaker,
                    format!("`{label}` is not one of patient, doctor"),
                )
            })?;
            let text_path = format!("{path}.text");
            let text = self.string(
                uo.get("text").ok_or_else(|| {
                    self.err(
                        &text_path,
                        SchemaViolation::MissingField,
                        "`text` is required",
                    )
                })?,
                &text_path,
            )?;
            if textproc::normalize(text).is_empty() {
                return Err(self.err(
                    &text_path,
                    SchemaViolation::EmptyUtterance,
                    "utterance text is empty",
                ));
            }
            utterances.push(Utterance {
                speaker,
                text: text.to_string(),
            });
        }
        if utterances.len() < 2 {
            return Err(self.err(
                "utterances",
                SchemaViolation::TooFewUtterances,
                format!("{} utterance(s); at least 2 required", utterances.len()),
            ));
        }
        if utterances[0].speaker != Speaker::Patient {
            return Err(self.err(
                "utterances[0].speaker",
                SchemaViolation::FirstSpeakerNotPatient,
                "dialogues must open with the patient",
            ));
        }

        let visual = match obj.get("visual") {
            None | Some(Value::Null) => None,
            Some(Value::Array(xs)) => {
                let mut v = Vec::with_capacity(xs.len());
                for (i, x) in xs.iter().enumerate() {
                    let f = x.as_f64().filter(|f| f.is_finite()).ok_or_else(|| {
                        self.err(
                            &format!("visual[{i}]"),
                            SchemaViolation::WrongType,
                            "expected a finite number",
                        )
                    })?;
                    v.push(f);
                }
                match opts.d_vis {
                    Some(d) if d != v.len() => {
                        return Err(self.err(
                            "visual",
                            SchemaViolation::VisualDimension,
                            format!("{} entries, expected {d}", v.len()),
                        ))
                    }
                    None => opts.d_vis = Some(v.len()),
                    _ => {}
                }
                Some(v)
            }
            Some(other) => {
                return Err(self.err(
                    "visual",
                    SchemaViolation::WrongType,
                    format!("expected an array, got {}", type_name(other)),
                ))
            }
        };

        let target = |name: &str| -> Result<String> {
            match obj.get(name) {
                None if !opts.require_targets => Ok(String::new()),
                None => Err(self.err(
                    name,
                    SchemaViolation::MissingField,
                    format!("`{name}` is required"),
                )),
                Some(v) => {
                    let s = self.string(v, name)?;
                    if opts.require_targets && textproc::normalize(s).is_empty() {
                        return Err(self.err(
                            name,
                            SchemaViolation::EmptyTarget,
                            format!("`{name}` is empty"),
                        ));
                    }
                    Ok(s.to_string())
                }
            }
        };
        let targets = SummaryTriple {
            mcs: target("mcs")?,
            di: target("di")?,
            summary: target("summary")?,
        };

        Ok(Dialogue {
            id: id.to_string(),
            utterances,
            visual,
            targets,
        })
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Parses JSON Lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, mut opts: LoadOptions) -> Result<Vec<Dialogue>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parser = RecordParser { line: i + 1 };
        let d = parser.parse(line, &mut opts)?;
        if !seen.insert(d.id.clone()) {
            return Err(parser.err(
                "id",
                SchemaViolation::DuplicateId,
                format!("id `{}` already used", d.id),
            ));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Dialogue>> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, opts: LoadOptions) -> Result<Vec<Dialogue>> {
    let text = crate::io::read_to_string(path)?;
    parse_dataset(&text, opts).map_err(|e| match e {
        Error::Schema {
            line,
            field,
            kind,
            message,
        } => Error::Schema {
            line,
            field,
            kind,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    utterances: &'a [Utterance],
    #[serde(skip_serializing_if = "Option::is_none")]
    visual: Option<&'a [f64]>,
    mcs: &'a str,
    di: &'a str,
    summary: &'a str,
}

pub fn to_jsonl(records: &[Dialogue]) -> String {
    let mut s = String::new();
    for d in records {
        let rec = RecordOut {
            id: &d.id,
            utterances: &d.utterances,
            visual: d.visual.as_deref(),
            mcs: &d.targets.mcs,
            di: &d.targets.di,
            summary: &d.targets.summary,
        };
        s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(path: &Path, records: &[Dialogue]) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(records).as_bytes())
}

/// Every text the vocabulary should cover: utterances, gold targets and
/// knowledge-base entries.
pub fn vocab_texts(records: &[Dialogue], kb: &[KnowledgeSnippet]) -> Vec<String> {
    let mut out = Vec::new();
    for d in records {
        out.extend(d.utterances.iter().map(|u| u.text.clone()));
        out.extend(Task::ALL.iter().map(|&t| d.targets.get(t).to_string()));
    }
    for k in kb {
        out.push(k.term.clone());
        out.push(k.description.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
    /// Every record.
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::config(format!(
                "unknown split `{other}` (train, dev, test or all)"
            ))),
        }
    }
}

pub const SPLIT_SALT: &str = "mmk-split-v1";

/// 80/10/10 assignment from a salted SHA-256 of the record id.
pub fn split_of(id: &str) -> Split {
    let h = Sha256::digest(format!("{SPLIT_SALT}:{id}").as_bytes());
    let bucket = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..80 => Split::Train,
        80..90 => Split::Dev,
        _ => Split::Test,
    }
}

pub fn select_split(records: &[Dialogue], split: Split) -> Vec<Dialogue> {
    records
        .iter()
        .filter(|d| split == Split::All || split_of(&d.id) == split)
        .cloned()
        .collect()
}
