//! Interaction-log data model: question events, student records, test
//! scores, and CSV ingestion/serialization.
//!
//! Log CSV columns: `student_id, question_id, start_ms, end_ms, skills,
//! correct, input_type, actions_required, gaming_options` where `skills` is
//! semicolon separated and `correct` is `0`/`1`. Scores CSV columns:
//! `student_id, pretest, posttest, delayed_posttest[, gaming, confrustion]`.
//! Leading `# key=value` lines carry provenance and dataset metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum raw score of the 24-item knowledge tests.
pub const DEFAULT_SCORE_MAX: f64 = 24.0;

/// Knowledge component identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SkillId(String);

impl SkillId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let trimmed = id.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("empty skill id".into()));
        }
        if trimmed.contains(';') {
            return Err(Error::InvalidInput(format!(
                "skill id `{trimmed}` contains the list separator `;`"
            )));
        }
        Ok(SkillId(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SkillId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        SkillId::new(s)
    }
}

impl From<SkillId> for String {
    fn from(s: SkillId) -> String {
        s.0
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($name), other)),
                }
            }
        }
    };
}

string_enum!(
    /// Response format of a question.
    InputType { Slider => "slider", Radio => "radio", Text => "text" }
);
string_enum!(
    /// Whether one or several UI actions complete the question.
    ActionsRequired { One => "one", Multiple => "multiple" }
);
string_enum!(
    /// How far immediate feedback lets a student iterate toward the answer.
    GamingOptions { Multiple => "multiple", Limited => "limited" }
);

/// One first-attempt response to one question step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionEvent {
    pub student_id: String,
    pub question_id: String,
    pub seq_index: usize,
    /// Sorted, deduplicated, non-empty.
    pub skills: Vec<SkillId>,
    pub start_ms: i64,
    pub end_ms: i64,
    /// Seconds.
    pub duration: f64,
    pub correct: bool,
    pub input_type: InputType,
    pub actions_required: ActionsRequired,
    pub gaming_options: GamingOptions,
}

impl QuestionEvent {
    /// The skill when exactly one is tagged.
    pub fn single_skill(&self) -> Option<&SkillId> {
        match self.skills.as_slice() {
            [s] => Some(s),
            _ => None,
        }
    }

    /// Canonical key of the tagged skill set (`a;b;c`).
    pub fn skill_key(&self) -> String {
        join_skills(&self.skills)
    }
}

fn join_skills(skills: &[SkillId]) -> String {
    skills
        .iter()
        .map(SkillId::as_str)
        .collect::<Vec<_>>()
        .join(";")
}

/// Raw test scores and optional external measures for one student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub pretest: f64,
    pub posttest: f64,
    pub delayed_posttest: f64,
    pub gaming: Option<f64>,
    pub confrustion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub events: Vec<QuestionEvent>,
    pub scores: Option<TestScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub source: String,
    pub seed: Option<u64>,
    /// Raw maximum of the knowledge tests; scores are normalized by it.
    pub score_max: f64,
}

impl Default for DatasetMetadata {
    fn default() -> Self {
        DatasetMetadata {
            source: "csv".into(),
            seed: None,
            score_max: DEFAULT_SCORE_MAX,
        }
    }
}

/// Reference to an event: student position and position in that student's
/// event list (equal to `seq_index`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventRef {
    pub student: usize,
    pub index: usize,
}

/// Validated collection of student records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    students: Vec<StudentRecord>,
    skills: BTreeSet<SkillId>,
    metadata: DatasetMetadata,
}

impl Dataset {
    /// Validates and builds a dataset. The skill set is the union of all
    /// event skills.
    pub fn new(students: Vec<StudentRecord>, metadata: DatasetMetadata) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut skills = BTreeSet::new();
        let mut n_events = 0;
        if !(metadata.score_max > 0.0) {
            return Err(Error::InvalidDataset("score_max must be positive".into()));
        }
        for s in &students {
            if !ids.insert(s.student_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate student id `{}`",
                    s.student_id
                )));
            }
            let mut last_start = i64::MIN;
            for (i, e) in s.events.iter().enumerate() {
                if e.student_id != s.student_id {
                    return Err(Error::InvalidDataset(format!(
                        "event of `{}` filed under `{}`",
                        e.student_id, s.student_id
                    )));
                }
                if e.seq_index != i {
                    return Err(Error::InvalidDataset(format!(
                        "student `{}`: seq_index {} at position {}",
                        s.student_id, e.seq_index, i
                    )));
                }
                if e.start_ms < last_start {
                    return Err(Error::InvalidDataset(format!(
                        "student `{}`: events not in start-time order at seq_index {}",
                        s.student_id, i
                    )));
                }
                last_start = e.start_ms;
                if e.end_ms < e.start_ms || !(e.duration >= 0.0) || !e.duration.is_finite() {
                    return Err(Error::InvalidDataset(format!(
                        "student `{}`: negative or invalid duration at seq_index {}",
                        s.student_id, i
                    )));
                }
                if e.skills.is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "student `{}`: event {} has no skills",
                        s.student_id, i
                    )));
                }
                if e.skills.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidDataset(format!(
                        "student `{}`: event {} skills not sorted/unique",
                        s.student_id, i
                    )));
                }
                skills.extend(e.skills.iter().cloned());
                n_events += 1;
            }
            if let Some(sc) = &s.scores {
                for v in [sc.pretest, sc.posttest, sc.delayed_posttest] {
                    if !(0.0..=metadata.score_max).contains(&v) {
                        return Err(Error::InvalidDataset(format!(
                            "student `{}`: score {} outside [0, {}]",
                            s.student_id, v, metadata.score_max
                        )));
                    }
                }
            }
        }
        if n_events == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            students,
            skills,
            metadata,
        })
    }

    pub fn students(&self) -> &[StudentRecord] {
        &self.students
    }

    pub fn skills(&self) -> &BTreeSet<SkillId> {
        &self.skills
    }

    pub fn metadata(&self) -> &DatasetMetadata {
        &self.metadata
    }

    pub fn n_events(&self) -> usize {
        self.students.iter().map(|s| s.events.len()).sum()
    }

    pub fn event(&self, r: EventRef) -> &QuestionEvent {
        &self.students[r.student].events[r.index]
    }

    /// All events in dataset order (student order, then `seq_index`).
    pub fn events(&self) -> impl Iterator<Item = (EventRef, &QuestionEvent)> + '_ {
        self.students.iter().enumerate().flat_map(|(si, s)| {
            s.events
                .iter()
                .enumerate()
                .map(move |(i, e)| (EventRef { student: si, index: i }, e))
        })
    }

    pub fn student_index(&self, student_id: &str) -> Option<usize> {
        self.students.iter().position(|s| s.student_id == student_id)
    }

    pub fn is_single_skill(&self) -> bool {
        self.events().all(|(_, e)| e.skills.len() == 1)
    }

    /// Score as a fraction of `score_max`.
    pub fn normalized(&self, raw: f64) -> f64 {
        raw / self.metadata.score_max
    }

    /// Attaches parsed scores. Students absent from `scores` keep `None`;
    /// unknown ids are rejected.
    pub fn with_scores(mut self, scores: ParsedScores) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .students
            .iter()
            .enumerate()
            .map(|(i, s)| (s.student_id.as_str(), i))
            .collect();
        let mut assigned = vec![None; self.students.len()];
        for (id, sc) in scores.rows {
            let i = *index.get(id.as_str()).ok_or_else(|| {
                Error::InvalidDataset(format!("scores for unknown student `{id}`"))
            })?;
            assigned[i] = Some(sc);
        }
        for (s, sc) in self.students.iter_mut().zip(assigned) {
            s.scores = sc;
        }
        self.metadata.score_max = scores.score_max;
        Dataset::new(self.students, self.metadata)
    }

    /// Partitions events by first-attempt correctness.
    pub fn split_correct_incorrect(&self) -> (Vec<EventRef>, Vec<EventRef>) {
        self.events().map(|(r, e)| (r, e.correct)).fold(
            (Vec::new(), Vec::new()),
            |(mut c, mut w), (r, ok)| {
                if ok {
                    c.push(r)
                } else {
                    w.push(r)
                }
                (c, w)
            },
        )
    }

    /// Incorrect events followed by at least two later opportunities on the
    /// same skill for the same student.
    pub fn slip_estimable_events(&self) -> Result<Vec<EventRef>> {
        let mut out = Vec::new();
        for (si, s) in self.students.iter().enumerate() {
            let mut remaining: HashMap<&SkillId, usize> = HashMap::new();
            for e in &s.events {
                let skill = single_skill_or_err(e)?;
                *remaining.entry(skill).or_default() += 1;
            }
            for (i, e) in s.events.iter().enumerate() {
                let skill = &e.skills[0];
                let left = remaining.get_mut(skill).expect("counted above");
                *left -= 1;
                if !e.correct && *left >= 2 {
                    out.push(EventRef { student: si, index: i });
                }
            }
        }
        Ok(out)
    }

    /// Per (student, skill) opportunity lists. Requires single-skill events.
    pub fn skill_sequences(&self) -> Result<Vec<BTreeMap<SkillId, Vec<usize>>>> {
        self.students
            .iter()
            .map(|s| {
                let mut m: BTreeMap<SkillId, Vec<usize>> = BTreeMap::new();
                for (i, e) in s.events.iter().enumerate() {
                    m.entry(single_skill_or_err(e)?.clone()).or_default().push(i);
                }
                Ok(m)
            })
            .collect()
    }
}

pub(crate) fn single_skill_or_err(e: &QuestionEvent) -> Result<&SkillId> {
    e.single_skill().ok_or_else(|| Error::MultiSkillUnsupported {
        student_id: e.student_id.clone(),
        seq_index: e.seq_index,
        n_skills: e.skills.len(),
    })
}

/// Column names used when reading a log CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogSchema {
    pub student_id: String,
    pub question_id: String,
    pub start_ms: String,
    pub end_ms: String,
    /// Explicit duration column in seconds; derived from timestamps if absent.
    pub duration: Option<String>,
    pub skills: String,
    pub correct: String,
    pub input_type: String,
    pub actions_required: String,
    pub gaming_options: String,
}

impl Default for LogSchema {
    fn default() -> Self {
        LogSchema {
            student_id: "student_id".into(),
            question_id: "question_id".into(),
            start_ms: "start_ms".into(),
            end_ms: "end_ms".into(),
            duration: None,
            skills: "skills".into(),
            correct: "correct".into(),
            input_type: "input_type".into(),
            actions_required: "actions_required".into(),
            gaming_options: "gaming_options".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseWarning {
    /// Two events of a student share a start time; file order was kept.
    OrderingViolation {
        student_id: String,
        start_ms: i64,
        rows: (usize, usize),
    },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::OrderingViolation {
                student_id,
                start_ms,
                rows,
            } => write!(
                f,
                "student `{student_id}`: rows {} and {} share start time {start_ms}; file order kept",
                rows.0, rows.1
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub dataset: Dataset,
    pub warnings: Vec<ParseWarning>,
    /// `# key=value` header lines.
    pub provenance: BTreeMap<String, String>,
}

/// Splits leading `# key=value` lines from the CSV body.
fn split_header_comments(text: &str) -> (BTreeMap<String, String>, &str) {
    let mut kv = BTreeMap::new();
    let mut rest = text;
    while let Some(line_end) = rest.find('\n').or(if rest.starts_with('#') {
        Some(rest.len())
    } else {
        None
    }) {
        let line = &rest[..line_end];
        let Some(body) = line.trim_end_matches('\r').strip_prefix('#') else {
            break;
        };
        for pair in body.split_whitespace() {
            if let Some((k, v)) = pair.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        rest = &rest[(line_end + 1).min(rest.len())..];
    }
    (kv, rest)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, col: usize, row: usize, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse::<T>().map_err(|e| Error::MalformedRow {
        row,
        message: format!("{what} `{raw}`: {e}"),
    })
}

fn parse_bool01(raw: &str, row: usize) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::MalformedRow {
            row,
            message: format!("correct `{other}` is not 0/1"),
        }),
    }
}

fn parse_skills(raw: &str, row: usize) -> Result<Vec<SkillId>> {
    let mut skills = raw
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(SkillId::new)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
    skills.sort();
    skills.dedup();
    if skills.is_empty() {
        return Err(Error::MalformedRow {
            row,
            message: "no skills".into(),
        });
    }
    Ok(skills)
}

/// Parses an interaction log. Rows are grouped by student (first-appearance
/// order), stably sorted by start time, and assigned `seq_index`.
pub fn parse_log(bytes: &[u8], schema: &LogSchema) -> Result<ParsedLog> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedRow {
        row: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let (provenance, body) = split_header_comments(text);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    let c_student = column(&headers, &schema.student_id)?;
    let c_question = column(&headers, &schema.question_id)?;
    let c_start = column(&headers, &schema.start_ms)?;
    let c_end = column(&headers, &schema.end_ms)?;
    let c_skills = column(&headers, &schema.skills)?;
    let c_correct = column(&headers, &schema.correct)?;
    let c_input = column(&headers, &schema.input_type)?;
    let c_actions = column(&headers, &schema.actions_required)?;
    let c_gaming = column(&headers, &schema.gaming_options)?;
    let c_duration = schema
        .duration
        .as_deref()
        .map(|d| column(&headers, d))
        .transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, QuestionEvent)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let student_id = rec.get(c_student).unwrap_or("").trim().to_string();
        if student_id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty student_id".into(),
            });
        }
        let start_ms: i64 = parse_field(&rec, c_start, row, "start_ms")?;
        let end_ms: i64 = parse_field(&rec, c_end, row, "end_ms")?;
        if end_ms < start_ms {
            return Err(Error::MalformedRow {
                row,
                message: format!("end_ms {end_ms} before start_ms {start_ms}"),
            });
        }
        let duration = match c_duration {
            Some(c) => {
                let d: f64 = parse_field(&rec, c, row, "duration")?;
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::MalformedRow {
                        row,
                        message: format!("duration {d} invalid"),
                    });
                }
                d
            }
            None => (end_ms - start_ms) as f64 / 1000.0,
        };
        let event = QuestionEvent {
            student_id: student_id.clone(),
            question_id: rec.get(c_question).unwrap_or("").trim().to_string(),
            seq_index: 0,
            skills: parse_skills(rec.get(c_skills).unwrap_or(""), row)?,
            start_ms,
            end_ms,
            duration,
            correct: parse_bool01(rec.get(c_correct).unwrap_or(""), row)?,
            input_type: parse_field(&rec, c_input, row, "input_type")?,
            actions_required: parse_field(&rec, c_actions, row, "actions_required")?,
            gaming_options: parse_field(&rec, c_gaming, row, "gaming_options")?,
        };
        groups
            .entry(student_id.clone())
            .or_insert_with(|| {
                order.push(student_id);
                Vec::new()
            })
            .push((row, event));
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut warnings = Vec::new();
    let mut students = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped");
        rows.sort_by_key(|(_, e)| e.start_ms);
        for w in rows.windows(2) {
            if w[0].1.start_ms == w[1].1.start_ms {
                warnings.push(ParseWarning::OrderingViolation {
                    student_id: id.clone(),
                    start_ms: w[0].1.start_ms,
                    rows: (w[0].0, w[1].0),
                });
            }
        }
        let events = rows
            .into_iter()
            .enumerate()
            .map(|(i, (_, mut e))| {
                e.seq_index = i;
                e
            })
            .collect();
        students.push(StudentRecord {
            student_id: id,
            events,
            scores: None,
        });
    }

    let metadata = DatasetMetadata {
        source: provenance
            .get("source")
            .cloned()
            .unwrap_or_else(|| "csv".into()),
        seed: provenance.get("seed").and_then(|s| s.parse().ok()),
        score_max: DEFAULT_SCORE_MAX,
    };
    Ok(ParsedLog {
        dataset: Dataset::new(students, metadata)?,
        warnings,
        provenance,
    })
}

/// Parsed scores file, raw values plus the detected scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedScores {
    pub rows: Vec<(String, TestScores)>,
    pub score_max: f64,
}

/// Parses a scores CSV. The scale comes from a `# score_max=` header when
/// present; otherwise raw counts (max 24) are assumed unless some value
/// exceeds 24, in which case percentages (max 100) are assumed.
pub fn parse_scores(bytes: &[u8]) -> Result<ParsedScores> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedRow {
        row: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let (provenance, body) = split_header_comments(text);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    let c_student = column(&headers, "student_id")?;
    let c_pre = column(&headers, "pretest")?;
    let c_post = column(&headers, "posttest")?;
    let c_delayed = column(&headers, "delayed_posttest")?;
    let c_gaming = column(&headers, "gaming").ok();
    let c_confrustion = column(&headers, "confrustion").ok();

    let optional = |rec: &csv::StringRecord, c: Option<usize>, row: usize, what: &str| -> Result<Option<f64>> {
        match c.and_then(|c| rec.get(c)).map(str::trim) {
            None | Some("") => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| Error::MalformedRow {
                row,
                message: format!("{what} `{raw}`: {e}"),
            }),
        }
    };

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let id = rec.get(c_student).unwrap_or("").trim().to_string();
        let scores = TestScores {
            pretest: parse_field(&rec, c_pre, row, "pretest")?,
            posttest: parse_field(&rec, c_post, row, "posttest")?,
            delayed_posttest: parse_field(&rec, c_delayed, row, "delayed_posttest")?,
            gaming: optional(&rec, c_gaming, row, "gaming")?,
            confrustion: optional(&rec, c_confrustion, row, "confrustion")?,
        };
        rows.push((id, scores));
    }
    let score_max = match provenance.get("score_max") {
        Some(v) => v.parse().map_err(|e| Error::MalformedRow {
            row: 0,
            message: format!("score_max `{v}`: {e}"),
        })?,
        None => {
            let hi = rows
                .iter()
                .flat_map(|(_, s)| [s.pretest, s.posttest, s.delayed_posttest])
                .fold(0.0_f64, f64::max);
            if hi <= DEFAULT_SCORE_MAX {
                DEFAULT_SCORE_MAX
            } else if hi <= 100.0 {
                100.0
            } else {
                return Err(Error::InvalidDataset(format!(
                    "test score {hi} exceeds both count and percentage scales"
                )));
            }
        }
    };
    Ok(ParsedScores { rows, score_max })
}

fn write_header_comments<W: Write>(w: &mut W, provenance: &[(String, String)]) -> Result<()> {
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

/// Dataset metadata as provenance pairs, merged with `extra`.
pub fn metadata_provenance(d: &Dataset, extra: &[(String, String)]) -> Vec<(String, String)> {
    let mut out = vec![("source".to_string(), d.metadata.source.clone())];
    if let Some(seed) = d.metadata.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    for (k, v) in extra {
        if !out.iter().any(|(ok, _)| ok == k) {
            out.push((k.clone(), v.clone()));
        }
    }
    out
}

/// Writes the log in the documented schema.
pub fn write_log<W: Write>(d: &Dataset, mut w: W, extra: &[(String, String)]) -> Result<()> {
    write_header_comments(&mut w, &metadata_provenance(d, extra))?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "student_id",
        "question_id",
        "start_ms",
        "end_ms",
        "skills",
        "correct",
        "input_type",
        "actions_required",
        "gaming_options",
    ])?;
    for (_, e) in d.events() {
        wtr.write_record([
            e.student_id.as_str(),
            e.question_id.as_str(),
            &e.start_ms.to_string(),
            &e.end_ms.to_string(),
            &e.skill_key(),
            if e.correct { "1" } else { "0" },
            e.input_type.as_str(),
            e.actions_required.as_str(),
            e.gaming_options.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the scores of every student that has them.
pub fn write_scores<W: Write>(d: &Dataset, mut w: W, extra: &[(String, String)]) -> Result<()> {
    let mut prov = metadata_provenance(d, extra);
    prov.push(("score_max".into(), d.metadata.score_max.to_string()));
    write_header_comments(&mut w, &prov)?;
    let with_gaming = d
        .students
        .iter()
        .any(|s| s.scores.as_ref().is_some_and(|x| x.gaming.is_some()));
    let with_confrustion = d
        .students
        .iter()
        .any(|s| s.scores.as_ref().is_some_and(|x| x.confrustion.is_some()));
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["student_id", "pretest", "posttest", "delayed_posttest"];
    if with_gaming {
        header.push("gaming");
    }
    if with_confrustion {
        header.push("confrustion");
    }
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &d.students {
        let Some(sc) = &s.scores else { continue };
        let mut rec = vec![
            s.student_id.clone(),
            sc.pretest.to_string(),
            sc.posttest.to_string(),
            sc.delayed_posttest.to_string(),
        ];
        if with_gaming {
            rec.push(opt(sc.gaming));
        }
        if with_confrustion {
            rec.push(opt(sc.confrustion));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "student_id,question_id,start_ms,end_ms,skills,correct,input_type,actions_required,gaming_options\n";

    fn parse(body: &str) -> Result<ParsedLog> {
        parse_log(format!("{HEADER}{body}").as_bytes(), &LogSchema::default())
    }

    fn ev(student: &str, seq: usize, skill: &str, correct: bool) -> QuestionEvent {
        QuestionEvent {
            student_id: student.into(),
            question_id: format!("q{seq}"),
            seq_index: seq,
            skills: vec![SkillId::new(skill).unwrap()],
            start_ms: seq as i64 * 1000,
            end_ms: seq as i64 * 1000 + 500,
            duration: 0.5,
            correct,
            input_type: InputType::Text,
            actions_required: ActionsRequired::One,
            gaming_options: GamingOptions::Limited,
        }
    }

    fn dataset(events: Vec<QuestionEvent>) -> Dataset {
        let mut by: BTreeMap<String, Vec<QuestionEvent>> = BTreeMap::new();
        for e in events {
            by.entry(e.student_id.clone()).or_default().push(e);
        }
        let students = by
            .into_iter()
            .map(|(id, events)| StudentRecord {
                student_id: id,
                events,
                scores: None,
            })
            .collect();
        Dataset::new(students, DatasetMetadata::default()).unwrap()
    }

    #[test]
    fn two_rows_one_student() {
        let p = parse("s1,q1,0,2000,A,1,slider,one,multiple\ns1,q2,3000,4500,A,0,text,multiple,limited\n")
            .unwrap();
        let d = &p.dataset;
        assert_eq!(d.students().len(), 1);
        let ev = &d.students()[0].events;
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].seq_index, ev[1].seq_index), (0, 1));
        assert_eq!(ev[1].duration, 1.5);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn missing_correct_column() {
        let text = "student_id,question_id,start_ms,end_ms,skills,input_type,actions_required,gaming_options\n\
                    s1,q1,0,1,A,slider,one,multiple\n";
        let err = parse_log(text.as_bytes(), &LogSchema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "correct"));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let err = parse("s1,q1,0,1,A,1,slider,one,multiple\ns1,q2,x,1,A,1,slider,one,multiple\n")
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }));
        let err = parse("s1,q1,0,1,A,2,slider,one,multiple\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
        let err = parse("s1,q1,0,1,A,1,dial,one,multiple\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn empty_log() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
    }

    #[test]
    fn rows_sorted_by_time_and_ties_keep_file_order() {
        let p = parse(
            "s1,qc,5000,6000,A,1,slider,one,multiple\n\
             s2,qx,0,10,B,1,slider,one,multiple\n\
             s1,qa,1000,2000,A,0,slider,one,multiple\n\
             s1,qb,1000,1500,A,1,slider,one,multiple\n",
        )
        .unwrap();
        let s1 = &p.dataset.students()[0];
        assert_eq!(s1.student_id, "s1");
        let qs: Vec<_> = s1.events.iter().map(|e| e.question_id.as_str()).collect();
        assert_eq!(qs, ["qa", "qb", "qc"]);
        assert_eq!(p.warnings.len(), 1);
        assert!(matches!(
            &p.warnings[0],
            ParseWarning::OrderingViolation { rows: (3, 4), .. }
        ));
    }

    #[test]
    fn multi_skill_column_sorted() {
        let p = parse("s1,q1,0,1,B;A;B,1,radio,one,multiple\n").unwrap();
        let e = &p.dataset.students()[0].events[0];
        assert_eq!(e.skill_key(), "A;B");
        assert_eq!(p.dataset.skills().len(), 2);
    }

    #[test]
    fn explicit_duration_column() {
        let text = "sid,qid,t0,t1,dur,kc,ok,it,ar,go\ns1,q1,0,1000,2.5,A,1,text,one,limited\n";
        let schema = LogSchema {
            student_id: "sid".into(),
            question_id: "qid".into(),
            start_ms: "t0".into(),
            end_ms: "t1".into(),
            duration: Some("dur".into()),
            skills: "kc".into(),
            correct: "ok".into(),
            input_type: "it".into(),
            actions_required: "ar".into(),
            gaming_options: "go".into(),
        };
        let p = parse_log(text.as_bytes(), &schema).unwrap();
        assert_eq!(p.dataset.students()[0].events[0].duration, 2.5);
    }

    #[test]
    fn partition_counts() {
        let d = dataset(vec![
            ev("s", 0, "A", true),
            ev("s", 1, "A", true),
            ev("s", 2, "A", false),
            ev("s", 3, "A", true),
        ]);
        let (c, w) = d.split_correct_incorrect();
        assert_eq!((c.len(), w.len()), (3, 1));

        let all = dataset(vec![ev("s", 0, "A", true), ev("s", 1, "A", true)]);
        let (c, w) = all.split_correct_incorrect();
        assert_eq!((c.len(), w.len()), (2, 0));
    }

    #[test]
    fn estimable_needs_two_lookahead() {
        let d = dataset(vec![
            ev("s", 0, "A", false),
            ev("s", 1, "A", true),
            ev("s", 2, "A", true),
        ]);
        assert_eq!(
            d.slip_estimable_events().unwrap(),
            vec![EventRef { student: 0, index: 0 }]
        );
        let d = dataset(vec![
            ev("s", 0, "A", true),
            ev("s", 1, "B", false),
            ev("s", 2, "A", true),
            ev("s", 3, "A", false),
        ]);
        // skill B has no lookahead; the last A is the third of three
        assert!(d.slip_estimable_events().unwrap().is_empty());
    }

    #[test]
    fn estimable_rejects_multi_skill() {
        let mut e = ev("s", 0, "A", false);
        e.skills.push(SkillId::new("B").unwrap());
        let d = dataset(vec![e]);
        assert!(matches!(
            d.slip_estimable_events(),
            Err(Error::MultiSkillUnsupported { n_skills: 2, .. })
        ));
    }

    #[test]
    fn validation_rejects_gaps_and_bad_scores() {
        let students = vec![StudentRecord {
            student_id: "s".into(),
            events: vec![ev("s", 0, "A", true), ev("s", 2, "A", true)],
            scores: None,
        }];
        assert!(Dataset::new(students, DatasetMetadata::default()).is_err());

        let students = vec![StudentRecord {
            student_id: "s".into(),
            events: vec![ev("s", 0, "A", true)],
            scores: Some(TestScores {
                pretest: 1.0,
                posttest: 25.0,
                delayed_posttest: 3.0,
                gaming: None,
                confrustion: None,
            }),
        }];
        assert!(Dataset::new(students, DatasetMetadata::default()).is_err());
    }

    #[test]
    fn scores_scale_detection() {
        let counts = parse_scores(b"student_id,pretest,posttest,delayed_posttest\ns,3,20,24\n").unwrap();
        assert_eq!(counts.score_max, 24.0);
        let pct = parse_scores(b"student_id,pretest,posttest,delayed_posttest,gaming\ns,30,80,75,0.2\n").unwrap();
        assert_eq!(pct.score_max, 100.0);
        assert_eq!(pct.rows[0].1.gaming, Some(0.2));
        assert_eq!(pct.rows[0].1.confrustion, None);
    }

    #[test]
    fn scores_attach_and_normalize() {
        let d = dataset(vec![ev("s", 0, "A", true)]);
        let sc = parse_scores(b"student_id,pretest,posttest,delayed_posttest\ns,6,12,18\n").unwrap();
        let d = d.with_scores(sc).unwrap();
        let s = d.students()[0].scores.as_ref().unwrap();
        assert_eq!(d.normalized(s.posttest), 0.5);
        let bad = parse_scores(b"student_id,pretest,posttest,delayed_posttest\nzz,6,12,18\n").unwrap();
        assert!(d.with_scores(bad).is_err());
    }

    #[test]
    fn write_then_parse_is_identity() {
        let mut events = vec![ev("a", 0, "A", true), ev("a", 1, "B", false)];
        events[1].skills.insert(0, SkillId::new("0").unwrap());
        events.push(ev("b", 0, "A", false));
        let mut d = dataset(events);
        d.metadata.seed = Some(9);
        d.metadata.source = "synthetic".into();
        let mut log = Vec::new();
        write_log(&d, &mut log, &[("config_hash".into(), "abc".into())]).unwrap();
        let parsed = parse_log(&log, &LogSchema::default()).unwrap();
        assert_eq!(parsed.provenance.get("config_hash").unwrap(), "abc");
        assert_eq!(parsed.dataset, d);
    }
}
