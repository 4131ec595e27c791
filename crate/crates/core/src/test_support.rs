//! Dataset builders for unit tests.

use crate::event_log::{
    ActionsRequired, Dataset, DatasetMetadata, GamingOptions, InputType, QuestionEvent, SkillId,
    StudentRecord,
};

pub fn ev(student: &str, seq: usize, skills: &[&str], dur: f64, correct: bool) -> QuestionEvent {
    let start = seq as i64 * 100_000;
    let mut skills: Vec<SkillId> = skills.iter().map(|s| SkillId::new(*s).unwrap()).collect();
    skills.sort();
    skills.dedup();
    QuestionEvent {
        student_id: student.into(),
        question_id: format!("q{seq}"),
        seq_index: seq,
        skills,
        start_ms: start,
        end_ms: start + (dur * 1000.0) as i64,
        duration: dur,
        correct,
        input_type: InputType::Radio,
        actions_required: ActionsRequired::One,
        gaming_options: GamingOptions::Multiple,
    }
}

/// Builds a dataset from `(student, [(skills, correct)])` sequences.
pub fn from_answers(students: &[(&str, Vec<(&[&str], bool)>)]) -> Dataset {
    ds(students
        .iter()
        .map(|(id, answers)| {
            answers
                .iter()
                .enumerate()
                .map(|(i, (sk, ok))| ev(id, i, sk, 20.0, *ok))
                .collect()
        })
        .collect())
}

pub fn ds(students: Vec<Vec<QuestionEvent>>) -> Dataset {
    let recs = students
        .into_iter()
        .map(|events| StudentRecord {
            student_id: events[0].student_id.clone(),
            events,
            scores: None,
        })
        .collect();
    Dataset::new(recs, DatasetMetadata::default()).unwrap()
}
