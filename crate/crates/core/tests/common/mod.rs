#![allow(dead_code)]

use careless::event_log::{
    ActionsRequired, Dataset, DatasetMetadata, GamingOptions, InputType, QuestionEvent, SkillId,
    StudentRecord,
};
use careless::pfa::PfaParams;

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

/// PFA log-likelihood by a direct scan: each first attempt's logit sums,
/// over its skills, easiness plus weighted successes and failures counted
/// strictly before it.
pub fn pfa_log_likelihood(d: &Dataset, p: &PfaParams) -> f64 {
    let mut ll = 0.0;
    for s in d.students() {
        let mut seen: Vec<(&SkillId, bool)> = Vec::new();
        for e in &s.events {
            let m: f64 = e
                .skills
                .iter()
                .map(|k| {
                    let w = p.skills[k];
                    let succ = seen.iter().filter(|(sk, ok)| *sk == k && *ok).count() as f64;
                    let fail = seen.iter().filter(|(sk, ok)| *sk == k && !*ok).count() as f64;
                    w.beta + w.gamma * succ + w.rho * fail
                })
                .sum();
            let p_correct = 1.0 / (1.0 + (-m).exp());
            ll += if e.correct { p_correct.ln() } else { (1.0 - p_correct).ln() };
            for k in &e.skills {
                seen.push((k, e.correct));
            }
        }
    }
    ll
}
