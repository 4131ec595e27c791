use careless::event_log::{parse_log, parse_scores, write_log, write_scores, Dataset, LogSchema, SkillId};
use careless::sim::{simulate, SimConfig};

/// 181 students answering 16,649 questions in total, some tagged with two
/// skills.
fn export() -> Dataset {
    let mut cfg = SimConfig::default_with_seed(21);
    cfg.n_students = 181;
    let extra: Vec<_> = cfg.curriculum[..12]
        .iter()
        .map(|item| {
            let mut it = item.clone();
            it.question_id = format!("{}_review", it.question_id);
            it
        })
        .collect();
    cfg.curriculum.extend(extra);
    for item in cfg.curriculum.iter_mut().step_by(7) {
        if let Some(rest) = item.skills[0].as_str().strip_prefix("ps_") {
            item.skills.push(SkillId::new(format!("se_{rest}")).unwrap());
            item.skills.sort();
        }
    }
    let (d, _) = simulate(&cfg).unwrap();
    let meta = d.metadata().clone();
    let mut students = d.students().to_vec();
    for s in students.iter_mut().take(3) {
        s.events.pop();
    }
    Dataset::new(students, meta).unwrap()
}

#[test]
fn synthetic_export_round_trips() {
    let d = export();
    assert_eq!(d.students().len(), 181);
    assert_eq!(d.n_events(), 16_649);
    assert!(!d.is_single_skill());

    let mut log = Vec::new();
    write_log(&d, &mut log, &[("config_hash".into(), "0123456789abcdef".into())]).unwrap();
    let parsed = parse_log(&log, &LogSchema::default()).unwrap();
    assert!(parsed.warnings.is_empty());
    assert_eq!(parsed.provenance["config_hash"], "0123456789abcdef");

    let mut scores = Vec::new();
    write_scores(&d, &mut scores, &[]).unwrap();
    let restored = parsed.dataset.with_scores(parse_scores(&scores).unwrap()).unwrap();
    assert_eq!(restored, d);
}
