//! Learner simulator with known knowledge states and careless behavior.
//!
//! Each student starts knowing each skill with probability `L0` and moves
//! from unknown to known with probability `T` after every opportunity on
//! it. Careless behavior is drawn per action, independent of knowledge
//! unless `knowledge_gated` is set, shortens the response, and forces an
//! incorrect answer with probability `careless_error_prob`. Students may
//! also rapidly guess on items whose skill they do not know yet.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkt::BktParams;
use crate::error::{Error, Result};
use crate::event_log::{
    ActionsRequired, Dataset, DatasetMetadata, GamingOptions, InputType, QuestionEvent, SkillId,
    StudentRecord, TestScores, DEFAULT_SCORE_MAX,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub id: SkillId,
    pub params: BktParams,
}

/// Log-normal response time in seconds: `ln(duration) ~ N(mu, sigma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTemplate {
    pub question_id: String,
    pub skills: Vec<SkillId>,
    pub input_type: InputType,
    pub actions_required: ActionsRequired,
    pub gaming_options: GamingOptions,
    pub duration: DurationModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_students: usize,
    pub skills: Vec<SkillSpec>,
    /// Items presented to every student, in order.
    pub curriculum: Vec<ItemTemplate>,
    /// Mean per-action probability of careless behavior.
    pub careless_rate: f64,
    /// Beta concentration of per-student careless rates around
    /// `careless_rate`; `None` gives every student the same rate.
    #[serde(default)]
    pub careless_rate_concentration: Option<f64>,
    /// Duration multiplier applied to careless actions, in (0, 1].
    pub careless_speed_factor: f64,
    /// P(incorrect | careless behavior).
    #[serde(default = "one")]
    pub careless_error_prob: f64,
    /// Careless behavior only occurs when every skill of the item is known.
    #[serde(default)]
    pub knowledge_gated: bool,
    /// Learning transitions are skipped on careless actions.
    #[serde(default)]
    pub no_learning_when_careless: bool,
    /// Mean per-action probability of rapid guessing on items with an
    /// unknown skill. Guesses keep the knowledge-path outcome, are fast and
    /// yield no learning.
    #[serde(default)]
    pub gaming_rate: f64,
    /// Beta concentration of per-student guessing rates.
    #[serde(default)]
    pub gaming_rate_concentration: Option<f64>,
    /// Duration multiplier applied to guesses, in (0, 1].
    #[serde(default = "one")]
    pub gaming_speed_factor: f64,
    /// SD of the normal noise added to simulated test scores.
    pub posttest_noise_sd: f64,
    /// Pause between consecutive questions in milliseconds.
    #[serde(default = "default_gap")]
    pub gap_ms: i64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_gap() -> i64 {
    2_000
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_students == 0 {
            return bad("n_students must be at least 1".into());
        }
        if self.curriculum.is_empty() {
            return bad("curriculum is empty".into());
        }
        if !unit(self.careless_rate) || !unit(self.careless_error_prob) || !unit(self.gaming_rate) {
            return bad("careless and gaming probabilities must lie in [0, 1]".into());
        }
        for (name, f) in [
            ("careless_speed_factor", self.careless_speed_factor),
            ("gaming_speed_factor", self.gaming_speed_factor),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        for (name, c) in [
            ("careless_rate_concentration", self.careless_rate_concentration),
            ("gaming_rate_concentration", self.gaming_rate_concentration),
        ] {
            if let Some(k) = c {
                if !(k > 0.0 && k.is_finite()) {
                    return bad(format!("{name} must be positive"));
                }
            }
        }
        if !(self.posttest_noise_sd >= 0.0) {
            return bad("posttest_noise_sd must be non-negative".into());
        }
        if self.gap_ms < 0 {
            return bad("gap_ms must be non-negative".into());
        }
        let mut known = BTreeMap::new();
        for s in &self.skills {
            if !s.params.is_valid() {
                return bad(format!("skill `{}` has parameters outside [0, 1]", s.id));
            }
            if known.insert(&s.id, ()).is_some() {
                return bad(format!("skill `{}` declared twice", s.id));
            }
        }
        for item in &self.curriculum {
            if item.skills.is_empty() {
                return bad(format!("item `{}` has no skills", item.question_id));
            }
            for k in &item.skills {
                if !known.contains_key(k) {
                    return bad(format!("item `{}` uses undeclared skill `{k}`", item.question_id));
                }
            }
            if !(item.duration.sigma >= 0.0) || !item.duration.mu.is_finite() {
                return bad(format!("item `{}` has an invalid duration model", item.question_id));
            }
        }
        Ok(())
    }

    /// Single-skill configuration modelled on a decimals game: ten skills
    /// (five problem-solving, five self-explanation), eight opportunities
    /// each, interleaved.
    pub fn default_with_seed(seed: u64) -> Self {
        let kinds = ["sorting", "number_line", "sequence", "bucket", "addition"];
        let mut skills = Vec::new();
        for (i, k) in kinds.iter().enumerate() {
            let f = i as f64;
            skills.push(SkillSpec {
                id: SkillId::new(format!("ps_{k}")).expect("static id"),
                params: BktParams::new(0.35 + 0.05 * f, 0.12 + 0.02 * f, 0.2, 0.08),
            });
            skills.push(SkillSpec {
                id: SkillId::new(format!("se_{k}")).expect("static id"),
                params: BktParams::new(0.45 + 0.04 * f, 0.10 + 0.02 * f, 0.25, 0.08),
            });
        }
        let mut curriculum = Vec::new();
        for round in 0..8 {
            for (i, k) in kinds.iter().enumerate() {
                let (ps_input, ps_actions, ps_gaming) = match i {
                    0 => (InputType::Slider, ActionsRequired::Multiple, GamingOptions::Multiple),
                    1 => (InputType::Slider, ActionsRequired::One, GamingOptions::Limited),
                    2 => (InputType::Text, ActionsRequired::Multiple, GamingOptions::Limited),
                    3 => (InputType::Radio, ActionsRequired::Multiple, GamingOptions::Multiple),
                    _ => (InputType::Text, ActionsRequired::One, GamingOptions::Limited),
                };
                curriculum.push(ItemTemplate {
                    question_id: format!("{k}_{round}_ps"),
                    skills: vec![SkillId::new(format!("ps_{k}")).expect("static id")],
                    input_type: ps_input,
                    actions_required: ps_actions,
                    gaming_options: ps_gaming,
                    duration: DurationModel {
                        mu: (25.0 + 5.0 * i as f64).ln(),
                        sigma: 0.7,
                    },
                });
                curriculum.push(ItemTemplate {
                    question_id: format!("{k}_{round}_se"),
                    skills: vec![SkillId::new(format!("se_{k}")).expect("static id")],
                    input_type: InputType::Radio,
                    actions_required: ActionsRequired::One,
                    gaming_options: GamingOptions::Multiple,
                    duration: DurationModel {
                        mu: 12.0_f64.ln(),
                        sigma: 0.7,
                    },
                });
            }
        }
        SimConfig {
            n_students: 200,
            skills,
            curriculum,
            careless_rate: 0.1,
            careless_rate_concentration: Some(8.0),
            careless_speed_factor: 0.5,
            careless_error_prob: 1.0,
            knowledge_gated: false,
            no_learning_when_careless: true,
            gaming_rate: 0.25,
            gaming_rate_concentration: Some(2.0),
            gaming_speed_factor: 0.5,
            posttest_noise_sd: 1.0,
            gap_ms: default_gap(),
            seed,
        }
    }

    /// Single skill, `opportunities` items, the given BKT parameters and no
    /// careless behavior.
    pub fn single_skill(n_students: usize, opportunities: usize, params: BktParams, seed: u64) -> Self {
        let id = SkillId::new("A").expect("static id");
        SimConfig {
            n_students,
            skills: vec![SkillSpec {
                id: id.clone(),
                params,
            }],
            curriculum: (0..opportunities)
                .map(|i| ItemTemplate {
                    question_id: format!("q{i}"),
                    skills: vec![id.clone()],
                    input_type: InputType::Text,
                    actions_required: ActionsRequired::One,
                    gaming_options: GamingOptions::Limited,
                    duration: DurationModel {
                        mu: 20.0_f64.ln(),
                        sigma: 0.4,
                    },
                })
                .collect(),
            careless_rate: 0.0,
            careless_rate_concentration: None,
            careless_speed_factor: 1.0,
            careless_error_prob: 1.0,
            knowledge_gated: false,
            no_learning_when_careless: false,
            gaming_rate: 0.0,
            gaming_rate_concentration: None,
            gaming_speed_factor: 1.0,
            posttest_noise_sd: 0.0,
            gap_ms: default_gap(),
            seed,
        }
    }
}

/// Hidden state behind one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    /// Knowledge of each skill of the event (aligned with `event.skills`)
    /// when the answer was given.
    pub knowledge: Vec<bool>,
    pub careless_behavior: bool,
    /// Outcome of the knowledge path, i.e. the answer absent carelessness.
    pub counterfactual_correct: bool,
    /// Careless behavior that turned a would-be correct answer incorrect.
    pub careless_error: bool,
    /// Rapid guess on an item with an unknown skill.
    #[serde(default)]
    pub gaming: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTruth {
    pub student_id: String,
    /// Per-action careless-behavior probability of this student.
    pub careless_rate: f64,
    /// Per-action guessing probability on items with an unknown skill.
    #[serde(default)]
    pub gaming_rate: f64,
    pub final_knowledge: BTreeMap<SkillId, bool>,
}

impl StudentTruth {
    pub fn mean_final_knowledge(&self) -> f64 {
        let n = self.final_knowledge.len().max(1) as f64;
        self.final_knowledge.values().filter(|k| **k).count() as f64 / n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per student (dataset order), per event.
    pub events: Vec<Vec<EventTruth>>,
    pub students: Vec<StudentTruth>,
}

impl GroundTruth {
    pub fn event(&self, r: crate::event_log::EventRef) -> &EventTruth {
        &self.events[r.student][r.index]
    }
}

/// Fills `careless_error` from behavior, counterfactual outcome and the
/// observed answer.
pub fn label_counterfactuals(d: &Dataset, mut truth: GroundTruth) -> GroundTruth {
    for (r, e) in d.events() {
        let t = &mut truth.events[r.student][r.index];
        t.careless_error = t.careless_behavior && t.counterfactual_correct && !e.correct;
    }
    truth
}

fn knowledge_path_probability(cfg: &[&BktParams], known: &[bool]) -> f64 {
    if known.iter().all(|k| *k) {
        cfg.iter().map(|p| 1.0 - p.s).product()
    } else {
        cfg.iter()
            .zip(known)
            .filter(|(_, k)| !**k)
            .map(|(p, _)| p.g)
            .fold(f64::INFINITY, f64::min)
    }
}

struct SimulatedStudent {
    record: StudentRecord,
    truth: Vec<EventTruth>,
    student: StudentTruth,
}

fn student_rate(mean: f64, concentration: Option<f64>, rng: &mut ChaCha8Rng) -> f64 {
    match concentration {
        Some(k) if mean > 0.0 && mean < 1.0 => Beta::new(k * mean, k * (1.0 - mean))
            .expect("validated beta shape")
            .sample(rng),
        _ => mean,
    }
}

fn simulate_student(cfg: &SimConfig, idx: usize, params: &BTreeMap<&SkillId, &BktParams>) -> SimulatedStudent {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64);
    let student_id = format!("s{idx:04}");

    let careless_rate = student_rate(cfg.careless_rate, cfg.careless_rate_concentration, &mut rng);
    let gaming_rate = student_rate(cfg.gaming_rate, cfg.gaming_rate_concentration, &mut rng);
    let mut n_gamed = 0usize;

    let mut knowledge: BTreeMap<&SkillId, bool> = cfg
        .skills
        .iter()
        .map(|s| (&s.id, rng.random_bool(s.params.l0)))
        .collect();
    let initial = knowledge.values().filter(|k| **k).count() as f64 / knowledge.len().max(1) as f64;

    let mut clock: i64 = 0;
    let mut events = Vec::with_capacity(cfg.curriculum.len());
    let mut truth = Vec::with_capacity(cfg.curriculum.len());
    for (seq, item) in cfg.curriculum.iter().enumerate() {
        let mut skills = item.skills.clone();
        skills.sort();
        skills.dedup();
        let known: Vec<bool> = skills.iter().map(|k| knowledge[k]).collect();
        let item_params: Vec<&BktParams> = skills.iter().map(|k| params[k]).collect();

        let all_known = known.iter().all(|k| *k);
        let gaming = !all_known && gaming_rate > 0.0 && rng.random_bool(gaming_rate);
        let eligible = !gaming && (!cfg.knowledge_gated || all_known);
        let careless = eligible && rng.random_bool(careless_rate);
        let p_correct = knowledge_path_probability(&item_params, &known);
        let counterfactual_correct = rng.random::<f64>() < p_correct;
        let forced_wrong = careless && rng.random_bool(cfg.careless_error_prob);
        let correct = counterfactual_correct && !forced_wrong;

        let base = LogNormal::new(item.duration.mu, item.duration.sigma)
            .expect("validated duration model")
            .sample(&mut rng);
        let seconds = if gaming {
            base * cfg.gaming_speed_factor
        } else if careless {
            base * cfg.careless_speed_factor
        } else {
            base
        };
        let start_ms = clock;
        let end_ms = start_ms + (seconds * 1000.0).round() as i64;
        clock = end_ms + cfg.gap_ms;

        events.push(QuestionEvent {
            student_id: student_id.clone(),
            question_id: item.question_id.clone(),
            seq_index: seq,
            skills: skills.clone(),
            start_ms,
            end_ms,
            duration: (end_ms - start_ms) as f64 / 1000.0,
            correct,
            input_type: item.input_type,
            actions_required: item.actions_required,
            gaming_options: item.gaming_options,
        });
        truth.push(EventTruth {
            knowledge: known,
            careless_behavior: careless,
            counterfactual_correct,
            careless_error: false,
            gaming,
        });
        n_gamed += usize::from(gaming);

        let learns = !gaming && !(careless && cfg.no_learning_when_careless);
        for k in &skills {
            let u: f64 = rng.random();
            if learns && u < params[k].t {
                if let Some(state) = knowledge.get_mut(k) {
                    *state = true;
                }
            }
        }
    }

    let final_mean = knowledge.values().filter(|k| **k).count() as f64 / knowledge.len().max(1) as f64;
    let noise = Normal::new(0.0, cfg.posttest_noise_sd.max(0.0)).expect("validated sd");
    let test = |mean: f64, rng: &mut ChaCha8Rng| {
        let e = if cfg.posttest_noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
        (DEFAULT_SCORE_MAX * mean + e).round().clamp(0.0, DEFAULT_SCORE_MAX)
    };
    let scores = TestScores {
        pretest: test(initial, &mut rng),
        posttest: test(final_mean, &mut rng),
        delayed_posttest: test(final_mean, &mut rng),
        gaming: (cfg.gaming_rate > 0.0).then(|| n_gamed as f64 / cfg.curriculum.len() as f64),
        confrustion: None,
    };

    SimulatedStudent {
        record: StudentRecord {
            student_id: student_id.clone(),
            events,
            scores: Some(scores),
        },
        truth,
        student: StudentTruth {
            student_id,
            careless_rate,
            gaming_rate,
            final_knowledge: knowledge.into_iter().map(|(k, v)| (k.clone(), v)).collect(),
        },
    }
}

/// Simulates a dataset and its ground truth. Output depends only on the
/// configuration (including the seed), not on thread scheduling.
pub fn simulate(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let params: BTreeMap<&SkillId, &BktParams> = cfg.skills.iter().map(|s| (&s.id, &s.params)).collect();
    let sims: Vec<SimulatedStudent> = (0..cfg.n_students)
        .into_par_iter()
        .map(|i| simulate_student(cfg, i, &params))
        .collect();
    let mut records = Vec::with_capacity(sims.len());
    let mut events = Vec::with_capacity(sims.len());
    let mut students = Vec::with_capacity(sims.len());
    for s in sims {
        records.push(s.record);
        events.push(s.truth);
        students.push(s.student);
    }
    let d = Dataset::new(
        records,
        DatasetMetadata {
            source: "synthetic".into(),
            seed: Some(cfg.seed),
            score_max: DEFAULT_SCORE_MAX,
        },
    )?;
    let truth = label_counterfactuals(&d, GroundTruth { events, students });
    Ok((d, truth))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes event-level flags: `student_id, seq_index, knowledge,
/// careless_behavior, counterfactual_correct, careless_error, gaming`.
pub fn write_ground_truth<W: Write>(d: &Dataset, truth: &GroundTruth, mut w: W, provenance: &[(String, String)]) -> Result<()> {
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "student_id",
        "seq_index",
        "knowledge",
        "careless_behavior",
        "counterfactual_correct",
        "careless_error",
        "gaming",
    ])?;
    for (r, e) in d.events() {
        let t = truth.event(r);
        let knowledge: Vec<&str> = t.knowledge.iter().map(|k| flag(*k)).collect();
        wtr.write_record([
            e.student_id.as_str(),
            &e.seq_index.to_string(),
            &knowledge.join(";"),
            flag(t.careless_behavior),
            flag(t.counterfactual_correct),
            flag(t.careless_error),
            flag(t.gaming),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes per-student truth: `student_id, careless_rate, gaming_rate,
/// final_knowledge` (mean over skills).
pub fn write_student_truth<W: Write>(truth: &GroundTruth, mut w: W, provenance: &[(String, String)]) -> Result<()> {
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["student_id", "careless_rate", "gaming_rate", "final_knowledge"])?;
    for s in &truth.students {
        wtr.write_record([
            s.student_id.as_str(),
            &s.careless_rate.to_string(),
            &s.gaming_rate.to_string(),
            &s.mean_final_knowledge().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Event-level ground truth read back from CSV, keyed by
/// `(student_id, seq_index)`.
pub type EventFlags = BTreeMap<(String, usize), EventTruth>;

pub fn read_ground_truth(bytes: &[u8]) -> Result<EventFlags> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut out = BTreeMap::new();
    let bit = |s: &str, row: usize| match s {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::MalformedRow {
            row,
            message: format!("flag `{other}` is not 0/1"),
        }),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() < 6 {
            return Err(Error::MalformedRow {
                row,
                message: "expected 6 columns".into(),
            });
        }
        let seq: usize = rec[1].parse().map_err(|e| Error::MalformedRow {
            row,
            message: format!("seq_index: {e}"),
        })?;
        let knowledge = rec[2]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| bit(s, row))
            .collect::<Result<Vec<_>>>()?;
        out.insert(
            (rec[0].to_string(), seq),
            EventTruth {
                knowledge,
                careless_behavior: bit(&rec[3], row)?,
                counterfactual_correct: bit(&rec[4], row)?,
                careless_error: bit(&rec[5], row)?,
                gaming: match rec.get(6) {
                    Some(g) => bit(g, row)?,
                    None => false,
                },
            },
        );
    }
    Ok(out)
}

/// Per-student careless rates read back from CSV.
pub fn read_student_truth(bytes: &[u8]) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let rate: f64 = rec.get(1).unwrap_or("").parse().map_err(|e| Error::MalformedRow {
            row: i + 1,
            message: format!("careless_rate: {e}"),
        })?;
        out.insert(rec.get(0).unwrap_or("").to_string(), rate);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SimConfig {
        let mut c = SimConfig::default_with_seed(seed);
        c.n_students = 30;
        c
    }

    #[test]
    fn same_seed_identical_output() {
        let (a, ta) = simulate(&small(3)).unwrap();
        let (b, tb) = simulate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = simulate(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small(11);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&cfg).unwrap());
        let b = four.install(|| simulate(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn no_carelessness_no_slip_no_guess() {
        let mut cfg = small(5);
        cfg.careless_rate = 0.0;
        for s in &mut cfg.skills {
            s.params.s = 0.0;
            s.params.g = 0.0;
        }
        let (d, t) = simulate(&cfg).unwrap();
        for (r, e) in d.events() {
            let tr = t.event(r);
            assert!(!tr.careless_behavior);
            assert_eq!(e.correct, tr.knowledge.iter().all(|k| *k));
        }
    }

    #[test]
    fn always_careless_always_wrong() {
        let mut cfg = small(6);
        cfg.careless_rate = 1.0;
        cfg.gaming_rate = 0.0;
        let (d, t) = simulate(&cfg).unwrap();
        for (r, e) in d.events() {
            assert!(!e.correct);
            assert!(t.event(r).careless_behavior);
        }
    }

    #[test]
    fn careless_error_implications() {
        let (d, t) = simulate(&small(8)).unwrap();
        let (mut errors, mut behaviors) = (0, 0);
        for (r, e) in d.events() {
            let tr = t.event(r);
            if tr.careless_error {
                assert!(tr.careless_behavior);
                assert!(!e.correct);
                errors += 1;
            }
            behaviors += tr.careless_behavior as usize;
        }
        assert!(errors <= behaviors);
        assert!(errors > 0);
    }

    #[test]
    fn counterfactual_labelling_definition() {
        let (d, mut t) = simulate(&small(9)).unwrap();
        let r = d.events().find(|(_, e)| !e.correct).unwrap().0;
        t.events[r.student][r.index].careless_behavior = true;
        t.events[r.student][r.index].counterfactual_correct = true;
        assert!(label_counterfactuals(&d, t.clone()).event(r).careless_error);
        t.events[r.student][r.index].counterfactual_correct = false;
        let relabelled = label_counterfactuals(&d, t);
        assert!(!relabelled.event(r).careless_error);
        assert!(relabelled.event(r).careless_behavior);
    }

    #[test]
    fn careless_actions_are_faster() {
        let cfg = small(10);
        let (d, t) = simulate(&cfg).unwrap();
        let (mut fast, mut slow) = (Vec::new(), Vec::new());
        for (r, e) in d.events() {
            let tr = t.event(r);
            if tr.careless_behavior {
                fast.push(e.duration)
            } else if !tr.gaming {
                slow.push(e.duration)
            }
        }
        assert!(fast.len() + slow.len() >= 1000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&fast) < mean(&slow));
    }

    #[test]
    fn guesses_only_on_unknown_items_and_block_learning() {
        let mut cfg = SimConfig::single_skill(300, 30, BktParams::new(0.3, 0.3, 0.2, 0.1), 4);
        cfg.gaming_rate = 1.0;
        let (_, t) = simulate(&cfg).unwrap();
        let (mut gamed, mut learned) = (0, 0);
        for student in &t.events {
            let mut known = false;
            for (i, tr) in student.iter().enumerate() {
                assert_eq!(tr.gaming, !tr.knowledge[0]);
                assert!(!(tr.gaming && tr.careless_behavior));
                if i > 0 && tr.knowledge[0] && !known {
                    learned += 1;
                }
                known = tr.knowledge[0];
                gamed += tr.gaming as usize;
            }
        }
        assert!(gamed > 0);
        assert_eq!(learned, 0);
    }

    #[test]
    fn forced_error_rate() {
        let mut cfg = SimConfig::single_skill(400, 50, BktParams::new(1.0, 0.0, 0.0, 0.0), 2);
        cfg.careless_rate = 0.36;
        let (d, _) = simulate(&cfg).unwrap();
        let (_, wrong) = d.split_correct_incorrect();
        let frac = wrong.len() as f64 / d.n_events() as f64;
        assert!((frac - 0.36).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn correctness_curve_matches_bkt_marginal() {
        let q = BktParams::new(0.4, 0.15, 0.2, 0.08);
        let (d, _) = simulate(&SimConfig::single_skill(500, 40, q, 21)).unwrap();
        // forward marginal P(known at n), then P(correct at n)
        let mut known = q.l0;
        let mut total_dev = 0.0;
        for n in 0..40 {
            let expected = known * (1.0 - q.s) + (1.0 - known) * q.g;
            let observed = d
                .students()
                .iter()
                .filter(|s| s.events[n].correct)
                .count() as f64
                / 500.0;
            let se = (expected * (1.0 - expected) / 500.0).sqrt();
            assert!((observed - expected).abs() <= 4.0 * se, "opportunity {n}: {observed} vs {expected}");
            total_dev += (observed - expected).abs();
            known += (1.0 - known) * q.t;
        }
        assert!(total_dev / 40.0 <= 0.02, "mean deviation {}", total_dev / 40.0);
    }

    #[test]
    fn transition_frequency_matches_t() {
        let q = BktParams::new(0.3, 0.15, 0.2, 0.08);
        let mut cfg = SimConfig::single_skill(600, 10, q, 33);
        cfg.careless_rate = 0.0;
        let (_, t) = simulate(&cfg).unwrap();
        let (mut at_risk, mut learned) = (0usize, 0usize);
        for ev in &t.events {
            for w in ev.windows(2) {
                if !w[0].knowledge[0] {
                    at_risk += 1;
                    learned += w[1].knowledge[0] as usize;
                }
            }
        }
        let rate = learned as f64 / at_risk as f64;
        let se = (q.t * (1.0 - q.t) / at_risk as f64).sqrt();
        assert!((rate - q.t).abs() <= 3.0 * se, "{rate} vs {}", q.t);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(1);
        c.n_students = 0;
        assert!(matches!(simulate(&c), Err(Error::InvalidConfig(_))));
        let mut c = small(1);
        c.careless_rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.careless_speed_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.curriculum.clear();
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.curriculum[0].skills = vec![SkillId::new("nope").unwrap()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn ground_truth_csv_roundtrip() {
        let (d, t) = simulate(&small(12)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&d, &t, &mut buf, &[("seed".into(), "12".into())]).unwrap();
        let flags = read_ground_truth(&buf).unwrap();
        assert_eq!(flags.len(), d.n_events());
        for (r, e) in d.events() {
            assert_eq!(&flags[&(e.student_id.clone(), e.seq_index)], t.event(r));
        }
        let mut buf = Vec::new();
        write_student_truth(&t, &mut buf, &[]).unwrap();
        let rates = read_student_truth(&buf).unwrap();
        assert_eq!(rates["s0000"], t.students[0].careless_rate);
    }
}
