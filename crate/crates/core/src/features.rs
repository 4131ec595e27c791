//! Behavioral features per event.
//!
//! "Same skill" means the same tagged skill set; for single-skill logs this
//! is the skill itself. Counts and running totals include the current
//! question, percent errors and the previous-answer features do not.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event_log::{ActionsRequired, Dataset, EventRef, GamingOptions, InputType};

/// Encoded predictor names, in coefficient-table order.
pub const FEATURE_COLUMNS: [&str; 18] = [
    "duration",
    "z_problem",
    "z_skill",
    "student_diff",
    "total_time",
    "total_time_skill",
    "dur_prev",
    "dur_prev2",
    "sd_last3_skill",
    "n_attempted",
    "n_attempted_skill",
    "prev_correct",
    "n_correct_prev2",
    "pct_errors_skill",
    "input_type_radio",
    "input_type_text",
    "actions_required_one",
    "gaming_options_multiple",
];

pub const N_ENCODED: usize = FEATURE_COLUMNS.len();

/// Hash identifying a column ordering; models record it and refuse rows
/// encoded differently.
pub fn manifest_hash(columns: &[&str]) -> String {
    let mut h = Sha256::new();
    for c in columns {
        h.update(c.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

pub fn default_manifest_hash() -> String {
    manifest_hash(&FEATURE_COLUMNS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub f1_duration: f64,
    pub f2_z_problem: f64,
    pub f3_z_skill: f64,
    pub f4_student_diff: f64,
    pub f5_total_time: f64,
    pub f6_total_time_skill: f64,
    pub f7_dur_prev: f64,
    pub f8_dur_prev2: f64,
    pub f9_sd_last3_skill: f64,
    pub f10_n_attempted: f64,
    pub f11_n_attempted_skill: f64,
    pub f12_prev_correct: f64,
    pub f13_n_correct_prev2: f64,
    pub f14_pct_errors_skill: f64,
    pub f15_input_type: InputType,
    pub f16_actions_required: ActionsRequired,
    pub f17_gaming_options: GamingOptions,
}

impl FeatureVector {
    pub fn zero() -> Self {
        FeatureVector {
            f1_duration: 0.0,
            f2_z_problem: 0.0,
            f3_z_skill: 0.0,
            f4_student_diff: 0.0,
            f5_total_time: 0.0,
            f6_total_time_skill: 0.0,
            f7_dur_prev: 0.0,
            f8_dur_prev2: 0.0,
            f9_sd_last3_skill: 0.0,
            f10_n_attempted: 0.0,
            f11_n_attempted_skill: 0.0,
            f12_prev_correct: 0.0,
            f13_n_correct_prev2: 0.0,
            f14_pct_errors_skill: 0.0,
            f15_input_type: InputType::Slider,
            f16_actions_required: ActionsRequired::Multiple,
            f17_gaming_options: GamingOptions::Limited,
        }
    }

    /// Numeric features pass through; categorical ones become dummies with
    /// slider / multiple actions / limited gaming as baselines.
    pub fn encode(&self) -> [f64; N_ENCODED] {
        let d = |b: bool| if b { 1.0 } else { 0.0 };
        [
            self.f1_duration,
            self.f2_z_problem,
            self.f3_z_skill,
            self.f4_student_diff,
            self.f5_total_time,
            self.f6_total_time_skill,
            self.f7_dur_prev,
            self.f8_dur_prev2,
            self.f9_sd_last3_skill,
            self.f10_n_attempted,
            self.f11_n_attempted_skill,
            self.f12_prev_correct,
            self.f13_n_correct_prev2,
            self.f14_pct_errors_skill,
            d(self.f15_input_type == InputType::Radio),
            d(self.f15_input_type == InputType::Text),
            d(self.f16_actions_required == ActionsRequired::One),
            d(self.f17_gaming_options == GamingOptions::Multiple),
        ]
    }
}

/// How duration z-scores are referenced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScoreMode {
    /// Against every event of the comparison group in the dataset.
    #[default]
    Retrospective,
    /// Against group events that started strictly earlier (running stats).
    Online,
}

impl ZScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ZScoreMode::Retrospective => "retrospective",
            ZScoreMode::Online => "online",
        }
    }
}

/// Rows aligned to dataset event order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub manifest_hash: String,
    pub z_mode: ZScoreMode,
    pub events: Vec<EventRef>,
    pub vectors: Vec<FeatureVector>,
    pub rows: Vec<[f64; N_ENCODED]>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row index of every event, for lookups from `EventRef`.
    pub fn index(&self) -> HashMap<EventRef, usize> {
        self.events.iter().enumerate().map(|(i, r)| (*r, i)).collect()
    }

    pub fn check_manifest(&self, expected: &str) -> Result<()> {
        if self.manifest_hash != expected {
            return Err(Error::ManifestMismatch {
                expected: expected.to_string(),
                found: self.manifest_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Sample mean and SD of a group.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// z-score of `x`; zero for groups under two observations or with no
    /// spread.
    fn z(&self, x: f64) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let sd = (self.m2 / (self.n - 1) as f64).sqrt();
        if sd > 0.0 && sd.is_finite() {
            (x - self.mean) / sd
        } else {
            0.0
        }
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Duration z-scores per event (problem, skill), aligned to dataset order.
fn z_scores(d: &Dataset, mode: ZScoreMode) -> Vec<(f64, f64)> {
    let refs: Vec<(EventRef, String, String, f64, i64)> = d
        .events()
        .map(|(r, e)| (r, e.question_id.clone(), e.skill_key(), e.duration, e.start_ms))
        .collect();
    match mode {
        ZScoreMode::Retrospective => {
            let mut by_q: HashMap<&str, Welford> = HashMap::new();
            let mut by_k: HashMap<&str, Welford> = HashMap::new();
            for (_, q, k, dur, _) in &refs {
                by_q.entry(q).or_default().push(*dur);
                by_k.entry(k).or_default().push(*dur);
            }
            refs.iter()
                .map(|(_, q, k, dur, _)| (by_q[q.as_str()].z(*dur), by_k[k.as_str()].z(*dur)))
                .collect()
        }
        ZScoreMode::Online => {
            let mut order: Vec<usize> = (0..refs.len()).collect();
            order.sort_by_key(|&i| refs[i].4);
            let mut by_q: HashMap<&str, Welford> = HashMap::new();
            let mut by_k: HashMap<&str, Welford> = HashMap::new();
            let mut out = vec![(0.0, 0.0); refs.len()];
            let mut i = 0;
            while i < order.len() {
                // events sharing a start time see the same history
                let mut j = i;
                while j < order.len() && refs[order[j]].4 == refs[order[i]].4 {
                    j += 1;
                }
                for &idx in &order[i..j] {
                    let (_, q, k, dur, _) = &refs[idx];
                    let zq = by_q.get(q.as_str()).map_or(0.0, |w| w.z(*dur));
                    let zk = by_k.get(k.as_str()).map_or(0.0, |w| w.z(*dur));
                    out[idx] = (zq, zk);
                }
                for &idx in &order[i..j] {
                    let (_, q, k, dur, _) = &refs[idx];
                    by_q.entry(q).or_default().push(*dur);
                    by_k.entry(k).or_default().push(*dur);
                }
                i = j;
            }
            out
        }
    }
}

#[derive(Default)]
struct SkillHistory {
    attempts: usize,
    errors: usize,
    total_time: f64,
    last: Vec<f64>,
}

/// Computes the feature matrix for every event of the dataset.
pub fn extract_features(d: &Dataset, mode: ZScoreMode) -> FeatureMatrix {
    let z = z_scores(d, mode);
    let mut events = Vec::with_capacity(z.len());
    let mut vectors = Vec::with_capacity(z.len());
    let mut zi = z.into_iter();
    for (si, s) in d.students().iter().enumerate() {
        let mut total_time = 0.0;
        let mut per_skill: HashMap<String, SkillHistory> = HashMap::new();
        for (i, e) in s.events.iter().enumerate() {
            let (z_problem, z_skill) = zi.next().expect("one z pair per event");
            let prev_mean = if i == 0 { None } else { Some(total_time / i as f64) };
            total_time += e.duration;
            let hist = per_skill.entry(e.skill_key()).or_default();
            let pct_errors = if hist.attempts == 0 {
                0.0
            } else {
                hist.errors as f64 / hist.attempts as f64
            };
            hist.attempts += 1;
            hist.total_time += e.duration;
            hist.last.push(e.duration);
            if hist.last.len() > 3 {
                hist.last.remove(0);
            }
            let sd3 = if hist.last.len() == 3 { sample_sd(&hist.last) } else { 0.0 };
            let prev = |k: usize| i.checked_sub(k).map(|j| &s.events[j]);
            let correct = |k: usize| prev(k).map_or(0.0, |p| if p.correct { 1.0 } else { 0.0 });

            vectors.push(FeatureVector {
                f1_duration: e.duration,
                f2_z_problem: z_problem,
                f3_z_skill: z_skill,
                f4_student_diff: prev_mean.map_or(0.0, |m| e.duration - m),
                f5_total_time: total_time,
                f6_total_time_skill: hist.total_time,
                f7_dur_prev: prev(1).map_or(0.0, |p| p.duration),
                f8_dur_prev2: match (prev(1), prev(2)) {
                    (Some(a), Some(b)) => a.duration + b.duration,
                    _ => 0.0,
                },
                f9_sd_last3_skill: sd3,
                f10_n_attempted: (i + 1) as f64,
                f11_n_attempted_skill: hist.attempts as f64,
                f12_prev_correct: correct(1),
                f13_n_correct_prev2: correct(1) + correct(2),
                f14_pct_errors_skill: pct_errors,
                f15_input_type: e.input_type,
                f16_actions_required: e.actions_required,
                f17_gaming_options: e.gaming_options,
            });
            if !e.correct {
                hist.errors += 1;
            }
            events.push(EventRef { student: si, index: i });
        }
    }
    let rows = vectors.iter().map(FeatureVector::encode).collect();
    FeatureMatrix {
        columns: FEATURE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        manifest_hash: default_manifest_hash(),
        z_mode: mode,
        events,
        vectors,
        rows,
    }
}

/// Writes `features.csv`: a `# manifest=... z_mode=...` line, then
/// `student_id, seq_index` and the encoded columns.
pub fn write_features<W: Write>(d: &Dataset, m: &FeatureMatrix, mut w: W, provenance: &[(String, String)]) -> Result<()> {
    writeln!(w, "# manifest={} z_mode={}", m.manifest_hash, m.z_mode.as_str())?;
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["student_id".to_string(), "seq_index".to_string()];
    header.extend(m.columns.iter().cloned());
    wtr.write_record(&header)?;
    for (r, row) in m.events.iter().zip(&m.rows) {
        let e = d.event(*r);
        let mut rec = vec![e.student_id.clone(), e.seq_index.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
