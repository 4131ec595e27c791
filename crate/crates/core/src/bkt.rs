//! Bayesian Knowledge Tracing: brute-force grid fitting per skill, knowledge
//! traces, and contextual slip estimates for incorrect answers.
//!
//! The contextual slip of an incorrect answer at opportunity `N` is the
//! probability that the skill was known at `N` given the two following
//! same-skill answers. The prior entering `N` conditions on answers
//! `1..N-1`; learning transitions apply after every opportunity and known
//! skills are never forgotten.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{single_skill_or_err, Dataset, EventRef, SkillId};
use crate::scalar::Real;

/// Per-skill BKT parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BktParams<T = f64> {
    /// Initial knowledge probability.
    pub l0: T,
    /// Learning transition probability.
    pub t: T,
    /// Guess probability.
    pub g: T,
    /// Slip probability.
    pub s: T,
}

impl<T: Real> BktParams<T> {
    pub fn new(l0: T, t: T, g: T, s: T) -> Self {
        BktParams { l0, t, g, s }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        unit(self.l0) && unit(self.t) && unit(self.g) && unit(self.s)
    }
}

/// P(correct) = pL(1 - S) + (1 - pL)G.
#[inline]
pub fn predict_correct<T: Real>(p_known: T, params: &BktParams<T>) -> T {
    p_known * (T::one() - params.s) + (T::one() - p_known) * params.g
}

/// Knowledge after one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BktUpdate<T = f64> {
    /// P(known) after conditioning on the observation.
    pub posterior_obs: T,
    /// `posterior_obs` pushed through the learning transition.
    pub next_prior: T,
}

/// Bayes update on one observation followed by the learning transition.
#[inline]
pub fn update<T: Real>(p_known: T, correct: bool, params: &BktParams<T>) -> Result<BktUpdate<T>> {
    let one = T::one();
    let (num, alt) = if correct {
        (p_known * (one - params.s), (one - p_known) * params.g)
    } else {
        (p_known * params.s, (one - p_known) * (one - params.g))
    };
    let den = num + alt;
    if den <= T::zero() {
        return Err(Error::DegenerateUpdate);
    }
    let posterior_obs = num / den;
    Ok(BktUpdate {
        posterior_obs,
        next_prior: posterior_obs + (one - posterior_obs) * params.t,
    })
}

/// Likelihood of the two follow-up answers given knowledge at `N`
/// (known, unknown). The transition applies after `N` and after `N + 1`.
pub fn lookahead_likelihoods<T: Real>(next: [bool; 2], params: &BktParams<T>) -> (T, T) {
    let one = T::one();
    let known = |c: bool| if c { one - params.s } else { params.s };
    let unknown = |c: bool| if c { params.g } else { one - params.g };
    let [a1, a2] = next;
    let given_known = known(a1) * known(a2);
    let t = params.t;
    let given_unknown =
        t * known(a1) * known(a2) + (one - t) * unknown(a1) * (t * known(a2) + (one - t) * unknown(a2));
    (given_known, given_unknown)
}

/// How the prior entering the incorrect answer is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlipPrior {
    /// Prior conditions on earlier answers only.
    #[default]
    Literal,
    /// Prior additionally conditions on the incorrect answer itself.
    ConditionOnCurrent,
}

/// P(known at N | A_{N+1}, A_{N+2}) for a prior `p_known` entering `N`.
pub fn slip_probability<T: Real>(p_known: T, next: [bool; 2], params: &BktParams<T>) -> T {
    let (lk, lu) = lookahead_likelihoods(next, params);
    let num = p_known * lk;
    let den = num + (T::one() - p_known) * lu;
    if den <= T::zero() {
        // Both branches impossible; fall back to the prior.
        return p_known;
    }
    num / den
}

/// Applies [`SlipPrior`] to the prior entering an incorrect answer.
pub fn slip_prior<T: Real>(p_known: T, params: &BktParams<T>, mode: SlipPrior) -> T {
    match mode {
        SlipPrior::Literal => p_known,
        SlipPrior::ConditionOnCurrent => update(p_known, false, params)
            .map(|u| u.posterior_obs)
            .unwrap_or(p_known),
    }
}

/// Search space for [`fit_bkt_grid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GridSpec {
    /// Coarse grid over `[0, 1]^4` (within the guess/slip bounds), then a
    /// fine grid in a neighbourhood of the coarse optimum. Steps are given
    /// as divisions of the unit interval.
    TwoStage {
        coarse_divisions: u32,
        fine_divisions: u32,
        /// Half-width of the refinement window, in fine steps.
        fine_radius: u32,
        g_max: f64,
        s_max: f64,
    },
    /// Explicit candidate list.
    Cells { cells: Vec<BktParams> },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::TwoStage {
            coarse_divisions: 20,
            fine_divisions: 100,
            fine_radius: 5,
            g_max: 0.5,
            s_max: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BktFit {
    pub params: BktParams,
    pub sse: f64,
    pub n_obs: usize,
}

/// Deduplicated observation sequences with multiplicities, in canonical
/// order so the objective does not depend on student order.
struct SequenceSet {
    seqs: Vec<(Vec<bool>, f64)>,
    n_obs: usize,
}

impl SequenceSet {
    fn new(mut raw: Vec<Vec<bool>>) -> Self {
        raw.sort();
        let n_obs = raw.iter().map(Vec::len).sum();
        let mut seqs: Vec<(Vec<bool>, f64)> = Vec::new();
        for s in raw {
            match seqs.last_mut() {
                Some((last, w)) if *last == s => *w += 1.0,
                _ => seqs.push((s, 1.0)),
            }
        }
        SequenceSet { seqs, n_obs }
    }

    /// Sum of squared prediction errors; `None` when a Bayes update is
    /// degenerate under these parameters.
    fn sse(&self, p: &BktParams) -> Option<f64> {
        let mut total = 0.0;
        for (seq, w) in &self.seqs {
            let mut pl = p.l0;
            let mut acc = 0.0;
            for &c in seq {
                let err = if c { 1.0 } else { 0.0 } - predict_correct(pl, p);
                acc += err * err;
                pl = update(pl, c, p).ok()?.next_prior;
            }
            total += w * acc;
        }
        Some(total)
    }
}

/// Correctness sequences of every student for `skill`.
pub fn skill_observations(d: &Dataset, skill: &SkillId) -> Result<Vec<Vec<bool>>> {
    let mut out = Vec::new();
    for s in d.students() {
        let mut seq = Vec::new();
        for e in &s.events {
            if e.skills.contains(skill) {
                single_skill_or_err(e)?;
                seq.push(e.correct);
            }
        }
        if !seq.is_empty() {
            out.push(seq);
        }
    }
    Ok(out)
}

fn axis(divisions: u32, max: f64) -> Vec<f64> {
    (0..=divisions)
        .map(|i| i as f64 / divisions as f64)
        .filter(|v| *v <= max + 1e-12)
        .collect()
}

fn window(center: f64, divisions: u32, radius: u32, max: f64) -> Vec<f64> {
    let c = (center * divisions as f64).round() as i64;
    (c - radius as i64..=c + radius as i64)
        .filter(|i| *i >= 0 && *i <= divisions as i64)
        .map(|i| i as f64 / divisions as f64)
        .filter(|v| *v <= max + 1e-12)
        .collect()
}

fn product(l0: &[f64], t: &[f64], g: &[f64], s: &[f64]) -> Vec<BktParams> {
    let mut out = Vec::with_capacity(l0.len() * t.len() * g.len() * s.len());
    for &a in l0 {
        for &b in t {
            for &c in g {
                for &d in s {
                    out.push(BktParams::new(a, b, c, d));
                }
            }
        }
    }
    out
}

fn lex_cmp(a: &BktParams, b: &BktParams) -> std::cmp::Ordering {
    a.l0.total_cmp(&b.l0)
        .then(a.t.total_cmp(&b.t))
        .then(a.g.total_cmp(&b.g))
        .then(a.s.total_cmp(&b.s))
}

/// Lowest SSE, ties broken by lexicographically smallest (L0, T, G, S).
fn search(set: &SequenceSet, cells: &[BktParams]) -> Option<(BktParams, f64)> {
    cells
        .par_iter()
        .filter_map(|c| set.sse(c).map(|e| (*c, e)))
        .min_by(|(pa, ea), (pb, eb)| ea.total_cmp(eb).then_with(|| lex_cmp(pa, pb)))
}

/// Fits BKT parameters for one skill by exhaustive grid search minimizing
/// the squared error of predicted correctness.
pub fn fit_bkt_grid(d: &Dataset, skill: &SkillId, grid: &GridSpec) -> Result<BktFit> {
    let obs = skill_observations(d, skill)?;
    if obs.is_empty() {
        return Err(Error::NoData(skill.to_string()));
    }
    fit_sequences(obs, grid).ok_or_else(|| Error::NoData(skill.to_string()))
}

/// Grid fit on raw correctness sequences. `None` when every cell is
/// degenerate.
pub fn fit_sequences(obs: Vec<Vec<bool>>, grid: &GridSpec) -> Option<BktFit> {
    let set = SequenceSet::new(obs);
    let (params, sse) = match grid {
        GridSpec::Cells { cells } => search(&set, cells)?,
        GridSpec::TwoStage {
            coarse_divisions,
            fine_divisions,
            fine_radius,
            g_max,
            s_max,
        } => {
            let unit = axis(*coarse_divisions, 1.0);
            let coarse = product(
                &unit,
                &unit,
                &axis(*coarse_divisions, *g_max),
                &axis(*coarse_divisions, *s_max),
            );
            let (best, _) = search(&set, &coarse)?;
            let w = |c: f64, max: f64| window(c, *fine_divisions, *fine_radius, max);
            let fine = product(
                &w(best.l0, 1.0),
                &w(best.t, 1.0),
                &w(best.g, *g_max),
                &w(best.s, *s_max),
            );
            search(&set, &fine)?
        }
    };
    Some(BktFit {
        params,
        sse,
        n_obs: set.n_obs,
    })
}

/// Fits every skill of the dataset.
pub fn fit_all(d: &Dataset, grid: &GridSpec) -> Result<BTreeMap<SkillId, BktFit>> {
    d.skills()
        .iter()
        .map(|k| fit_bkt_grid(d, k, grid).map(|f| (k.clone(), f)))
        .collect()
}

/// One opportunity in a knowledge trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Index of the event in the student's event list.
    pub event_index: usize,
    /// P(known) entering this opportunity.
    pub prior: f64,
    /// P(known) after the observation, before the transition.
    pub posterior_obs: f64,
    /// P(known) after the observation and the transition.
    pub posterior: f64,
}

/// Knowledge estimates per student (dataset order) and skill.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeTrace {
    pub students: Vec<BTreeMap<SkillId, Vec<TraceStep>>>,
}

impl KnowledgeTrace {
    pub fn steps(&self, student: usize, skill: &SkillId) -> &[TraceStep] {
        self.students[student]
            .get(skill)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Runs BKT forward over each (student, skill) opportunity sequence.
pub fn trace_knowledge(d: &Dataset, params: &BTreeMap<SkillId, BktParams>) -> Result<KnowledgeTrace> {
    let seqs = d.skill_sequences()?;
    let students = seqs
        .into_iter()
        .enumerate()
        .map(|(si, per_skill)| {
            let events = &d.students()[si].events;
            per_skill
                .into_iter()
                .map(|(skill, idx)| {
                    let p = params
                        .get(&skill)
                        .ok_or_else(|| Error::MissingParams(skill.to_string()))?;
                    let mut pl = p.l0;
                    let mut steps = Vec::with_capacity(idx.len());
                    for i in idx {
                        let u = update(pl, events[i].correct, p)?;
                        steps.push(TraceStep {
                            event_index: i,
                            prior: pl,
                            posterior_obs: u.posterior_obs,
                            posterior: u.next_prior,
                        });
                        pl = u.next_prior;
                    }
                    Ok((skill, steps))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KnowledgeTrace { students })
}

/// Which detector produced an estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    BktContextual,
    MlContextual,
    Bkfc,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [
        DetectorKind::BktContextual,
        DetectorKind::MlContextual,
        DetectorKind::Bkfc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::BktContextual => "bkt_contextual",
            DetectorKind::MlContextual => "ml_contextual",
            DetectorKind::Bkfc => "bkfc",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown detector `{s}`"))
    }
}

/// Carelessness probability of one incorrect event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlipEstimate {
    pub event: EventRef,
    pub probability: f64,
    pub model: DetectorKind,
}

/// Contextual slip estimates for every slip-estimable incorrect event.
pub fn contextual_slip(
    d: &Dataset,
    traces: &KnowledgeTrace,
    params: &BTreeMap<SkillId, BktParams>,
    mode: SlipPrior,
) -> Result<Vec<SlipEstimate>> {
    let targets = d.slip_estimable_events()?;
    // (student, event index) -> position within its skill trace
    let mut position: HashMap<(usize, usize), usize> = HashMap::new();
    for (si, per_skill) in traces.students.iter().enumerate() {
        for steps in per_skill.values() {
            for (k, st) in steps.iter().enumerate() {
                position.insert((si, st.event_index), k);
            }
        }
    }
    targets
        .into_iter()
        .map(|r| {
            let e = d.event(r);
            let skill = &e.skills[0];
            let p = params
                .get(skill)
                .ok_or_else(|| Error::MissingParams(skill.to_string()))?;
            let steps = traces.steps(r.student, skill);
            let k = *position
                .get(&(r.student, r.index))
                .ok_or_else(|| Error::MissingParams(skill.to_string()))?;
            if k + 2 >= steps.len() {
                return Err(Error::InsufficientLookahead {
                    student_id: e.student_id.clone(),
                    seq_index: e.seq_index,
                });
            }
            let events = &d.students()[r.student].events;
            let next = [
                events[steps[k + 1].event_index].correct,
                events[steps[k + 2].event_index].correct,
            ];
            let prior = slip_prior(steps[k].prior, p, mode);
            Ok(SlipEstimate {
                event: r,
                probability: slip_probability(prior, next, p),
                model: DetectorKind::BktContextual,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p(l0: f64, t: f64, g: f64, s: f64) -> BktParams {
        BktParams::new(l0, t, g, s)
    }

    /// Enumerates the latent knowledge paths over N, N+1, N+2.
    fn enumerate_paths(prior: f64, next: [bool; 2], q: &BktParams) -> f64 {
        let emit = |known: bool, c: bool| match (known, c) {
            (true, true) => 1.0 - q.s,
            (true, false) => q.s,
            (false, true) => q.g,
            (false, false) => 1.0 - q.g,
        };
        let trans = |from: bool, to: bool| match (from, to) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => q.t,
            (false, false) => 1.0 - q.t,
        };
        let (mut known_mass, mut total) = (0.0, 0.0);
        for k0 in [false, true] {
            for k1 in [false, true] {
                for k2 in [false, true] {
                    let w = if k0 { prior } else { 1.0 - prior }
                        * trans(k0, k1)
                        * trans(k1, k2)
                        * emit(k1, next[0])
                        * emit(k2, next[1]);
                    total += w;
                    if k0 {
                        known_mass += w;
                    }
                }
            }
        }
        known_mass / total
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_correct(1.0, &p(0.0, 0.0, 0.3, 0.0)), 1.0);
        assert_abs_diff_eq!(predict_correct(0.0, &p(0.0, 0.0, 0.2, 0.1)), 0.2);
        assert_abs_diff_eq!(predict_correct(0.5, &p(0.0, 0.0, 0.2, 0.1)), 0.55, epsilon = 1e-15);
        // f32 instantiation of the same kernel
        let q32 = BktParams::<f32>::new(0.0, 0.0, 0.2, 0.1);
        assert!((predict_correct(0.5f32, &q32) - 0.55).abs() < 1e-6);
    }

    #[test]
    fn update_examples() {
        let q = p(0.0, 0.0, 0.2, 0.1);
        let u = update(0.5, true, &q).unwrap();
        assert_abs_diff_eq!(u.posterior_obs, 0.45 / 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(u.next_prior, 0.45 / 0.55, epsilon = 1e-12);
        let u = update(0.5, false, &q).unwrap();
        assert_abs_diff_eq!(u.posterior_obs, 0.05 / 0.45, epsilon = 1e-12);
        for c in [true, false] {
            let u = update(1.0, c, &p(0.0, 0.37, 0.2, 0.1)).unwrap();
            assert_eq!(u.next_prior, 1.0);
        }
        assert!(matches!(
            update(0.0, true, &p(0.0, 0.0, 0.0, 0.1)),
            Err(Error::DegenerateUpdate)
        ));
    }

    #[test]
    fn slip_examples() {
        let q = p(0.0, 0.2, 0.2, 0.1);
        let v = slip_probability(0.6, [true, true], &q);
        assert_abs_diff_eq!(v, 0.486 / 0.57256, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.848819, epsilon = 1e-6);
        assert_eq!(slip_probability(1.0, [false, false], &q), 1.0);
        assert_eq!(slip_probability(0.0, [false, false], &p(0.0, 0.0, 0.2, 0.1)), 0.0);
    }

    #[test]
    fn condition_on_current_lowers_prior() {
        let q = p(0.0, 0.2, 0.2, 0.1);
        let lit = slip_prior(0.6, &q, SlipPrior::Literal);
        let cond = slip_prior(0.6, &q, SlipPrior::ConditionOnCurrent);
        assert_eq!(lit, 0.6);
        assert_abs_diff_eq!(cond, 0.06 / (0.06 + 0.4 * 0.8), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn closed_form_matches_enumeration(
            prior in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.0..0.99f64, s in 0.0..0.99f64,
            a in any::<bool>(), b in any::<bool>()
        ) {
            let q = p(0.0, t, g, s);
            let lhs = slip_probability(prior, [a, b], &q);
            let rhs = enumerate_paths(prior, [a, b], &q);
            prop_assume!(rhs.is_finite());
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn slip_monotone_in_prior(
            p1 in 0.0..=1.0f64, p2 in 0.0..=1.0f64, t in 0.0..=1.0f64,
            g in 0.01..0.5f64, s in 0.01..0.5f64, a in any::<bool>(), b in any::<bool>()
        ) {
            let q = p(0.0, t, g, s);
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(slip_probability(lo, [a, b], &q) <= slip_probability(hi, [a, b], &q) + 1e-12);
        }

        #[test]
        fn correct_lookahead_raises_belief(
            prior in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.0..0.5f64, s in 0.0..0.49f64
        ) {
            let q = p(0.0, t, g, s);
            prop_assert!(slip_probability(prior, [true, true], &q) >= prior - 1e-12);
        }

        #[test]
        fn transition_never_lowers_knowledge(
            pl in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.01..0.5f64, s in 0.01..0.5f64, c in any::<bool>()
        ) {
            let u = update(pl, c, &p(0.0, t, g, s)).unwrap();
            prop_assert!(u.next_prior >= u.posterior_obs);
            prop_assert!((0.0..=1.0).contains(&u.next_prior));
        }
    }

    #[test]
    fn single_cell_grid_returns_cell() {
        let cell = p(0.3, 0.1, 0.2, 0.1);
        let fit = fit_sequences(
            vec![vec![true, false, true]],
            &GridSpec::Cells { cells: vec![cell] },
        )
        .unwrap();
        assert_eq!(fit.params, cell);
        assert_eq!(fit.n_obs, 3);
    }

    #[test]
    fn always_correct_drives_l0_to_max() {
        let grid = GridSpec::default();
        let fit = fit_sequences(vec![vec![true]], &grid).unwrap();
        assert_eq!(fit.params.l0, 1.0);
        // exhaustive check over the coarse grid
        let set = SequenceSet::new(vec![vec![true]]);
        let unit = axis(20, 1.0);
        let half = axis(20, 0.5);
        for c in product(&unit, &unit, &half, &half) {
            if let Some(e) = set.sse(&c) {
                assert!(fit.sse <= e);
            }
        }
    }

    #[test]
    fn degenerate_cells_are_skipped() {
        let cells = vec![p(0.0, 0.0, 0.0, 0.1), p(0.5, 0.0, 0.2, 0.1)];
        let fit = fit_sequences(vec![vec![true, true]], &GridSpec::Cells { cells }).unwrap();
        assert_eq!(fit.params, p(0.5, 0.0, 0.2, 0.1));
    }

    #[test]
    fn grid_ties_break_lexicographically() {
        // With no observations every cell has SSE 0.
        let cells = vec![p(0.5, 0.1, 0.1, 0.1), p(0.2, 0.9, 0.1, 0.1), p(0.2, 0.3, 0.4, 0.1)];
        let fit = fit_sequences(vec![vec![]], &GridSpec::Cells { cells }).unwrap();
        assert_eq!(fit.params, p(0.2, 0.3, 0.4, 0.1));
    }

    #[test]
    fn grid_axes_respect_bounds() {
        assert_eq!(axis(20, 0.5).len(), 11);
        assert_eq!(*axis(20, 0.5).last().unwrap(), 0.5);
        let w = window(0.5, 100, 5, 0.5);
        assert_eq!(w.first().copied(), Some(0.45));
        assert_eq!(w.last().copied(), Some(0.5));
        assert_eq!(window(0.0, 100, 5, 1.0).len(), 6);
    }
}
