//! Performance Factor Analysis: per-skill easiness plus success and failure
//! weights, summed over the skills tagged on an event and passed through the
//! logistic link.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{Dataset, EventRef, SkillId};
use crate::logistic::{self, Design, FitWarning, OptSpec};
use crate::scalar::Real;

/// Weights for one skill.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillWeights<T = f64> {
    /// Easiness logit.
    pub beta: T,
    /// Weight per prior success.
    pub gamma: T,
    /// Weight per prior failure.
    pub rho: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PfaParams<T = f64> {
    pub skills: BTreeMap<SkillId, SkillWeights<T>>,
}

impl<T: Real> PfaParams<T> {
    pub fn weights(&self, skill: &SkillId) -> Result<&SkillWeights<T>> {
        self.skills
            .get(skill)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))
    }
}

/// Prior successes and failures of one student on one skill.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillCounts {
    pub skill: SkillId,
    pub successes: u32,
    pub failures: u32,
}

/// Logit of a correct answer: sum over `counts` of `beta + gamma*s + rho*f`.
pub fn pfa_m<T: Real>(counts: &[SkillCounts], params: &PfaParams<T>) -> Result<T> {
    let mut m = T::zero();
    for c in counts {
        let w = params.weights(&c.skill)?;
        m = m + w.beta + w.gamma * T::lit(c.successes as f64) + w.rho * T::lit(c.failures as f64);
    }
    Ok(m)
}

/// `1 / (1 + e^-m)`.
pub fn p_correct<T: Real>(m: T) -> T {
    logistic::sigmoid(m)
}

/// Per-event prior counts for every tagged skill, in dataset order. Counts
/// exclude the event itself.
pub fn causal_counts(d: &Dataset) -> Vec<(EventRef, Vec<SkillCounts>)> {
    d.students()
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let mut tally: BTreeMap<&SkillId, (u32, u32)> = BTreeMap::new();
            s.events
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let counts = e
                        .skills
                        .iter()
                        .map(|k| {
                            let (sc, fc) = tally.get(k).copied().unwrap_or_default();
                            SkillCounts {
                                skill: k.clone(),
                                successes: sc,
                                failures: fc,
                            }
                        })
                        .collect();
                    for k in &e.skills {
                        let t = tally.entry(k).or_default();
                        if e.correct {
                            t.0 += 1;
                        } else {
                            t.1 += 1;
                        }
                    }
                    (EventRef { student: si, index: i }, counts)
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

/// Logistic design for all first attempts: three columns per skill in
/// (beta, gamma, rho) order, skills in sorted order.
#[derive(Clone, Debug)]
pub struct PfaDesign {
    pub skills: Vec<SkillId>,
    pub design: Design,
}

impl PfaDesign {
    pub fn new(d: &Dataset) -> Self {
        let skills: Vec<SkillId> = d.skills().iter().cloned().collect();
        let pos: BTreeMap<&SkillId, usize> = skills.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let k = 3 * skills.len();
        let counts = causal_counts(d);
        let mut x = vec![0.0; k * counts.len()];
        let mut y = Vec::with_capacity(counts.len());
        for (row, (r, cs)) in counts.iter().enumerate() {
            for c in cs {
                let j = 3 * pos[&c.skill];
                let base = row * k + j;
                x[base] += 1.0;
                x[base + 1] += c.successes as f64;
                x[base + 2] += c.failures as f64;
            }
            y.push(d.event(*r).correct);
        }
        PfaDesign {
            skills,
            design: Design::new(x, k, y).expect("shape built above"),
        }
    }

    pub fn to_vector(&self, p: &PfaParams) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(3 * self.skills.len());
        for s in &self.skills {
            let w = p.weights(s)?;
            v.extend([w.beta, w.gamma, w.rho]);
        }
        Ok(v)
    }

    pub fn to_params(&self, v: &[f64]) -> PfaParams {
        PfaParams {
            skills: self
                .skills
                .iter()
                .zip(v.chunks(3))
                .map(|(s, c)| {
                    (
                        s.clone(),
                        SkillWeights {
                            beta: c[0],
                            gamma: c[1],
                            rho: c[2],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn log_likelihood(&self, p: &PfaParams) -> Result<f64> {
        Ok(self.design.log_likelihood(&self.to_vector(p)?))
    }

    /// Gradient in (beta, gamma, rho) per skill.
    pub fn gradient(&self, p: &PfaParams) -> Result<PfaParams> {
        Ok(self.to_params(&self.design.gradient(&self.to_vector(p)?)))
    }

    /// Design restricted to the easiness columns.
    fn easiness_only(&self) -> Design {
        let k = self.design.n_cols;
        let x = self
            .design
            .x
            .chunks(k)
            .flat_map(|row| row.iter().step_by(3).copied())
            .collect();
        Design::new(x, self.skills.len(), self.design.y.clone()).expect("subset of valid design")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfaFit {
    pub params: PfaParams,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
}

/// Maximum-likelihood fit over all first attempts by Newton ascent from
/// zero.
pub fn fit_pfa(d: &Dataset, opt: &OptSpec) -> Result<PfaFit> {
    let pd = PfaDesign::new(d);
    let f = logistic::fit(&pd.design, opt)?;
    Ok(PfaFit {
        params: pd.to_params(&f.coefficients),
        log_likelihood: f.log_likelihood,
        grad_norm: f.grad_norm,
        iterations: f.iterations,
        warnings: f.warnings,
    })
}

/// Fit with success and failure weights fixed at zero.
pub fn fit_pfa_easiness_only(d: &Dataset, opt: &OptSpec) -> Result<PfaFit> {
    let pd = PfaDesign::new(d);
    let f = logistic::fit(&pd.easiness_only(), opt)?;
    Ok(PfaFit {
        params: PfaParams {
            skills: pd
                .skills
                .iter()
                .zip(&f.coefficients)
                .map(|(s, &beta)| {
                    (
                        s.clone(),
                        SkillWeights {
                            beta,
                            gamma: 0.0,
                            rho: 0.0,
                        },
                    )
                })
                .collect(),
        },
        log_likelihood: f.log_likelihood,
        grad_norm: f.grad_norm,
        iterations: f.iterations,
        warnings: f.warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfaEstimate {
    pub event: EventRef,
    pub m: f64,
    pub p_m: f64,
    pub counts: Vec<SkillCounts>,
}

/// Performance estimate for every event in dataset order.
pub fn pfa_trace(d: &Dataset, params: &PfaParams) -> Result<Vec<PfaEstimate>> {
    causal_counts(d)
        .into_iter()
        .map(|(event, counts)| {
            let m = pfa_m(&counts, params)?;
            Ok(PfaEstimate {
                event,
                m,
                p_m: p_correct(m),
                counts,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{ds, ev, from_answers};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sk(s: &str) -> SkillId {
        SkillId::new(s).unwrap()
    }

    fn params(entries: &[(&str, f64, f64, f64)]) -> PfaParams {
        PfaParams {
            skills: entries
                .iter()
                .map(|&(s, beta, gamma, rho)| (sk(s), SkillWeights { beta, gamma, rho }))
                .collect(),
        }
    }

    fn counts(skill: &str, s: u32, f: u32) -> SkillCounts {
        SkillCounts {
            skill: sk(skill),
            successes: s,
            failures: f,
        }
    }

    #[test]
    fn logit_examples() {
        let p = params(&[("A", 0.0, 0.0, 0.0)]);
        let m: f64 = pfa_m(&[counts("A", 0, 0)], &p).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(p_correct(m), 0.5);

        let p = params(&[("A", 0.5, 0.0, 0.0), ("B", 0.5, 0.0, 0.0)]);
        let m: f64 = pfa_m(&[counts("A", 0, 0), counts("B", 0, 0)], &p).unwrap();
        assert_eq!(m, 1.0);

        let p = params(&[("A", -1.0, 0.3, -0.1)]);
        let m: f64 = pfa_m(&[counts("A", 4, 2)], &p).unwrap();
        let hand = -1.0 + 4.0 * 0.3 + 2.0 * -0.1;
        assert!((m - hand).abs() < 1e-15 && hand.abs() < 1e-15);
        assert!((p_correct(m) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_skill() {
        let p = params(&[("A", 0.0, 0.0, 0.0)]);
        assert!(matches!(pfa_m::<f64>(&[counts("Z", 0, 0)], &p), Err(Error::UnknownSkill(_))));
        let d = from_answers(&[("s", vec![(&["Z"][..], true)])]);
        assert!(matches!(pfa_trace(&d, &p), Err(Error::UnknownSkill(_))));
    }

    #[test]
    fn f32_kernel_matches_f64() {
        let p32 = PfaParams {
            skills: [(sk("A"), SkillWeights { beta: -1.0f32, gamma: 0.3, rho: -0.1 })].into(),
        };
        let m = pfa_m(&[counts("A", 2, 1)], &p32).unwrap();
        assert!((m - (-0.5f32)).abs() < 1e-6);
    }

    #[test]
    fn counts_are_causal() {
        let d = from_answers(&[(
            "s",
            vec![
                (&["A"][..], true),
                (&["A", "B"][..], false),
                (&["B"][..], true),
                (&["A"][..], true),
            ],
        )]);
        let c = causal_counts(&d);
        assert_eq!(c[0].1, vec![counts("A", 0, 0)]);
        assert_eq!(c[1].1, vec![counts("A", 1, 0), counts("B", 0, 0)]);
        assert_eq!(c[2].1, vec![counts("B", 0, 1)]);
        assert_eq!(c[3].1, vec![counts("A", 1, 1)]);
    }

    #[test]
    fn trace_examples() {
        let d = from_answers(&[(
            "s",
            vec![
                (&["A"][..], true),
                (&["A"][..], true),
                (&["A"][..], true),
                (&["A"][..], true),
                (&["A", "B"][..], false),
            ],
        )]);
        let p = params(&[("A", 0.0, 0.4, -0.2), ("B", 0.3, 0.1, -0.5)]);
        let t = pfa_trace(&d, &p).unwrap();
        assert_eq!(t[0].p_m, 0.5);
        assert!(t[3].p_m > t[2].p_m);
        let a = pfa_m(&[counts("A", 4, 0)], &p).unwrap();
        let b = pfa_m(&[counts("B", 0, 0)], &p).unwrap();
        assert!((t[4].m - (a + b)).abs() < 1e-15);
        for e in &t {
            assert!(e.p_m > 0.0 && e.p_m < 1.0);
            assert!(((e.p_m / (1.0 - e.p_m)).ln() - e.m).abs() < 1e-12);
        }
    }

    #[test]
    fn all_correct_separates() {
        let d = from_answers(&[
            ("a", vec![(&["A"][..], true); 5]),
            ("b", vec![(&["A"][..], true); 4]),
        ]);
        let f = fit_pfa(&d, &OptSpec::default()).unwrap();
        assert!(f.warnings.iter().any(|w| matches!(w, FitWarning::Separation { .. })));
        for e in pfa_trace(&d, &f.params).unwrap() {
            assert!(e.p_m > 0.999);
        }
    }

    /// Draws answers directly from the PFA model.
    fn generate(n_students: usize, per_student: usize, truth: &[(&str, f64, f64, f64)], seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut students = Vec::new();
        for s in 0..n_students {
            let id = format!("s{s}");
            let mut tally = vec![(0.0, 0.0); truth.len()];
            let mut events = Vec::new();
            for i in 0..per_student {
                let k = rng.random_range(0..truth.len());
                let (name, b, g, r) = truth[k];
                let m = b + g * tally[k].0 + r * tally[k].1;
                let ok = rng.random::<f64>() < 1.0 / (1.0 + (-m).exp());
                if ok {
                    tally[k].0 += 1.0;
                } else {
                    tally[k].1 += 1.0;
                }
                events.push(ev(&id, i, &[name], 20.0, ok));
            }
            students.push(events);
        }
        ds(students)
    }

    #[test]
    fn recovers_generating_weights() {
        let d = generate(2_000, 25, &[("A", -0.5, 0.2, -0.1)], 11);
        assert_eq!(d.n_events(), 50_000);
        let f = fit_pfa(&d, &OptSpec::default()).unwrap();
        assert!(f.grad_norm <= 1e-8);
        let w = f.params.skills[&sk("A")];
        assert!((w.beta - -0.5).abs() <= 0.05, "{w:?}");
        assert!((w.gamma - 0.2).abs() <= 0.05, "{w:?}");
        assert!((w.rho - -0.1).abs() <= 0.05, "{w:?}");

        let null = fit_pfa_easiness_only(&d, &OptSpec::default()).unwrap();
        assert!(f.log_likelihood >= null.log_likelihood);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = generate(60, 30, &[("A", -0.3, 0.15, -0.2), ("B", 0.4, 0.05, -0.05)], 5);
        let pd = PfaDesign::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..20 {
            let v: Vec<f64> = (0..pd.design.n_cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = pd.design.gradient(&v);
            let fd: Vec<f64> = (0..v.len())
                .map(|j| {
                    let mut up = v.clone();
                    let mut dn = v.clone();
                    up[j] += h;
                    dn[j] -= h;
                    (pd.design.log_likelihood(&up) - pd.design.log_likelihood(&dn)) / (2.0 * h)
                })
                .collect();
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn skill_relabeling_preserves_likelihood() {
        let d = generate(30, 20, &[("A", -0.3, 0.15, -0.2), ("B", 0.4, 0.05, -0.05)], 7);
        let p = params(&[("A", 0.2, 0.1, -0.3), ("B", -0.4, 0.25, 0.05)]);
        let ll = PfaDesign::new(&d).log_likelihood(&p).unwrap();

        let swap = |s: &SkillId| if s.as_str() == "A" { sk("B") } else { sk("A") };
        let relabeled = ds(d
            .students()
            .iter()
            .map(|s| {
                s.events
                    .iter()
                    .map(|e| {
                        let mut e = e.clone();
                        e.skills = e.skills.iter().map(swap).collect();
                        e
                    })
                    .collect()
            })
            .collect());
        let q = PfaParams {
            skills: p.skills.iter().map(|(k, w)| (swap(k), *w)).collect(),
        };
        let ll2 = PfaDesign::new(&relabeled).log_likelihood(&q).unwrap();
        assert!((ll - ll2).abs() < 1e-9 * ll.abs());
    }

    proptest! {
        #[test]
        fn monotone_in_counts(
            beta in -3.0f64..3.0,
            gamma in 0.01f64..1.0,
            rho in -1.0f64..-0.01,
            s in 0u32..20,
            f in 0u32..20,
        ) {
            let p = params(&[("A", beta, gamma, rho)]);
            let base: f64 = p_correct(pfa_m(&[counts("A", s, f)], &p).unwrap());
            let more_s: f64 = p_correct(pfa_m(&[counts("A", s + 1, f)], &p).unwrap());
            let more_f: f64 = p_correct(pfa_m(&[counts("A", s, f + 1)], &p).unwrap());
            prop_assert!(base > 0.0 && base < 1.0);
            prop_assert!(more_s > base);
            prop_assert!(more_f < base);
        }

        #[test]
        fn logit_round_trips(m in -30.0f64..30.0) {
            let p: f64 = p_correct(m);
            let q: f64 = p_correct(-m);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!((p + q - 1.0).abs() < 1e-15);
            prop_assert!((p.ln() - q.ln() - m).abs() < 1e-12 * (1.0 + m.abs()));
        }
    }
}
