//! Rank correlation, least squares with inference, and summaries of
//! carelessness estimates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::bkt::{KnowledgeTrace, SlipEstimate};
use crate::error::{Error, Result};
use crate::event_log::{Dataset, SkillId};
use crate::pfa::PfaEstimate;
use crate::scalar::Real;

/// Root mean squared difference.
pub fn rmse<T: Real>(pred: &[T], target: &[T]) -> T {
    assert_eq!(pred.len(), target.len(), "rmse inputs differ in length");
    if pred.is_empty() {
        return T::zero();
    }
    let ss: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    (ss / T::from_usize_lossy(pred.len())).sqrt()
}

pub fn mean<T: Real>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::from_usize_lossy(x.len())
}

/// Sample standard deviation; zero below two values.
pub fn sample_sd<T: Real>(x: &[T]) -> T {
    if x.len() < 2 {
        return T::zero();
    }
    let m = mean(x);
    let ss: T = x.iter().map(|&v| (v - m) * (v - m)).sum();
    (ss / T::from_usize_lossy(x.len() - 1)).sqrt()
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks<T: Real>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("ranks need non-NaN input"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = T::lit((i + 1 + j) as f64 / 2.0);
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
        syy = syy + (b - my) * (b - my);
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).max(-T::one()).min(T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult<T = f64> {
    pub rho: T,
    /// Two-sided.
    pub p_value: T,
    pub n: usize,
}

/// Below this sample size p-values come from the exact permutation
/// distribution.
pub const EXACT_P_BELOW: usize = 10;

pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<SpearmanResult<T>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("spearman needs at least 3 pairs, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry).ok_or(Error::ConstantInput)?;
    let p = if n < EXACT_P_BELOW {
        exact_p(&rx, &ry, rho)
    } else {
        t_p(rho.as_f64(), n)
    };
    Ok(SpearmanResult {
        rho,
        p_value: T::lit(p),
        n,
    })
}

fn t_p(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df positive");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Fraction of rank permutations at least as extreme as the observed one.
fn exact_p<T: Real>(rx: &[T], ry: &[T], rho: T) -> f64 {
    let observed = rho.as_f64().abs();
    let mut perm: Vec<T> = ry.to_vec();
    let mut extreme = 0u64;
    let mut total = 0u64;
    heap_permutations(&mut perm, &mut |p| {
        total += 1;
        let r = pearson(rx, p).map_or(0.0, |v| v.as_f64().abs());
        if r >= observed - 1e-12 {
            extreme += 1;
        }
    });
    extreme as f64 / total as f64
}

fn heap_permutations<T: Copy>(v: &mut [T], visit: &mut impl FnMut(&[T])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    visit(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            visit(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsResult {
    /// Intercept first, then one per predictor.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
    pub df_model: usize,
    pub df_resid: usize,
    pub n: usize,
    pub residuals: Vec<f64>,
}

/// Least squares of `y` on an intercept plus the given predictor columns.
pub fn ols(y: &[f64], predictors: &[&[f64]]) -> Result<OlsResult> {
    let n = y.len();
    let p = predictors.len();
    if predictors.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("predictor length differs from response".into()));
    }
    if n <= p + 1 {
        return Err(Error::InvalidInput(format!("{n} observations for {p} predictors plus intercept")));
    }
    if y.iter().chain(predictors.iter().flat_map(|c| c.iter())).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    let k = p + 1;
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { predictors[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let inv = invert_spd(&xtx).ok_or(Error::RankDeficient)?;
    let b = &inv * (x.transpose() * &yv);
    let fitted = &x * &b;
    let residuals: Vec<f64> = yv.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let my = mean(y);
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if tss <= 0.0 {
        return Err(Error::ConstantInput);
    }
    let df_resid = n - k;
    let sigma2 = rss / df_resid as f64;
    let r_squared = (1.0 - rss / tss).clamp(0.0, 1.0);
    let t_dist = StudentsT::new(0.0, 1.0, df_resid as f64).expect("df positive");

    let mut std_errors = Vec::with_capacity(k);
    let mut t_stats = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for j in 0..k {
        let se = (sigma2 * inv[(j, j)]).max(0.0).sqrt();
        let t = if se > 0.0 {
            b[j] / se
        } else if b[j] == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(b[j])
        };
        std_errors.push(se);
        t_stats.push(t);
        p_values.push((2.0 * t_dist.sf(t.abs())).min(1.0));
    }
    let (f_statistic, f_p_value) = if p == 0 {
        (0.0, 1.0)
    } else if rss <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ((tss - rss) / p as f64) / sigma2;
        let dist = FisherSnedecor::new(p as f64, df_resid as f64).expect("df positive");
        (f, dist.sf(f))
    };
    Ok(OlsResult {
        coefficients: b.iter().copied().collect(),
        std_errors,
        t_stats,
        p_values,
        r_squared,
        f_statistic,
        f_p_value,
        df_model: p,
        df_resid,
        n,
        residuals,
    })
}

/// Inverse of a symmetric positive definite matrix, rejecting numerically
/// singular ones.
fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let diag_max = m.diagonal().iter().cloned().fold(0.0, f64::max);
    let ch = m.clone().cholesky()?;
    let l = ch.l();
    let min_pivot = l.diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if min_pivot <= diag_max * 1e-12 {
        return None;
    }
    Some(ch.inverse())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Counts over 20 equal-width bins on [0, 1]; the last bin includes 1.
    pub histogram: Vec<usize>,
    /// Fraction in [0, 0.1] or [0.9, 1].
    pub tail_mass: f64,
    /// Fraction in [0.4, 0.6].
    pub mid_mass: f64,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn summarize_distribution(values: &[f64]) -> DistributionSummary {
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let mut tail = 0usize;
    let mut mid = 0usize;
    for &v in values {
        let b = ((v * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
        histogram[b as usize] += 1;
        if v <= 0.1 || v >= 0.9 {
            tail += 1;
        }
        if (0.4..=0.6).contains(&v) {
            mid += 1;
        }
    }
    let n = values.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    DistributionSummary {
        n,
        mean: if n == 0 { 0.0 } else { mean(values) },
        sd: sample_sd(values),
        histogram,
        tail_mass: frac(tail),
        mid_mass: frac(mid),
    }
}

/// Per-student mean of estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentMeans {
    /// `(student index, mean, number of estimates)` in dataset order.
    pub included: Vec<(usize, f64, usize)>,
    /// Ids of students without any estimate.
    pub excluded: Vec<String>,
}

impl StudentMeans {
    pub fn get(&self, student: usize) -> Option<f64> {
        self.included
            .binary_search_by_key(&student, |e| e.0)
            .ok()
            .map(|i| self.included[i].1)
    }
}

pub fn student_level_carelessness(estimates: &[SlipEstimate], d: &Dataset) -> StudentMeans {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for e in estimates {
        let a = acc.entry(e.event.student).or_default();
        a.0 += e.probability;
        a.1 += 1;
    }
    let excluded = d
        .students()
        .iter()
        .enumerate()
        .filter(|(i, _)| !acc.contains_key(i))
        .map(|(_, s)| s.student_id.clone())
        .collect();
    StudentMeans {
        included: acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64, n)).collect(),
        excluded,
    }
}

/// Knowledge estimate read off the last opportunity of each skill.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalKnowledgeAt {
    /// P(known) entering the last opportunity.
    #[default]
    Prior,
    /// P(known) after the last observation and transition.
    Posterior,
}

/// Per student: mean over practiced skills of the BKT estimate at the last
/// opportunity. `None` for students without events.
pub fn final_knowledge_bkt(traces: &KnowledgeTrace, at: FinalKnowledgeAt) -> Vec<Option<f64>> {
    traces
        .students
        .iter()
        .map(|per_skill| {
            let last: Vec<f64> = per_skill
                .values()
                .filter_map(|steps| steps.last())
                .map(|s| match at {
                    FinalKnowledgeAt::Prior => s.prior,
                    FinalKnowledgeAt::Posterior => s.posterior,
                })
                .collect();
            (!last.is_empty()).then(|| mean(&last))
        })
        .collect()
}

/// Per student: mean over practiced skills of p(m) at the last event
/// tagged with each skill. `estimates` must be in dataset order.
pub fn final_knowledge_pfa(d: &Dataset, estimates: &[PfaEstimate]) -> Vec<Option<f64>> {
    let mut last: Vec<BTreeMap<&SkillId, f64>> = vec![BTreeMap::new(); d.students().len()];
    for e in estimates {
        for c in &e.counts {
            last[e.event.student].insert(&c.skill, e.p_m);
        }
    }
    last.into_iter()
        .map(|m| {
            let v: Vec<f64> = m.into_values().collect();
            (!v.is_empty()).then(|| mean(&v))
        })
        .collect()
}
