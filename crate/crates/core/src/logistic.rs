//! Maximum-likelihood logistic regression by damped Newton ascent.
//!
//! Row sums are accumulated in fixed-size chunks and combined in chunk
//! order, so results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

const CHUNK: usize = 2048;

/// Convergence contract shared by the logistic fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptSpec {
    /// Euclidean norm of the log-likelihood gradient at which to stop.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest admissible coefficient magnitude; reaching it signals
    /// separation.
    pub cap: f64,
}

impl Default for OptSpec {
    fn default() -> Self {
        OptSpec {
            tol: 1e-8,
            max_iter: 500,
            cap: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitWarning {
    /// Coefficients hit the magnitude cap; the data are (quasi-)separable.
    Separation { coefficient: usize },
    /// Cross-product of the column-scaled design is ill-conditioned; a ridge
    /// jitter was added to the Newton system.
    Collinearity { condition_number: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
}

impl LogisticFit {
    pub fn separated(&self) -> bool {
        self.warnings.iter().any(|w| matches!(w, FitWarning::Separation { .. }))
    }
}

/// Logistic function 1 / (1 + e^-m).
#[inline]
pub fn sigmoid<T: Real>(m: T) -> T {
    if m >= T::zero() {
        T::one() / (T::one() + (-m).exp())
    } else {
        let e = m.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of one observation at logit `m`.
#[inline]
pub fn log_lik_term(m: f64, y: bool) -> f64 {
    if y {
        -softplus(-m)
    } else {
        -softplus(m)
    }
}

/// Row-major design with binary response.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub x: Vec<f64>,
    pub n_cols: usize,
    pub y: Vec<bool>,
}

impl Design {
    pub fn new(x: Vec<f64>, n_cols: usize, y: Vec<bool>) -> Result<Self> {
        if n_cols == 0 || x.len() != n_cols * y.len() {
            return Err(Error::InvalidInput(format!(
                "design has {} values for {} rows x {} columns",
                x.len(),
                y.len(),
                n_cols
            )));
        }
        Ok(Design { x, n_cols, y })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_cols..(i + 1) * self.n_cols]
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        (0..self.n_rows())
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(self.n_rows())))
            .collect()
    }

    fn logit(&self, i: usize, theta: &[f64]) -> f64 {
        self.row(i).iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.chunks()
            .par_iter()
            .map(|&(a, b)| (a..b).map(|i| log_lik_term(self.logit(i, theta), self.y[i])).sum::<f64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum()
    }

    /// Gradient of the log-likelihood, `X^T (y - p)`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.gradient_hessian(theta, false).0
    }

    fn gradient_hessian(&self, theta: &[f64], with_hessian: bool) -> (Vec<f64>, Vec<f64>) {
        let k = self.n_cols;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = self
            .chunks()
            .par_iter()
            .map(|&(a, b)| {
                let mut g = vec![0.0; k];
                let mut h = if with_hessian { vec![0.0; k * k] } else { Vec::new() };
                for i in a..b {
                    let row = self.row(i);
                    let p = sigmoid(self.logit(i, theta));
                    let r = if self.y[i] { 1.0 } else { 0.0 } - p;
                    for (gj, xj) in g.iter_mut().zip(row) {
                        *gj += xj * r;
                    }
                    if with_hessian {
                        let w = p * (1.0 - p);
                        for j in 0..k {
                            let wx = w * row[j];
                            if wx == 0.0 {
                                continue;
                            }
                            for l in j..k {
                                h[j * k + l] += wx * row[l];
                            }
                        }
                    }
                }
                (g, h)
            })
            .collect();
        let mut g = vec![0.0; k];
        let mut h = if with_hessian { vec![0.0; k * k] } else { Vec::new() };
        for (pg, ph) in parts {
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
            for (a, b) in h.iter_mut().zip(ph) {
                *a += b;
            }
        }
        if with_hessian {
            for j in 0..k {
                for l in 0..j {
                    h[j * k + l] = h[l * k + j];
                }
            }
        }
        (g, h)
    }

    /// Largest `|y - p|` over all rows.
    pub fn max_residual(&self, theta: &[f64]) -> f64 {
        (0..self.n_rows())
            .map(|i| {
                let p = sigmoid(self.logit(i, theta));
                if self.y[i] { 1.0 - p } else { p }
            })
            .fold(0.0, f64::max)
    }

    /// Condition number of `X^T X`.
    pub fn cross_product_condition(&self) -> f64 {
        let k = self.n_cols;
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        for i in 0..self.n_rows() {
            let row = self.row(i);
            for j in 0..k {
                for l in 0..k {
                    xtx[(j, l)] += row[j] * row[l];
                }
            }
        }
        let eig = SymmetricEigen::new(xtx).eigenvalues;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Threshold on the condition number of the scaled cross-product above
/// which the Newton system is ridge-jittered.
pub const COLLINEARITY_THRESHOLD: f64 = 1e10;
pub const RIDGE_JITTER: f64 = 1e-8;
/// A converged fit whose every fitted probability is within this distance
/// of its label is reported as separated.
pub const SEPARATION_RESIDUAL: f64 = 1e-6;

/// Fits by Newton ascent from zero. Columns are internally rescaled to unit
/// root-mean-square; coefficients are reported on the original scale.
pub fn fit(design: &Design, opt: &OptSpec) -> Result<LogisticFit> {
    let k = design.n_cols;
    let n = design.n_rows();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let ms = (0..n).map(|i| design.row(i)[j].powi(2)).sum::<f64>() / n as f64;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = Design {
        x: design
            .x
            .chunks(k)
            .flat_map(|row| row.iter().zip(&scale).map(|(v, s)| v / s))
            .collect(),
        n_cols: k,
        y: design.y.clone(),
    };

    let mut warnings = Vec::new();
    let cond = scaled.cross_product_condition();
    let mut jitter = 0.0;
    if !(cond <= COLLINEARITY_THRESHOLD) {
        warnings.push(FitWarning::Collinearity {
            condition_number: cond,
        });
        jitter = RIDGE_JITTER;
    }

    let mut theta = vec![0.0; k];
    let mut ll = scaled.log_likelihood(&theta);
    let mut iterations = 0;
    let to_original = |t: &[f64]| -> Vec<f64> { t.iter().zip(&scale).map(|(c, s)| c / s).collect() };

    loop {
        let (g, h) = scaled.gradient_hessian(&theta, true);
        let gn = norm(&g);
        if gn <= opt.tol {
            if scaled.max_residual(&theta) < SEPARATION_RESIDUAL {
                let j = (0..k)
                    .max_by(|&a, &b| (theta[a] / scale[a]).abs().total_cmp(&(theta[b] / scale[b]).abs()))
                    .unwrap_or(0);
                warnings.push(FitWarning::Separation { coefficient: j });
            }
            return Ok(LogisticFit {
                coefficients: to_original(&theta),
                log_likelihood: ll,
                grad_norm: gn,
                iterations,
                warnings,
            });
        }
        if iterations >= opt.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gn,
            });
        }
        iterations += 1;

        let step = newton_direction(&h, &g, k, jitter);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let cll = scaled.log_likelihood(&cand);
            if cll >= ll - 1e-13 * (1.0 + ll.abs()) {
                accepted = Some((cand, cll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cll)) = accepted else {
            // No ascent possible at machine precision.
            return Ok(LogisticFit {
                coefficients: to_original(&theta),
                log_likelihood: ll,
                grad_norm: gn,
                iterations,
                warnings,
            });
        };
        theta = cand;
        ll = cll;

        let original = to_original(&theta);
        if let Some(j) = original.iter().position(|c| c.abs() >= opt.cap) {
            for (c, s) in theta.iter_mut().zip(&scale) {
                *c = (*c / s).clamp(-opt.cap, opt.cap) * s;
            }
            ll = scaled.log_likelihood(&theta);
            let (g, _) = scaled.gradient_hessian(&theta, false);
            warnings.push(FitWarning::Separation { coefficient: j });
            return Ok(LogisticFit {
                coefficients: to_original(&theta),
                log_likelihood: ll,
                grad_norm: norm(&g),
                iterations,
                warnings,
            });
        }
    }
}

/// Solves `(H + jitter I) d = g`, escalating the jitter if `H` is singular.
fn newton_direction(h: &[f64], g: &[f64], k: usize, jitter: f64) -> Vec<f64> {
    let base = DMatrix::from_row_slice(k, k, h);
    let rhs = DVector::from_column_slice(g);
    let mut lambda = jitter;
    loop {
        let m = &base + DMatrix::<f64>::identity(k, k) * lambda;
        if let Some(ch) = m.cholesky() {
            return ch.solve(&rhs).iter().cloned().collect();
        }
        lambda = if lambda == 0.0 { RIDGE_JITTER } else { lambda * 10.0 };
        if lambda > 1e6 {
            // Degenerate curvature: fall back to gradient ascent.
            return g.to_vec();
        }
    }
}
