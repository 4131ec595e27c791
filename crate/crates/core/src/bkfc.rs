//! Behavioral carelessness model: logistic regression of correctness on the
//! PFA performance estimate plus encoded behavioral features. The feature
//! part of the linear predictor (omega) is negated and mapped through the
//! standard normal CDF to score incorrect answers.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkt::{DetectorKind, SlipEstimate};
use crate::error::{Error, Result};
use crate::event_log::{Dataset, EventRef};
use crate::features::{default_manifest_hash, manifest_hash, FeatureMatrix, FEATURE_COLUMNS, N_ENCODED};
use crate::logistic::{self, Design, FitWarning, OptSpec};
use crate::pfa::PfaEstimate;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BkfcModel {
    /// Intercept; absent for coefficient sets that only support omega.
    pub beta0: Option<f64>,
    /// Weight on the PFA performance estimate.
    pub beta1: Option<f64>,
    pub columns: Vec<String>,
    pub omega_betas: Vec<f64>,
    pub manifest_hash: String,
}

impl BkfcModel {
    /// Dot product of the behavioral coefficients with an encoded row.
    pub fn omega(&self, encoded: &[f64], manifest: &str) -> Result<f64> {
        if manifest != self.manifest_hash {
            return Err(Error::ManifestMismatch {
                expected: self.manifest_hash.clone(),
                found: manifest.to_string(),
            });
        }
        if encoded.len() != self.omega_betas.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} features, model has {}",
                encoded.len(),
                self.omega_betas.len()
            )));
        }
        Ok(self.omega_betas.iter().zip(encoded).map(|(b, x)| b * x).sum())
    }

    /// Predicted probability of a correct answer, when the intercept and
    /// knowledge weight are known.
    pub fn predict_correct(&self, p_m: f64, encoded: &[f64], manifest: &str) -> Result<Option<f64>> {
        let w = self.omega(encoded, manifest)?;
        Ok(match (self.beta0, self.beta1) {
            (Some(b0), Some(b1)) => Some(logistic::sigmoid(b0 + b1 * p_m + w)),
            _ => None,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientFile {
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    columns: Vec<String>,
    omega_betas: Vec<f64>,
    #[serde(default)]
    #[allow(dead_code)]
    below_reporting_precision: Vec<String>,
    beta0: Option<f64>,
    beta1: Option<f64>,
}

const PUBLISHED: &str = include_str!("../data/table1_coefficients.json");

/// Parses a coefficient file; it must list exactly the encoded feature
/// columns in order.
pub fn parse_coefficients(json: &str) -> Result<BkfcModel> {
    let f: CoefficientFile = serde_json::from_str(json).map_err(|e| Error::SchemaError(e.to_string()))?;
    if f.omega_betas.len() != N_ENCODED {
        return Err(Error::SchemaError(format!(
            "expected {N_ENCODED} coefficients, found {}",
            f.omega_betas.len()
        )));
    }
    if f.columns.len() != N_ENCODED || f.columns.iter().zip(FEATURE_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::SchemaError("columns do not match the feature manifest".into()));
    }
    if f.omega_betas.iter().chain(&f.beta0).chain(&f.beta1).any(|v| !v.is_finite()) {
        return Err(Error::SchemaError("non-finite coefficient".into()));
    }
    let cols: Vec<&str> = f.columns.iter().map(String::as_str).collect();
    Ok(BkfcModel {
        beta0: f.beta0,
        beta1: f.beta1,
        manifest_hash: manifest_hash(&cols),
        columns: f.columns,
        omega_betas: f.omega_betas,
    })
}

pub fn load_published_model(path: &Path) -> Result<BkfcModel> {
    parse_coefficients(&std::fs::read_to_string(path)?)
}

/// The shipped published coefficient set.
pub fn published_model() -> BkfcModel {
    parse_coefficients(PUBLISHED).expect("shipped fixture is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BkfcFit {
    pub model: BkfcModel,
    pub log_likelihood: f64,
    /// Log-likelihood of the intercept plus knowledge-weight model.
    pub knowledge_only_log_likelihood: f64,
    /// Constant feature columns left out of the fit (coefficient 0).
    pub dropped_columns: Vec<String>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
}

/// Fits over all first attempts. `pfa` and `x` must both be in dataset
/// order.
pub fn fit_bkfc(d: &Dataset, pfa: &[PfaEstimate], x: &FeatureMatrix, opt: &OptSpec) -> Result<BkfcFit> {
    x.check_manifest(&default_manifest_hash())?;
    if pfa.len() != d.n_events() || x.len() != d.n_events() {
        return Err(Error::InvalidInput(format!(
            "{} events, {} performance estimates, {} feature rows",
            d.n_events(),
            pfa.len(),
            x.len()
        )));
    }
    if pfa.iter().zip(&x.events).any(|(p, r)| p.event != *r) {
        return Err(Error::InvalidInput("performance estimates and features are not aligned".into()));
    }
    let y: Vec<bool> = x.events.iter().map(|r| d.event(*r).correct).collect();
    let active: Vec<usize> = (0..N_ENCODED)
        .filter(|&j| x.rows.iter().any(|r| r[j] != x.rows[0][j]))
        .collect();
    let dropped_columns = (0..N_ENCODED)
        .filter(|j| !active.contains(j))
        .map(|j| FEATURE_COLUMNS[j].to_string())
        .collect();

    let width = 2 + active.len();
    let mut full = Vec::with_capacity(width * y.len());
    let mut knowledge = Vec::with_capacity(2 * y.len());
    for (p, row) in pfa.iter().zip(&x.rows) {
        full.extend([1.0, p.p_m]);
        full.extend(active.iter().map(|&j| row[j]));
        knowledge.extend([1.0, p.p_m]);
    }
    let f = logistic::fit(&Design::new(full, width, y.clone())?, opt)?;
    let k = logistic::fit(&Design::new(knowledge, 2, y)?, opt)?;

    let mut omega_betas = vec![0.0; N_ENCODED];
    for (slot, &j) in active.iter().enumerate() {
        omega_betas[j] = f.coefficients[2 + slot];
    }
    Ok(BkfcFit {
        model: BkfcModel {
            beta0: Some(f.coefficients[0]),
            beta1: Some(f.coefficients[1]),
            columns: x.columns.clone(),
            omega_betas,
            manifest_hash: x.manifest_hash.clone(),
        },
        log_likelihood: f.log_likelihood,
        knowledge_only_log_likelihood: k.log_likelihood,
        dropped_columns,
        grad_norm: f.grad_norm,
        iterations: f.iterations,
        warnings: f.warnings,
    })
}

/// How negated omega becomes a probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMode {
    /// `Phi(-omega)`.
    #[default]
    Raw,
    /// `Phi((-omega - mean) / sd)` over the scored set.
    Standardized,
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5 * statrs::function::erf::erfc(-x.as_f64() / std::f64::consts::SQRT_2))
}

/// Carelessness probabilities for a set of omegas of incorrect answers.
pub fn carelessness_from_omega<T: Real>(omegas: &[T], mode: CdfMode) -> Result<Vec<T>> {
    match mode {
        CdfMode::Raw => Ok(omegas.iter().map(|&w| normal_cdf(-w)).collect()),
        CdfMode::Standardized => {
            let n = omegas.len();
            if n < 2 {
                return Err(Error::ZeroVariance);
            }
            let nf = T::from_usize_lossy(n);
            let mean = omegas.iter().map(|&w| -w).sum::<T>() / nf;
            let var = omegas.iter().map(|&w| (-w - mean).powi(2)).sum::<T>() / (nf - T::one());
            let sd = var.sqrt();
            if !(sd > T::zero()) {
                return Err(Error::ZeroVariance);
            }
            Ok(omegas.iter().map(|&w| normal_cdf((-w - mean) / sd)).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarelessnessEstimate {
    pub event: EventRef,
    pub omega: f64,
    pub probability: f64,
}

impl CarelessnessEstimate {
    pub fn to_slip_estimate(&self) -> SlipEstimate {
        SlipEstimate {
            event: self.event,
            probability: self.probability,
            model: DetectorKind::Bkfc,
        }
    }
}

/// Scores every incorrect event in dataset order.
pub fn score_incorrect(d: &Dataset, x: &FeatureMatrix, model: &BkfcModel, mode: CdfMode) -> Result<Vec<CarelessnessEstimate>> {
    let picked: Vec<usize> = (0..x.len()).filter(|&i| !d.event(x.events[i]).correct).collect();
    let omegas = picked
        .par_iter()
        .map(|&i| model.omega(&x.rows[i], &x.manifest_hash))
        .collect::<Result<Vec<f64>>>()?;
    let probs = carelessness_from_omega(&omegas, mode)?;
    Ok(picked
        .iter()
        .zip(omegas.into_iter().zip(probs))
        .map(|(&i, (omega, probability))| CarelessnessEstimate {
            event: x.events[i],
            omega,
            probability,
        })
        .collect())
}
