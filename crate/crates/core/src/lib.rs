//! Careless-error detection for learning interaction logs: knowledge
//! tracing, contextual slip, feature-based carelessness, a slip ensemble,
//! a learner simulator and the statistics used to compare them.

pub mod bkfc;
pub mod bkt;
pub mod error;
pub mod event_log;
pub mod features;
pub mod logistic;
pub mod ml;
pub mod pfa;
pub mod pipeline;
pub mod scalar;
pub mod sim;
pub mod stats;

#[cfg(test)]
mod test_support;

pub use scalar::Real;

pub type BktParams = bkt::BktParams<f64>;
pub type PfaParams = pfa::PfaParams<f64>;
pub type SkillWeights = pfa::SkillWeights<f64>;
pub type SpearmanResult = stats::SpearmanResult<f64>;

pub type BktParamsF32 = bkt::BktParams<f32>;
pub type PfaParamsF32 = pfa::PfaParams<f32>;
pub type SkillWeightsF32 = pfa::SkillWeights<f32>;
pub type SpearmanResultF32 = stats::SpearmanResult<f32>;
