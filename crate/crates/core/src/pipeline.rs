//! End-to-end stages: simulate, fit, detect, compare. Each stage reads and
//! writes artifacts in one output directory; every artifact records the
//! configuration hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bkfc::{self, BkfcFit, BkfcModel, CdfMode};
use crate::bkt::{self, BktFit, BktParams, DetectorKind, GridSpec, KnowledgeTrace, SlipEstimate, SlipPrior};
use crate::error::{Error, Result};
use crate::event_log::{self, Dataset, EventRef, LogSchema, ParseWarning, SkillId};
use crate::features::{self, FeatureMatrix, ZScoreMode};
use crate::logistic::OptSpec;
use crate::ml::{self, CvReport, EnsembleModel, ForestConfig};
use crate::pfa::{self, PfaFit, PfaParams};
use crate::sim::{self, EventFlags, GroundTruth, SimConfig};
use crate::stats::{self, DistributionSummary, FinalKnowledgeAt, OlsResult, SpearmanResult, StudentMeans};

pub const EVENTS_FILE: &str = "events.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const STUDENT_TRUTH_FILE: &str = "student_truth.csv";
pub const SIM_CONFIG_FILE: &str = "sim_config.json";
pub const BKT_FILE: &str = "bkt_params.json";
pub const PFA_FILE: &str = "pfa_params.json";
pub const BKFC_FILE: &str = "bkfc_model.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const CV_FILE: &str = "cv_report.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "report.txt";

pub fn estimates_file(kind: DetectorKind) -> String {
    format!("estimates_{}.csv", kind.as_str())
}

/// Input and output locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Interaction log; defaults to the simulated `events.csv` in `out`.
    pub log: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub student_truth: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            log: None,
            scores: None,
            ground_truth: None,
            student_truth: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Overrides applied on top of the built-in simulator preset, or a full
/// simulator configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    /// JSON file holding a complete simulator configuration.
    pub config_file: Option<PathBuf>,
    pub n_students: Option<usize>,
    pub careless_rate: Option<f64>,
    pub careless_rate_concentration: Option<f64>,
    pub careless_speed_factor: Option<f64>,
    pub careless_error_prob: Option<f64>,
    pub knowledge_gated: Option<bool>,
    pub no_learning_when_careless: Option<bool>,
    pub gaming_rate: Option<f64>,
    pub gaming_rate_concentration: Option<f64>,
    pub gaming_speed_factor: Option<f64>,
    pub posttest_noise_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub detectors: Vec<DetectorKind>,
    pub grid: GridSpec,
    pub pfa: OptSpec,
    pub bkfc: OptSpec,
    pub forest: ForestSection,
    pub cv_folds: usize,
    pub cdf_mode: CdfMode,
    pub slip_prior: SlipPrior,
    pub z_mode: ZScoreMode,
    pub final_knowledge: FinalKnowledgeAt,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            detectors: DetectorKind::ALL.to_vec(),
            grid: GridSpec::default(),
            pfa: OptSpec::default(),
            bkfc: OptSpec::default(),
            forest: ForestSection::default(),
            cv_folds: 5,
            cdf_mode: CdfMode::default(),
            slip_prior: SlipPrior::default(),
            z_mode: ZScoreMode::default(),
            final_knowledge: FinalKnowledgeAt::default(),
        }
    }
}

/// Ensemble settings; the bootstrap seed is the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestSection {
    fn default() -> Self {
        let f = ForestConfig::default();
        ForestSection {
            n_trees: f.n_trees,
            min_leaf: f.min_leaf,
            bootstrap: f.bootstrap,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub schema: LogSchema,
    pub model: ModelConfig,
    pub sim: SimSection,
}

impl RunConfig {
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::InvalidConfig("a seed is required (config `seed`, --seed or CARELESS_SEED)".into()))
    }

    /// Short hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    pub fn forest(&self) -> Result<ForestConfig> {
        Ok(ForestConfig {
            n_trees: self.model.forest.n_trees,
            min_leaf: self.model.forest.min_leaf,
            bootstrap: self.model.forest.bootstrap,
            seed: self.require_seed()?,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let seed = self.require_seed()?;
        let mut c = match &self.sim.config_file {
            Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?,
            None => SimConfig::default_with_seed(seed),
        };
        c.seed = seed;
        let s = &self.sim;
        if let Some(v) = s.n_students {
            c.n_students = v;
        }
        if let Some(v) = s.careless_rate {
            c.careless_rate = v;
        }
        if let Some(v) = s.careless_rate_concentration {
            c.careless_rate_concentration = Some(v);
        }
        if let Some(v) = s.careless_speed_factor {
            c.careless_speed_factor = v;
        }
        if let Some(v) = s.careless_error_prob {
            c.careless_error_prob = v;
        }
        if let Some(v) = s.knowledge_gated {
            c.knowledge_gated = v;
        }
        if let Some(v) = s.no_learning_when_careless {
            c.no_learning_when_careless = v;
        }
        if let Some(v) = s.gaming_rate {
            c.gaming_rate = v;
        }
        if let Some(v) = s.gaming_rate_concentration {
            c.gaming_rate_concentration = Some(v);
        }
        if let Some(v) = s.gaming_speed_factor {
            c.gaming_speed_factor = v;
        }
        if let Some(v) = s.posttest_noise_sd {
            c.posttest_noise_sd = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn wants(&self, kind: DetectorKind) -> bool {
        self.model.detectors.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.detectors.is_empty() {
            return Err(Error::InvalidConfig("no detectors selected".into()));
        }
        if self.wants(DetectorKind::MlContextual) && !self.wants(DetectorKind::BktContextual) {
            return Err(Error::InvalidConfig("ml_contextual is trained on bkt_contextual labels; select both".into()));
        }
        if self.model.cv_folds < 2 {
            return Err(Error::InvalidConfig("cv_folds must be at least 2".into()));
        }
        if self.model.forest.n_trees == 0 || self.model.forest.min_leaf == 0 {
            return Err(Error::InvalidConfig("forest needs n_trees >= 1 and min_leaf >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![("config_hash".to_string(), self.config_hash.clone())];
        if let Some(s) = self.seed {
            v.push(("seed".into(), s.to_string()));
        }
        v
    }
}

/// JSON artifact body with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    pub content: T,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn write_json<T: Serialize>(path: &Path, prov: &Provenance, content: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Artifact {
        provenance: prov.clone(),
        content,
    })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let a: Artifact<T> = serde_json::from_slice(&read(path)?)?;
    Ok(a.content)
}

fn write_with<F: FnOnce(&mut Vec<u8>) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Fitted models and their diagnostics.
#[derive(Clone, Debug)]
pub struct Models {
    pub bkt: Option<BTreeMap<SkillId, BktFit>>,
    pub pfa: PfaFit,
    pub bkfc: BkfcFit,
    pub ensemble: Option<EnsembleModel>,
    pub cv: Option<CvReport>,
    pub features: FeatureMatrix,
}

pub fn bkt_params(fits: &BTreeMap<SkillId, BktFit>) -> BTreeMap<SkillId, BktParams> {
    fits.iter().map(|(k, f)| (k.clone(), f.params)).collect()
}

/// Fits every selected model on one dataset.
pub fn fit_models(d: &Dataset, cfg: &RunConfig) -> Result<Models> {
    cfg.validate()?;
    let m = &cfg.model;
    let x = features::extract_features(d, m.z_mode);
    let pfa_fit = pfa::fit_pfa(d, &m.pfa)?;
    let trace = pfa::pfa_trace(d, &pfa_fit.params)?;
    let bkfc_fit = bkfc::fit_bkfc(d, &trace, &x, &m.bkfc)?;

    let (bkt_fits, ensemble, cv) = if cfg.wants(DetectorKind::BktContextual) {
        let fits = bkt::fit_all(d, &m.grid)?;
        if cfg.wants(DetectorKind::MlContextual) {
            let params = bkt_params(&fits);
            let traces = bkt::trace_knowledge(d, &params)?;
            let labels = bkt::contextual_slip(d, &traces, &params, m.slip_prior)?;
            let set = ml::slip_training_set(&x, &labels)?;
            let forest = cfg.forest()?;
            let cv = ml::crossvalidate(d, &set, &x.manifest_hash, m.cv_folds, &forest)?;
            let model = ml::train_ensemble(&set.rows, &set.targets, &x.manifest_hash, &forest)?;
            (Some(fits), Some(model), Some(cv))
        } else {
            (Some(fits), None, None)
        }
    } else {
        (None, None, None)
    };
    Ok(Models {
        bkt: bkt_fits,
        pfa: pfa_fit,
        bkfc: bkfc_fit,
        ensemble,
        cv,
        features: x,
    })
}

/// Estimates per detector, each in dataset order.
pub type Estimates = BTreeMap<DetectorKind, Vec<SlipEstimate>>;

/// Models needed for detection.
#[derive(Clone, Debug)]
pub struct DetectorModels {
    pub bkt: Option<BTreeMap<SkillId, BktParams>>,
    pub bkfc: BkfcModel,
    pub ensemble: Option<EnsembleModel>,
}

impl From<&Models> for DetectorModels {
    fn from(m: &Models) -> Self {
        DetectorModels {
            bkt: m.bkt.as_ref().map(bkt_params),
            bkfc: m.bkfc.model.clone(),
            ensemble: m.ensemble.clone(),
        }
    }
}

pub fn detect(d: &Dataset, models: &DetectorModels, cfg: &RunConfig) -> Result<Estimates> {
    let x = features::extract_features(d, cfg.model.z_mode);
    let mut out = Estimates::new();
    if cfg.wants(DetectorKind::BktContextual) {
        let params = models
            .bkt
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(BKT_FILE.into()))?;
        let traces = bkt::trace_knowledge(d, params)?;
        out.insert(
            DetectorKind::BktContextual,
            bkt::contextual_slip(d, &traces, params, cfg.model.slip_prior)?,
        );
    }
    if cfg.wants(DetectorKind::MlContextual) {
        let model = models
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(ENSEMBLE_FILE.into()))?;
        out.insert(DetectorKind::MlContextual, ml::score_incorrect(d, &x, model)?);
    }
    if cfg.wants(DetectorKind::Bkfc) {
        let scores = bkfc::score_incorrect(d, &x, &models.bkfc, cfg.model.cdf_mode)?;
        out.insert(
            DetectorKind::Bkfc,
            scores.iter().map(|s| s.to_slip_estimate()).collect(),
        );
    }
    Ok(out)
}

/// Ground truth as read from the simulator's CSV output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TruthTables {
    pub events: EventFlags,
    pub careless_rate: BTreeMap<String, f64>,
}

impl TruthTables {
    pub fn from_ground_truth(d: &Dataset, t: &GroundTruth) -> Self {
        TruthTables {
            events: d
                .events()
                .map(|(r, e)| ((e.student_id.clone(), e.seq_index), t.event(r).clone()))
                .collect(),
            careless_rate: t
                .students
                .iter()
                .map(|s| (s.student_id.clone(), s.careless_rate))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: DetectorKind,
    pub b: DetectorKind,
    pub result: Option<SpearmanResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRegression {
    pub outcome: String,
    pub model: DetectorKind,
    /// Predictor names aligned with the coefficient vectors.
    pub terms: Vec<String>,
    pub result: Option<OlsResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCorrelation {
    pub measure: String,
    pub model: DetectorKind,
    pub result: Option<SpearmanResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBlock {
    pub model: DetectorKind,
    /// Incorrect events the detector could score.
    pub n_scored: usize,
    pub n_students: usize,
    pub excluded_students: usize,
    pub distribution: DistributionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBlock {
    pub model: DetectorKind,
    /// Mean estimate on careless errors made while every skill was known.
    pub mean_on_careless_known: Option<f64>,
    /// Mean estimate on errors made while some skill was unknown.
    pub mean_on_unknown: Option<f64>,
    pub separation: Option<f64>,
    /// Student-level estimate vs simulated careless rate.
    pub rate_correlation: Option<SpearmanResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_students: usize,
    pub n_events: usize,
    pub n_incorrect: usize,
    /// Incorrect events followed by two same-skill answers; `None` for
    /// multi-skill data.
    pub n_slip_estimable: Option<usize>,
    pub models: Vec<ModelBlock>,
    pub correlations: Vec<PairCorrelation>,
    pub learning: Vec<LearningRegression>,
    pub external: Vec<ExternalCorrelation>,
    pub cross_validation: Option<CvSummary>,
    pub ground_truth: Vec<TruthBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub k: usize,
    pub per_fold_rmse: Vec<f64>,
    pub pooled_rmse: f64,
    pub baseline_rmse: f64,
}

impl From<&CvReport> for CvSummary {
    fn from(c: &CvReport) -> Self {
        CvSummary {
            k: c.k,
            per_fold_rmse: c.per_fold_rmse.clone(),
            pooled_rmse: c.pooled_rmse,
            baseline_rmse: c.baseline_rmse,
        }
    }
}

/// Inputs for the comparison stage.
pub struct CompareInputs<'a> {
    pub dataset: &'a Dataset,
    pub estimates: &'a Estimates,
    pub bkt: Option<&'a BTreeMap<SkillId, BktParams>>,
    pub pfa: &'a PfaParams,
    pub cv: Option<&'a CvReport>,
    pub truth: Option<&'a TruthTables>,
    pub final_knowledge: FinalKnowledgeAt,
}

fn ok_or_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ConstantInput | Error::RankDeficient | Error::InvalidInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn spearman_opt(x: &[f64], y: &[f64]) -> Result<Option<SpearmanResult>> {
    ok_or_none(stats::spearman(x, y))
}

pub fn compare(inp: &CompareInputs) -> Result<Report> {
    let d = inp.dataset;
    let n_incorrect = d.events().filter(|(_, e)| !e.correct).count();
    let n_slip_estimable = if d.is_single_skill() {
        Some(d.slip_estimable_events()?.len())
    } else {
        None
    };
    let compared = inp.estimates;
    let means: BTreeMap<DetectorKind, StudentMeans> = compared
        .iter()
        .map(|(k, v)| (*k, stats::student_level_carelessness(v, d)))
        .collect();

    let models = inp
        .estimates
        .iter()
        .map(|(k, all)| {
            let probs: Vec<f64> = all.iter().map(|e| e.probability).collect();
            ModelBlock {
                model: *k,
                n_scored: all.len(),
                n_students: means[k].included.len(),
                excluded_students: means[k].excluded.len(),
                distribution: stats::summarize_distribution(&probs),
            }
        })
        .collect();

    let kinds: Vec<DetectorKind> = inp.estimates.keys().copied().collect();
    let mut correlations = Vec::new();
    for (i, &a) in kinds.iter().enumerate() {
        for &b in &kinds[i + 1..] {
            let (x, y): (Vec<f64>, Vec<f64>) = means[&a]
                .included
                .iter()
                .filter_map(|&(s, v, _)| means[&b].get(s).map(|w| (v, w)))
                .unzip();
            correlations.push(PairCorrelation {
                a,
                b,
                result: spearman_opt(&x, &y)?,
            });
        }
    }

    let bkt_knowledge = match inp.bkt {
        Some(p) => Some(stats::final_knowledge_bkt(&bkt::trace_knowledge(d, p)?, inp.final_knowledge)),
        None => None,
    };
    let pfa_knowledge = stats::final_knowledge_pfa(d, &pfa::pfa_trace(d, inp.pfa)?);
    let knowledge_for = |k: DetectorKind| -> Option<&Vec<Option<f64>>> {
        match k {
            DetectorKind::Bkfc => Some(&pfa_knowledge),
            _ => bkt_knowledge.as_ref(),
        }
    };

    let mut learning = Vec::new();
    type Outcome = fn(&event_log::TestScores) -> f64;
    let outcomes: [(&str, Outcome); 2] = [
        ("posttest", |s| s.posttest),
        ("delayed_posttest", |s| s.delayed_posttest),
    ];
    let has_scores = d.students().iter().any(|s| s.scores.is_some());
    if has_scores {
        for (name, get) in outcomes {
            for &k in &kinds {
                let Some(fk) = knowledge_for(k) else { continue };
                let mut y = Vec::new();
                let mut care = Vec::new();
                let mut know = Vec::new();
                for &(s, v, _) in &means[&k].included {
                    if let (Some(sc), Some(kv)) = (&d.students()[s].scores, fk[s]) {
                        y.push(get(sc));
                        care.push(v);
                        know.push(kv);
                    }
                }
                learning.push(LearningRegression {
                    outcome: name.to_string(),
                    model: k,
                    terms: vec!["intercept".into(), "carelessness".into(), "final_knowledge".into()],
                    result: ok_or_none(stats::ols(&y, &[&care, &know]))?,
                });
            }
        }
    }

    let mut external = Vec::new();
    type Measure = fn(&event_log::TestScores) -> Option<f64>;
    let measures: [(&str, Measure); 2] = [("gaming", |s| s.gaming), ("confrustion", |s| s.confrustion)];
    for (name, get) in measures {
        if !d.students().iter().any(|s| s.scores.as_ref().and_then(get).is_some()) {
            continue;
        }
        for &k in &kinds {
            let (x, y): (Vec<f64>, Vec<f64>) = means[&k]
                .included
                .iter()
                .filter_map(|&(s, v, _)| d.students()[s].scores.as_ref().and_then(get).map(|m| (v, m)))
                .unzip();
            external.push(ExternalCorrelation {
                measure: name.to_string(),
                model: k,
                result: spearman_opt(&x, &y)?,
            });
        }
    }

    let mut ground_truth = Vec::new();
    if let Some(t) = inp.truth {
        for &k in &kinds {
            let mut known = Vec::new();
            let mut unknown = Vec::new();
            for e in &compared[&k] {
                let ev = d.event(e.event);
                let Some(flags) = t.events.get(&(ev.student_id.clone(), ev.seq_index)) else {
                    continue;
                };
                if flags.knowledge.iter().all(|b| *b) {
                    if flags.careless_error {
                        known.push(e.probability);
                    }
                } else {
                    unknown.push(e.probability);
                }
            }
            let avg = |v: &[f64]| (!v.is_empty()).then(|| stats::mean(v));
            let (a, b) = (avg(&known), avg(&unknown));
            let (x, y): (Vec<f64>, Vec<f64>) = means[&k]
                .included
                .iter()
                .filter_map(|&(s, v, _)| t.careless_rate.get(&d.students()[s].student_id).map(|r| (v, *r)))
                .unzip();
            ground_truth.push(TruthBlock {
                model: k,
                mean_on_careless_known: a,
                mean_on_unknown: b,
                separation: a.zip(b).map(|(a, b)| a - b),
                rate_correlation: spearman_opt(&x, &y)?,
            });
        }
    }

    Ok(Report {
        n_students: d.students().len(),
        n_events: d.n_events(),
        n_incorrect,
        n_slip_estimable,
        models,
        correlations,
        learning,
        external,
        cross_validation: inp.cv.map(CvSummary::from),
        ground_truth,
    })
}

impl Report {
    pub fn block(&self, k: DetectorKind) -> Option<&ModelBlock> {
        self.models.iter().find(|m| m.model == k)
    }

    pub fn regression(&self, outcome: &str, k: DetectorKind) -> Option<&OlsResult> {
        self.learning
            .iter()
            .find(|l| l.outcome == outcome && l.model == k)
            .and_then(|l| l.result.as_ref())
    }

    pub fn truth(&self, k: DetectorKind) -> Option<&TruthBlock> {
        self.ground_truth.iter().find(|t| t.model == k)
    }

    /// Plain-text rendering.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            "{} students, {} events, {} incorrect, {} slip-estimable",
            self.n_students,
            self.n_events,
            self.n_incorrect,
            self.n_slip_estimable.map_or("n/a".to_string(), |n| n.to_string())
        );
        let _ = writeln!(s, "\nEstimates");
        for m in &self.models {
            let d = &m.distribution;
            let _ = writeln!(
                s,
                "  {:<15} scored {:>6}  students {:>4}  mean {:.3}  sd {:.3}  tail {:.3}  mid {:.3}",
                m.model.as_str(),
                m.n_scored,
                m.n_students,
                d.mean,
                d.sd,
                d.tail_mass,
                d.mid_mass
            );
        }
        let _ = writeln!(s, "\nPairwise Spearman (student level)");
        for c in &self.correlations {
            let _ = writeln!(
                s,
                "  {:<15} {:<15} rho {}  p {}",
                c.a.as_str(),
                c.b.as_str(),
                f(c.result.map(|r| r.rho)),
                f(c.result.map(|r| r.p_value))
            );
        }
        if !self.learning.is_empty() {
            let _ = writeln!(s, "\nLearning regressions (score ~ carelessness + final knowledge)");
            for l in &self.learning {
                let r = l.result.as_ref();
                let _ = writeln!(
                    s,
                    "  {:<17} {:<15} b {}  p {}  knowledge b {}  R2 {}",
                    l.outcome,
                    l.model.as_str(),
                    f(r.map(|r| r.coefficients[1])),
                    f(r.map(|r| r.p_values[1])),
                    f(r.map(|r| r.coefficients[2])),
                    f(r.map(|r| r.r_squared))
                );
            }
        }
        if !self.external.is_empty() {
            let _ = writeln!(s, "\nExternal measures");
            for e in &self.external {
                let _ = writeln!(
                    s,
                    "  {:<12} {:<15} rho {}  p {}",
                    e.measure,
                    e.model.as_str(),
                    f(e.result.map(|r| r.rho)),
                    f(e.result.map(|r| r.p_value))
                );
            }
        }
        if let Some(cv) = &self.cross_validation {
            let _ = writeln!(
                s,
                "\nEnsemble {}-fold CV: pooled RMSE {:.3}, baseline {:.3}",
                cv.k, cv.pooled_rmse, cv.baseline_rmse
            );
        }
        if !self.ground_truth.is_empty() {
            let _ = writeln!(s, "\nAgainst simulated truth");
            for t in &self.ground_truth {
                let _ = writeln!(
                    s,
                    "  {:<15} careless-known {}  unknown {}  rate rho {}",
                    t.model.as_str(),
                    f(t.mean_on_careless_known),
                    f(t.mean_on_unknown),
                    f(t.rate_correlation.map(|r| r.rho))
                );
            }
        }
        s
    }
}

/// Messages a stage wants surfaced to the user.
#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub written: Vec<PathBuf>,
    pub notes: Vec<String>,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.out.as_path();
    fs::create_dir_all(dir)?;
    Ok(dir)
}

pub fn run_simulate(cfg: &RunConfig) -> Result<StageOutcome> {
    let sc = cfg.sim_config()?;
    let (d, truth) = sim::simulate(&sc)?;
    let dir = out_dir(cfg)?;
    let prov = cfg.provenance();
    let pairs = prov.pairs();
    let mut out = StageOutcome::default();
    let files = [EVENTS_FILE, SCORES_FILE, GROUND_TRUTH_FILE, STUDENT_TRUTH_FILE, SIM_CONFIG_FILE];
    write_with(&dir.join(EVENTS_FILE), |w| event_log::write_log(&d, w, &pairs))?;
    write_with(&dir.join(SCORES_FILE), |w| event_log::write_scores(&d, w, &pairs))?;
    write_with(&dir.join(GROUND_TRUTH_FILE), |w| sim::write_ground_truth(&d, &truth, w, &pairs))?;
    write_with(&dir.join(STUDENT_TRUTH_FILE), |w| sim::write_student_truth(&truth, w, &pairs))?;
    write_json(&dir.join(SIM_CONFIG_FILE), &prov, &sc)?;
    out.written = files.iter().map(|f| dir.join(f)).collect();
    out.notes.push(format!("simulated {} students, {} events", d.students().len(), d.n_events()));
    Ok(out)
}

/// Loads the dataset named by the config, or the simulated one in `out`.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<ParseWarning>)> {
    let dir = cfg.paths.out.as_path();
    let log = cfg.paths.log.clone().unwrap_or_else(|| dir.join(EVENTS_FILE));
    let parsed = event_log::parse_log(&read(&log)?, &cfg.schema)?;
    let scores = match &cfg.paths.scores {
        Some(p) => Some(p.clone()),
        None if cfg.paths.log.is_none() && dir.join(SCORES_FILE).exists() => Some(dir.join(SCORES_FILE)),
        None => None,
    };
    let d = match scores {
        Some(p) => parsed.dataset.with_scores(event_log::parse_scores(&read(&p)?)?)?,
        None => parsed.dataset,
    };
    Ok((d, parsed.warnings))
}

fn load_truth(cfg: &RunConfig) -> Result<Option<TruthTables>> {
    let dir = cfg.paths.out.as_path();
    let simulated = cfg.paths.log.is_none();
    let gt = cfg
        .paths
        .ground_truth
        .clone()
        .or_else(|| simulated.then(|| dir.join(GROUND_TRUTH_FILE)).filter(|p| p.exists()));
    let st = cfg
        .paths
        .student_truth
        .clone()
        .or_else(|| simulated.then(|| dir.join(STUDENT_TRUTH_FILE)).filter(|p| p.exists()));
    match (gt, st) {
        (Some(g), Some(s)) => Ok(Some(TruthTables {
            events: sim::read_ground_truth(&read(&g)?)?,
            careless_rate: sim::read_student_truth(&read(&s)?)?,
        })),
        (None, None) => Ok(None),
        _ => Err(Error::InvalidConfig("ground truth needs both event and student files".into())),
    }
}

fn warnings_to_notes(w: &[ParseWarning]) -> Vec<String> {
    w.iter().map(|w| format!("warning: {w}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BktArtifact {
    pub grid: GridSpec,
    pub skills: BTreeMap<SkillId, BktFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BkfcArtifact {
    pub cdf_mode: CdfMode,
    pub fit: BkfcFit,
}

pub fn run_fit(cfg: &RunConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    cfg.require_seed()?;
    let (d, warnings) = load_dataset(cfg)?;
    let m = fit_models(&d, cfg)?;
    let dir = out_dir(cfg)?;
    let prov = cfg.provenance();
    let mut out = StageOutcome {
        notes: warnings_to_notes(&warnings),
        ..Default::default()
    };
    let mut put = |name: &str| {
        let p = dir.join(name);
        out.written.push(p.clone());
        p
    };
    if let Some(b) = &m.bkt {
        write_json(
            &put(BKT_FILE),
            &prov,
            &BktArtifact {
                grid: cfg.model.grid.clone(),
                skills: b.clone(),
            },
        )?;
    }
    write_json(&put(PFA_FILE), &prov, &m.pfa)?;
    write_json(
        &put(BKFC_FILE),
        &prov,
        &BkfcArtifact {
            cdf_mode: cfg.model.cdf_mode,
            fit: m.bkfc.clone(),
        },
    )?;
    if let Some(e) = &m.ensemble {
        write_json(&put(ENSEMBLE_FILE), &prov, e)?;
    }
    if let Some(cv) = &m.cv {
        write_json(&put(CV_FILE), &prov, cv)?;
    }
    let pairs = prov.pairs();
    write_with(&put(FEATURES_FILE), |w| features::write_features(&d, &m.features, w, &pairs))?;
    for w in &m.pfa.warnings {
        out.notes.push(format!("pfa: {w:?}"));
    }
    for w in &m.bkfc.warnings {
        out.notes.push(format!("bkfc: {w:?}"));
    }
    Ok(out)
}

fn load_detector_models(cfg: &RunConfig) -> Result<DetectorModels> {
    let dir = cfg.paths.out.as_path();
    let bkt = if cfg.wants(DetectorKind::BktContextual) {
        let a: BktArtifact = read_json(&dir.join(BKT_FILE))?;
        Some(bkt_params(&a.skills))
    } else {
        None
    };
    let ensemble = if cfg.wants(DetectorKind::MlContextual) {
        Some(read_json(&dir.join(ENSEMBLE_FILE))?)
    } else {
        None
    };
    let b: BkfcArtifact = read_json(&dir.join(BKFC_FILE))?;
    Ok(DetectorModels {
        bkt,
        bkfc: b.fit.model,
        ensemble,
    })
}

/// Writes `student_id, seq_index, skill, p_slip, model`.
pub fn write_estimates<W: std::io::Write>(d: &Dataset, est: &[SlipEstimate], mut w: W, provenance: &[(String, String)]) -> Result<()> {
    for (k, v) in provenance {
        writeln!(w, "# {k}={v}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["student_id", "seq_index", "skill", "p_slip", "model"])?;
    for e in est {
        let ev = d.event(e.event);
        wtr.write_record([
            ev.student_id.as_str(),
            &ev.seq_index.to_string(),
            &ev.skill_key(),
            &e.probability.to_string(),
            e.model.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_estimates(d: &Dataset, bytes: &[u8]) -> Result<Vec<SlipEstimate>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |m: String| Error::MalformedRow { row, message: m };
        if rec.len() != 5 {
            return Err(bad("expected 5 columns".into()));
        }
        let student = d
            .student_index(&rec[0])
            .ok_or_else(|| bad(format!("unknown student `{}`", &rec[0])))?;
        let index: usize = rec[1].parse().map_err(|e| bad(format!("seq_index: {e}")))?;
        if index >= d.students()[student].events.len() {
            return Err(bad(format!("seq_index {index} out of range")));
        }
        let probability: f64 = rec[3].parse().map_err(|e| bad(format!("p_slip: {e}")))?;
        let model = rec[4].parse().map_err(bad)?;
        out.push(SlipEstimate {
            event: EventRef { student, index },
            probability,
            model,
        });
    }
    Ok(out)
}

pub fn run_detect(cfg: &RunConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let (d, warnings) = load_dataset(cfg)?;
    let models = load_detector_models(cfg)?;
    let est = detect(&d, &models, cfg)?;
    let dir = out_dir(cfg)?;
    let pairs = cfg.provenance().pairs();
    let mut out = StageOutcome {
        notes: warnings_to_notes(&warnings),
        ..Default::default()
    };
    for (k, v) in &est {
        let p = dir.join(estimates_file(*k));
        write_with(&p, |w| write_estimates(&d, v, w, &pairs))?;
        out.written.push(p);
        out.notes.push(format!("{}: {} estimates", k.as_str(), v.len()));
    }
    Ok(out)
}

pub fn run_compare(cfg: &RunConfig) -> Result<(Report, StageOutcome)> {
    cfg.validate()?;
    let (d, warnings) = load_dataset(cfg)?;
    let dir = cfg.paths.out.as_path();
    let mut est = Estimates::new();
    for k in &cfg.model.detectors {
        est.insert(*k, read_estimates(&d, &read(&dir.join(estimates_file(*k)))?)?);
    }
    let bkt = if cfg.wants(DetectorKind::BktContextual) {
        let a: BktArtifact = read_json(&dir.join(BKT_FILE))?;
        Some(bkt_params(&a.skills))
    } else {
        None
    };
    let pfa_fit: PfaFit = read_json(&dir.join(PFA_FILE))?;
    let cv: Option<CvReport> = if cfg.wants(DetectorKind::MlContextual) {
        Some(read_json(&dir.join(CV_FILE))?)
    } else {
        None
    };
    let truth = load_truth(cfg)?;
    let report = compare(&CompareInputs {
        dataset: &d,
        estimates: &est,
        bkt: bkt.as_ref(),
        pfa: &pfa_fit.params,
        cv: cv.as_ref(),
        truth: truth.as_ref(),
        final_knowledge: cfg.model.final_knowledge,
    })?;
    let dir = out_dir(cfg)?;
    let path = dir.join(REPORT_FILE);
    write_json(&path, &cfg.provenance(), &report)?;
    Ok((
        report,
        StageOutcome {
            written: vec![path],
            notes: warnings_to_notes(&warnings),
        },
    ))
}

/// Renders `report.json` to text and writes `report.txt`.
pub fn run_report(cfg: &RunConfig) -> Result<(String, StageOutcome)> {
    let dir = cfg.paths.out.as_path();
    let a: Artifact<Report> = serde_json::from_slice(&read(&dir.join(REPORT_FILE))?)?;
    let mut text = format!(
        "config_hash={} seed={}\n",
        a.provenance.config_hash,
        a.provenance.seed.map_or("none".to_string(), |s| s.to_string())
    );
    text.push_str(&a.content.render());
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, &text)?;
    Ok((
        text,
        StageOutcome {
            written: vec![path],
            notes: Vec::new(),
        },
    ))
}

/// Runs simulate, fit, detect and compare in memory.
pub fn run_in_memory(cfg: &RunConfig) -> Result<(Dataset, Models, Estimates, Report)> {
    let (d, truth) = sim::simulate(&cfg.sim_config()?)?;
    let models = fit_models(&d, cfg)?;
    let est = detect(&d, &DetectorModels::from(&models), cfg)?;
    let tables = TruthTables::from_ground_truth(&d, &truth);
    let bkt = models.bkt.as_ref().map(bkt_params);
    let report = compare(&CompareInputs {
        dataset: &d,
        estimates: &est,
        bkt: bkt.as_ref(),
        pfa: &models.pfa.params,
        cv: models.cv.as_ref(),
        truth: Some(&tables),
        final_knowledge: cfg.model.final_knowledge,
    })?;
    Ok((d, models, est, report))
}

/// Knowledge traces under fitted BKT parameters.
pub fn knowledge_traces(d: &Dataset, models: &Models) -> Result<Option<KnowledgeTrace>> {
    models
        .bkt
        .as_ref()
        .map(|b| bkt::trace_knowledge(d, &bkt_params(b)))
        .transpose()
}
