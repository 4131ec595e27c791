//! Bagged regression trees trained on contextual slip labels, with
//! student-level cross-validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkt::{DetectorKind, SlipEstimate};
use crate::error::{Error, Result};
use crate::event_log::{Dataset, EventRef};
use crate::features::{FeatureMatrix, N_ENCODED};
use crate::stats::rmse;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Smallest number of samples in a leaf.
    pub min_leaf: usize,
    /// Grow each tree on a same-size sample drawn with replacement.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            min_leaf: 1,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Flat node list; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub n_trees: usize,
    pub config: ForestConfig,
    pub manifest_hash: String,
    pub trees: Vec<RegressionTree>,
}

impl EnsembleModel {
    pub fn tree_outputs(&self, row: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(row)).collect()
    }

    /// Mean of tree outputs, clamped to [0, 1].
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        (s / self.trees.len() as f64).clamp(0.0, 1.0)
    }

    pub fn predict<R: AsRef<[f64]> + Sync>(&self, rows: &[R], manifest: &str) -> Result<Vec<f64>> {
        if manifest != self.manifest_hash {
            return Err(Error::ManifestMismatch {
                expected: self.manifest_hash.clone(),
                found: manifest.to_string(),
            });
        }
        Ok(rows.par_iter().map(|r| self.predict_row(r.as_ref())).collect())
    }
}

/// Trains `cfg.n_trees` trees in parallel. Tree `i` draws its bootstrap
/// sample from a generator seeded with `(cfg.seed, i)`.
pub fn train_ensemble<R: AsRef<[f64]> + Sync>(
    rows: &[R],
    targets: &[f64],
    manifest_hash: &str,
    cfg: &ForestConfig,
) -> Result<EnsembleModel> {
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if rows.len() != targets.len() {
        return Err(Error::InvalidInput(format!("{} rows, {} targets", rows.len(), targets.len())));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::InvalidInput("need at least one tree and min_leaf >= 1".into()));
    }
    let width = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != width) {
        return Err(Error::InvalidInput("rows differ in width".into()));
    }
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|i| {
            let n = rows.len();
            let sample: Vec<usize> = if cfg.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(rows, targets, &sample, width, cfg.min_leaf)
        })
        .collect();
    Ok(EnsembleModel {
        n_trees: cfg.n_trees,
        config: *cfg,
        manifest_hash: manifest_hash.to_string(),
        trees,
    })
}

struct Best {
    score: f64,
    feature: usize,
    cut: usize,
}

/// Grows one tree on `sample` (row ids, repeats allowed). Each feature keeps
/// its own ordering of sample positions, partitioned stably at every split.
fn grow<R: AsRef<[f64]>>(rows: &[R], y: &[f64], sample: &[usize], width: usize, min_leaf: usize) -> RegressionTree {
    let n = sample.len();
    let val = |pos: usize, f: usize| rows[sample[pos]].as_ref()[f];
    let mut order: Vec<Vec<usize>> = (0..width)
        .map(|f| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| val(a, f).total_cmp(&val(b, f)).then(a.cmp(&b)));
            o
        })
        .collect();
    let mut goes_left = vec![false; n];
    let mut scratch = Vec::with_capacity(n);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // (node id, start, end) ranges into every feature ordering
    let mut stack = vec![(0usize, 0usize, n)];

    while let Some((id, start, end)) = stack.pop() {
        let span = &order[0][start..end];
        let count = (end - start) as f64;
        let sum: f64 = span.iter().map(|&p| y[sample[p]]).sum();
        let mean = sum / count;
        let first = y[sample[span[0]]];
        if span.iter().all(|&p| y[sample[p]] == first) {
            nodes[id] = Node::Leaf { value: first };
            continue;
        }
        if end - start < 2 * min_leaf {
            nodes[id] = Node::Leaf { value: mean };
            continue;
        }

        let parent = sum * sum / count;
        let mut best: Option<Best> = None;
        for (f, ord) in order.iter().enumerate() {
            let span = &ord[start..end];
            let mut left_sum = 0.0;
            for i in 0..span.len() - 1 {
                left_sum += y[sample[span[i]]];
                let n_left = i + 1;
                let n_right = span.len() - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                if val(span[i], f) == val(span[i + 1], f) {
                    continue;
                }
                let right_sum = sum - left_sum;
                let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64;
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(Best { score, feature: f, cut: i });
                }
            }
        }
        let Some(b) = best.filter(|b| b.score > parent * (1.0 + 1e-12) + 1e-15) else {
            nodes[id] = Node::Leaf { value: mean };
            continue;
        };

        let span = &order[b.feature][start..end];
        let lo = val(span[b.cut], b.feature);
        let hi = val(span[b.cut + 1], b.feature);
        let mut threshold = lo + (hi - lo) / 2.0;
        if threshold >= hi {
            threshold = lo;
        }
        for (i, &p) in span.iter().enumerate() {
            goes_left[p] = i <= b.cut;
        }
        let mid = start + b.cut + 1;
        for ord in order.iter_mut() {
            scratch.clear();
            scratch.extend(ord[start..end].iter().copied().filter(|&p| goes_left[p]));
            scratch.extend(ord[start..end].iter().copied().filter(|&p| !goes_left[p]));
            ord[start..end].copy_from_slice(&scratch);
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[id] = Node::Split {
            feature: b.feature,
            threshold,
            left,
            right: left + 1,
        };
        stack.push((left + 1, mid, end));
        stack.push((left, start, mid));
    }
    RegressionTree { nodes }
}

/// Feature rows paired with slip labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRows {
    pub events: Vec<EventRef>,
    pub rows: Vec<[f64; N_ENCODED]>,
    pub targets: Vec<f64>,
}

/// Joins slip labels to their feature rows.
pub fn slip_training_set(x: &FeatureMatrix, labels: &[SlipEstimate]) -> Result<LabeledRows> {
    let index = x.index();
    let mut out = LabeledRows {
        events: Vec::with_capacity(labels.len()),
        rows: Vec::with_capacity(labels.len()),
        targets: Vec::with_capacity(labels.len()),
    };
    for l in labels {
        let i = *index
            .get(&l.event)
            .ok_or_else(|| Error::InvalidInput(format!("no feature row for {:?}", l.event)))?;
        out.events.push(l.event);
        out.rows.push(x.rows[i]);
        out.targets.push(l.probability);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub student_id: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub n_rows: usize,
    pub folds: Vec<FoldAssignment>,
    pub per_fold_rmse: Vec<f64>,
    pub pooled_rmse: f64,
    /// Out-of-fold RMSE of predicting each training fold's mean.
    pub baseline_rmse: f64,
    /// Out-of-fold prediction for every row, in input order.
    pub predictions: Vec<f64>,
}

/// Students are shuffled by `cfg.seed` and dealt round-robin into `k`
/// folds; each fold is scored by a model trained on the others.
pub fn crossvalidate(d: &Dataset, set: &LabeledRows, manifest_hash: &str, k: usize, cfg: &ForestConfig) -> Result<CvReport> {
    if k < 2 {
        return Err(Error::InvalidInput("cross-validation needs k >= 2".into()));
    }
    let students: Vec<usize> = set.events.iter().map(|e| e.student).collect::<BTreeSet<_>>().into_iter().collect();
    if students.len() < k {
        return Err(Error::TooFewStudents {
            needed: k,
            found: students.len(),
        });
    }
    let mut shuffled = students.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![usize::MAX; d.students().len()];
    for (i, &s) in shuffled.iter().enumerate() {
        fold_of[s] = i % k;
    }
    let row_fold: Vec<usize> = set.events.iter().map(|e| fold_of[e.student]).collect();

    let mut predictions = vec![0.0; set.targets.len()];
    let mut baseline = vec![0.0; set.targets.len()];
    let mut per_fold_rmse = Vec::with_capacity(k);
    for fold in 0..k {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..set.targets.len()).partition(|&i| row_fold[i] != fold);
        let train_rows: Vec<[f64; N_ENCODED]> = train.iter().map(|&i| set.rows[i]).collect();
        let train_y: Vec<f64> = train.iter().map(|&i| set.targets[i]).collect();
        let model = train_ensemble(&train_rows, &train_y, manifest_hash, cfg)?;
        let train_mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
        let test_rows: Vec<[f64; N_ENCODED]> = test.iter().map(|&i| set.rows[i]).collect();
        let pred = model.predict(&test_rows, manifest_hash)?;
        let truth: Vec<f64> = test.iter().map(|&i| set.targets[i]).collect();
        per_fold_rmse.push(rmse(&pred, &truth));
        for (&i, p) in test.iter().zip(pred) {
            predictions[i] = p;
            baseline[i] = train_mean;
        }
    }
    let mut folds: Vec<FoldAssignment> = students
        .iter()
        .map(|&s| FoldAssignment {
            student_id: d.students()[s].student_id.clone(),
            fold: fold_of[s],
        })
        .collect();
    folds.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    Ok(CvReport {
        k,
        seed: cfg.seed,
        n_rows: set.targets.len(),
        folds,
        per_fold_rmse,
        pooled_rmse: rmse(&predictions, &set.targets),
        baseline_rmse: rmse(&baseline, &set.targets),
        predictions,
    })
}

/// Scores every incorrect event in dataset order.
pub fn score_incorrect(d: &Dataset, x: &FeatureMatrix, model: &EnsembleModel) -> Result<Vec<SlipEstimate>> {
    let picked: Vec<usize> = (0..x.len()).filter(|&i| !d.event(x.events[i]).correct).collect();
    let rows: Vec<[f64; N_ENCODED]> = picked.iter().map(|&i| x.rows[i]).collect();
    let probs = model.predict(&rows, &x.manifest_hash)?;
    Ok(picked
        .iter()
        .zip(probs)
        .map(|(&i, probability)| SlipEstimate {
            event: x.events[i],
            probability,
            model: DetectorKind::MlContextual,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::from_answers;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    const H: &str = "test";

    fn synthetic(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let y = rows
            .iter()
            .map(|r| (0.2 + 0.6 * r[0] * r[1] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
            .collect();
        (rows, y)
    }

    #[test]
    fn constant_target() {
        let (rows, _) = synthetic(50, 1);
        let y = vec![0.3; 50];
        let m = train_ensemble(&rows, &y, H, &ForestConfig { n_trees: 10, ..Default::default() }).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes == vec![Node::Leaf { value: 0.3 }]));
        assert!(m.predict(&rows, H).unwrap().iter().all(|&p| (p - 0.3).abs() <= 1e-15));
    }

    #[test]
    fn single_row() {
        let m = train_ensemble(&[[1.0, 2.0]], &[0.7], H, &ForestConfig::default()).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes == vec![Node::Leaf { value: 0.7 }]));
        let empty: [[f64; 2]; 0] = [];
        assert!(matches!(
            train_ensemble(&empty, &[], H, &ForestConfig::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn memorizes_without_bootstrap() {
        let (rows, y) = synthetic(200, 2);
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = train_ensemble(&rows, &y, H, &cfg).unwrap();
        for (r, t) in rows.iter().zip(&y) {
            assert_eq!(m.trees[0].predict(r), *t);
        }
    }

    #[test]
    fn threshold_is_midpoint_with_low_index_tiebreak() {
        // Features 0 and 1 separate the targets identically.
        let rows = [[1.0, 10.0], [2.0, 20.0], [5.0, 30.0], [6.0, 40.0]];
        let y = [0.0, 0.0, 1.0, 1.0];
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = train_ensemble(&rows, &y, H, &cfg).unwrap();
        assert_eq!(
            m.trees[0].nodes[0],
            Node::Split {
                feature: 0,
                threshold: 3.5,
                left: 1,
                right: 2
            }
        );
    }

    #[test]
    fn beats_baseline_in_sample_and_is_deterministic() {
        let (rows, y) = synthetic(400, 3);
        let cfg = ForestConfig { seed: 9, ..Default::default() };
        let m = train_ensemble(&rows, &y, H, &cfg).unwrap();
        let pred = m.predict(&rows, H).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(rmse(&pred, &y) <= rmse(&vec![mean; y.len()], &y));
        let again = train_ensemble(&rows, &y, H, &cfg).unwrap();
        assert_eq!(m, again);
        let json = serde_json::to_string(&m).unwrap();
        let back: EnsembleModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(matches!(m.predict(&rows, "other"), Err(Error::ManifestMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ensemble_mean_within_tree_range(seed in 0u64..1000, probe in prop::array::uniform3(0.0f64..1.0)) {
            let (rows, y) = synthetic(60, seed);
            let m = train_ensemble(&rows, &y, H, &ForestConfig { n_trees: 15, seed, ..Default::default() }).unwrap();
            let outs = m.tree_outputs(&probe);
            let lo = outs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = outs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = m.predict_row(&probe);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            prop_assert!(outs.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn cv_fixture(n_students: usize, per_student: usize, seed: u64) -> (Dataset, LabeledRows) {
        let names: Vec<String> = (0..n_students).map(|i| format!("s{i:03}")).collect();
        let answers: Vec<(&str, Vec<(&[&str], bool)>)> = names
            .iter()
            .map(|n| (n.as_str(), vec![(&["A"][..], false); per_student]))
            .collect();
        let d = from_answers(&answers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledRows {
            events: Vec::new(),
            rows: Vec::new(),
            targets: Vec::new(),
        };
        for s in 0..n_students {
            for i in 0..per_student {
                let mut row = [0.0; N_ENCODED];
                for v in row.iter_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
                let y: f64 = (0.1 + 0.8 * row[0] * row[3] + rng.random_range(-0.05f64..0.05)).clamp(0.0, 1.0);
                set.events.push(EventRef { student: s, index: i });
                set.rows.push(row);
                set.targets.push(y);
            }
        }
        (d, set)
    }

    fn small() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn cv_folds_partition_students() {
        let (d, set) = cv_fixture(23, 10, 1);
        let r = crossvalidate(&d, &set, H, 5, &small()).unwrap();
        assert_eq!(r.folds.len(), 23);
        let mut sizes = [0; 5];
        for f in &r.folds {
            sizes[f.fold] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 4 || s == 5));
        // each student lands in exactly one fold, so never on both sides
        let ids: BTreeSet<&str> = r.folds.iter().map(|f| f.student_id.as_str()).collect();
        assert_eq!(ids.len(), 23);
        assert!(r.pooled_rmse < r.baseline_rmse);
        assert_eq!(r, crossvalidate(&d, &set, H, 5, &small()).unwrap());
        assert!(matches!(
            crossvalidate(&d, &set, H, 30, &small()),
            Err(Error::TooFewStudents { needed: 30, found: 23 })
        ));
    }

    #[test]
    fn cv_leaked_target_is_nearly_exact() {
        let (d, mut set) = cv_fixture(30, 20, 2);
        for (row, y) in set.rows.iter_mut().zip(&set.targets) {
            row[7] = *y;
        }
        let r = crossvalidate(&d, &set, H, 5, &small()).unwrap();
        assert!(r.pooled_rmse < 0.05, "{}", r.pooled_rmse);
    }

    #[test]
    fn cv_shuffled_labels_match_baseline() {
        let (d, mut set) = cv_fixture(30, 20, 3);
        set.targets.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let r = crossvalidate(&d, &set, H, 5, &small()).unwrap();
        let ratio = r.pooled_rmse / r.baseline_rmse;
        assert!((ratio - 1.0).abs() <= 0.10, "ratio {ratio}");
    }
}
