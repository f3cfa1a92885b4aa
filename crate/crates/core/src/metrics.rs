//! Evaluation: pair accuracy, test-pair construction, score quantization,
//! multi-class metrics, selection and uncertainty analyses, annotation cost
//! and the McNemar statistic.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bayes::ScorePosterior;
use crate::data::{oracle_relative, Dataset, SampleId, Source};
use crate::error::{Error, Result};
use crate::ranker::{LabeledPair, RelativeLabel, RelativePair};
use crate::seed;

/// Seconds to annotate one pair relatively.
pub const RELATIVE_SECONDS_PER_PAIR: u64 = 1;
/// Seconds to annotate one image with an absolute class.
pub const ABSOLUTE_SECONDS_PER_IMAGE: u64 = 20;

fn is_correct(pair: &LabeledPair, left: f64, right: f64) -> Option<bool> {
    match pair.label {
        RelativeLabel::Equal => None,
        RelativeLabel::LeftMore => Some(left > right),
        RelativeLabel::RightMore => Some(right > left),
    }
}

/// Per-pair correctness; `None` for equal-severity pairs, which carry no
/// ordering to get right. Exact score ties are incorrect.
pub fn pair_correctness(pairs: &[LabeledPair], score: impl Fn(SampleId) -> f64) -> Vec<Option<bool>> {
    pairs
        .iter()
        .map(|p| is_correct(p, score(p.pair.left), score(p.pair.right)))
        .collect()
}

/// Fraction of decisive pairs whose score order matches the label.
pub fn pair_accuracy(pairs: &[LabeledPair], score: impl Fn(SampleId) -> f64) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for c in pair_correctness(pairs, score).into_iter().flatten() {
        total += 1;
        correct += c as usize;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no pairs with a strict ordering".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestPairMode {
    Overall,
    Neighboring,
}

/// A named set of ground-truth labeled test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPairSet {
    /// `"overall"` or `"c-(c+1)"`.
    pub name: String,
    pub pairs: Vec<LabeledPair>,
}

fn truth_pair(dataset: &Dataset, left: SampleId, right: SampleId) -> Result<LabeledPair> {
    let pair = RelativePair::new(left, right)?;
    Ok(LabeledPair {
        pair,
        label: oracle_relative((left, right), dataset)?,
        round: 0,
        source: Source::Sim,
    })
}

/// Build ground-truth test pairs from a labeled test set.
///
/// Overall: each class is downsampled to the smallest class size, then
/// every retained sample is paired with a random partner among them; this
/// is repeated `repeats` times with fresh draws and duplicates are dropped.
/// Neighboring: for each adjacent class pair `(c, c+1)` every sample of
/// either class is paired with a random partner from the other class.
pub fn build_test_pairs(
    dataset: &Dataset,
    test_ids: &[SampleId],
    mode: TestPairMode,
    repeats: usize,
    seed: u64,
) -> Result<Vec<TestPairSet>> {
    let num_classes = dataset.num_classes();
    let mut by_class: Vec<Vec<SampleId>> = vec![Vec::new(); num_classes];
    for &id in test_ids {
        let label = dataset
            .label(id)
            .ok_or_else(|| Error::Validation(format!("test sample {} is unlabeled", dataset.sample(id).name)))?;
        by_class[label as usize].push(id);
    }
    let mut rng = seed::keyed_rng(seed, "test-pairs", &[mode as u64]);
    match mode {
        TestPairMode::Overall => {
            let present: Vec<&Vec<SampleId>> = by_class.iter().filter(|c| !c.is_empty()).collect();
            let min = present.iter().map(|c| c.len()).min().unwrap_or(0);
            let mut seen = HashSet::new();
            let mut pairs = Vec::new();
            for _ in 0..repeats.max(1) {
                let mut pool: Vec<SampleId> = Vec::with_capacity(min * present.len());
                for class in &present {
                    let mut members = (*class).clone();
                    members.shuffle(&mut rng);
                    pool.extend_from_slice(&members[..min]);
                }
                if pool.len() < 2 {
                    break;
                }
                for (k, &id) in pool.iter().enumerate() {
                    let mut j = rng.random_range(0..pool.len() - 1);
                    if j >= k {
                        j += 1;
                    }
                    let lp = truth_pair(dataset, id, pool[j])?;
                    if seen.insert(lp.pair.key()) {
                        pairs.push(lp);
                    }
                }
            }
            Ok(vec![TestPairSet { name: "overall".into(), pairs }])
        }
        TestPairMode::Neighboring => {
            let mut sets = Vec::new();
            for c in 0..num_classes.saturating_sub(1) {
                let (lo, hi) = (&by_class[c], &by_class[c + 1]);
                if lo.is_empty() || hi.is_empty() {
                    warn!("class {} or {} has no test samples; skipping neighboring set", c, c + 1);
                    continue;
                }
                let mut seen = HashSet::new();
                let mut pairs = Vec::new();
                for (own, other) in [(lo, hi), (hi, lo)] {
                    for &id in own {
                        let partner = other[rng.random_range(0..other.len())];
                        let lp = truth_pair(dataset, id, partner)?;
                        if seen.insert(lp.pair.key()) {
                            pairs.push(lp);
                        }
                    }
                }
                sets.push(TestPairSet { name: format!("{}-{}", c, c + 1), pairs });
            }
            Ok(sets)
        }
    }
}

/// Nearest class with halves rounded up, clamped to `[0, num_classes - 1]`.
pub fn quantize_score(score: f64, num_classes: usize) -> Result<u32> {
    if !score.is_finite() {
        return Err(Error::numerical(None, "cannot quantize a non-finite score"));
    }
    let top = num_classes.saturating_sub(1) as f64;
    Ok((score + 0.5).floor().clamp(0.0, top) as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes absent from both truth and prediction, left out of the macro average.
    pub skipped: Vec<u32>,
}

fn ratio(num: usize, den: usize, what: &str, class: u32) -> f64 {
    if den == 0 {
        warn!("{what} of class {class} is undefined; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class, with macro averages.
pub fn classification_metrics(truth: &[u32], predicted: &[u32], num_classes: usize) -> Result<ClassificationReport> {
    if truth.len() != predicted.len() {
        return Err(Error::Validation(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let num_classes = truth
        .iter()
        .chain(predicted)
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0)
        .max(num_classes);
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..num_classes as u32 {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == class, p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            warn!("class {class} absent from truth and predictions; skipped in macro average");
            skipped.push(class);
            continue;
        }
        let precision = ratio(tp, tp + fp, "precision", class);
        let recall = ratio(tp, tp + fn_, "recall", class);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { class, precision, recall, f1, support: tp + fn_ });
    }
    let n = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    Ok(ClassificationReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        skipped,
    })
}

/// Histogram of labels over the distinct ids in `selected`.
pub fn class_proportions<'a>(
    selected: impl IntoIterator<Item = &'a SampleId>,
    dataset: &Dataset,
    num_classes: usize,
) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes.max(dataset.num_classes())];
    let unique: HashSet<SampleId> = selected.into_iter().copied().collect();
    for id in unique {
        if let Some(label) = dataset.label(id) {
            counts[label as usize] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Quartiles {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Variance distribution per ground-truth class.
pub fn uncertainty_by_class(posteriors: &[ScorePosterior], dataset: &Dataset) -> BTreeMap<u32, Quartiles> {
    let mut grouped: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for p in posteriors {
        if let Some(label) = dataset.label(p.sample) {
            grouped.entry(label).or_default().push(p.variance);
        }
    }
    grouped
        .into_iter()
        .filter_map(|(c, v)| quartiles(&v).map(|q| (c, q)))
        .collect()
}

/// Annotation time in seconds.
pub fn annotation_cost(n_relative_pairs: u64, n_unique_absolute: u64) -> u64 {
    RELATIVE_SECONDS_PER_PAIR * n_relative_pairs + ABSOLUTE_SECONDS_PER_IMAGE * n_unique_absolute
}

/// Continuity-corrected McNemar statistic `(|b - c| - 1)^2 / (b + c)`, 0 when
/// there are no discordant pairs.
pub fn mcnemar_statistic(only_a_correct: u64, only_b_correct: u64) -> f64 {
    let n = only_a_correct + only_b_correct;
    if n == 0 {
        return 0.0;
    }
    let diff = (only_a_correct as f64 - only_b_correct as f64).abs() - 1.0;
    diff * diff / n as f64
}

/// Discordant counts `(only a correct, only b correct)` over aligned outcomes.
pub fn discordant_counts(a: &[Option<bool>], b: &[Option<bool>]) -> (u64, u64) {
    a.iter().zip(b).fold((0, 0), |(x, y), pair| match pair {
        (Some(true), Some(false)) => (x + 1, y),
        (Some(false), Some(true)) => (x, y + 1),
        _ => (x, y),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub overall_accuracy: Option<f64>,
    pub neighboring_accuracies: BTreeMap<String, f64>,
    pub mean_neighboring: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    pub class_proportions: Vec<usize>,
    pub uncertainty_stats: BTreeMap<u32, Quartiles>,
    pub cost_seconds: u64,
}

impl MetricReport {
    /// Flat `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        row("overall_accuracy", opt(self.overall_accuracy));
        for (name, acc) in &self.neighboring_accuracies {
            row(&format!("neighboring_{name}"), format!("{acc:.6}"));
        }
        row("mean_neighboring", opt(self.mean_neighboring));
        if let Some(c) = &self.classification {
            for m in &c.per_class {
                row(&format!("precision_{}", m.class), format!("{:.6}", m.precision));
                row(&format!("recall_{}", m.class), format!("{:.6}", m.recall));
                row(&format!("f1_{}", m.class), format!("{:.6}", m.f1));
            }
            row("macro_precision", format!("{:.6}", c.macro_precision));
            row("macro_recall", format!("{:.6}", c.macro_recall));
            row("macro_f1", format!("{:.6}", c.macro_f1));
        }
        for (c, n) in self.class_proportions.iter().enumerate() {
            row(&format!("selected_class_{c}"), n.to_string());
        }
        for (c, q) in &self.uncertainty_stats {
            row(&format!("variance_median_class_{c}"), format!("{:.6e}", q.median));
        }
        row("cost_seconds", self.cost_seconds.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn lp(l: u32, r: u32, label: RelativeLabel) -> LabeledPair {
        LabeledPair {
            pair: RelativePair::new(SampleId(l), SampleId(r)).unwrap(),
            label,
            round: 0,
            source: Source::Sim,
        }
    }

    #[test]
    fn accuracy_counts_and_ties() {
        let scores = [3.0, 2.0, 1.0, 1.0];
        let pairs = [
            lp(0, 1, RelativeLabel::LeftMore),
            lp(2, 1, RelativeLabel::RightMore),
            lp(2, 0, RelativeLabel::LeftMore),
        ];
        let acc = pair_accuracy(&pairs, |id| scores[id.index()]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        let tie = [lp(2, 3, RelativeLabel::LeftMore)];
        assert_eq!(pair_accuracy(&tie, |id| scores[id.index()]).unwrap(), 0.0);
        let equal = [lp(0, 1, RelativeLabel::Equal)];
        assert!(matches!(pair_accuracy(&equal, |_| 0.0), Err(Error::UndefinedMetric(_))));
    }

    fn dataset(labels: &[u32]) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Sample { name: format!("t{i:03}"), features: vec![l as f64], label: Some(l), group: "g".into() })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn neighboring_sets_per_adjacent_class() {
        let labels: Vec<u32> = (0..40).map(|i| (i % 4) as u32).collect();
        let ds = dataset(&labels);
        let ids: Vec<SampleId> = ds.ids().collect();
        let sets = build_test_pairs(&ds, &ids, TestPairMode::Neighboring, 1, 3).unwrap();
        let names: Vec<&str> = sets.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["0-1", "1-2", "2-3"]);
        for (c, set) in sets.iter().enumerate() {
            for p in &set.pairs {
                let (a, b) = (ds.label(p.pair.left).unwrap(), ds.label(p.pair.right).unwrap());
                assert_eq!(a.min(b) as usize, c);
                assert_eq!(a.max(b) as usize, c + 1);
            }
        }
        assert_eq!(sets, build_test_pairs(&ds, &ids, TestPairMode::Neighboring, 1, 3).unwrap());
    }

    #[test]
    fn neighboring_skips_empty_class() {
        let ds = dataset(&[0, 0, 1, 1, 3, 3]);
        let ids: Vec<SampleId> = ds.ids().collect();
        let sets = build_test_pairs(&ds, &ids, TestPairMode::Neighboring, 1, 0).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].name, "0-1");
    }

    #[test]
    fn overall_pairs_use_balanced_classes() {
        let mut labels = vec![0u32; 60];
        labels.extend([1; 20]);
        labels.extend([2; 10]);
        labels.extend([3; 5]);
        let ds = dataset(&labels);
        let ids: Vec<SampleId> = ds.ids().collect();
        let sets = build_test_pairs(&ds, &ids, TestPairMode::Overall, 1, 7).unwrap();
        let members: HashSet<SampleId> = sets[0].pairs.iter().flat_map(|p| [p.pair.left, p.pair.right]).collect();
        let counts = class_proportions(&members, &ds, 4);
        assert_eq!(counts, vec![5, 5, 5, 5]);
        assert_eq!(sets, build_test_pairs(&ds, &ids, TestPairMode::Overall, 1, 7).unwrap());
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_score(1.7, 4).unwrap(), 2);
        assert_eq!(quantize_score(-0.3, 4).unwrap(), 0);
        assert_eq!(quantize_score(2.5, 4).unwrap(), 3);
        assert_eq!(quantize_score(2.5, 5).unwrap(), 3);
        assert_eq!(quantize_score(1.5, 4).unwrap(), 2);
        assert_eq!(quantize_score(9.0, 4).unwrap(), 3);
        assert!(quantize_score(f64::NAN, 4).is_err());
    }

    #[test]
    fn classification_examples() {
        let perfect = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(perfect.macro_f1, 1.0);
        assert!(perfect.per_class.iter().all(|m| m.precision == 1.0 && m.recall == 1.0));
        // class 1: TP=2, FP=1, FN=1
        let r = classification_metrics(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], 2).unwrap();
        let c1 = &r.per_class[1];
        for v in [c1.precision, c1.recall, c1.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        let skipped = classification_metrics(&[0, 2], &[0, 2], 3).unwrap();
        assert_eq!(skipped.skipped, vec![1]);
        assert_eq!(skipped.macro_f1, 1.0);
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn zero_division_reports_zero() {
        let r = classification_metrics(&[0, 0], &[1, 1], 2).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].recall, 0.0);
    }

    #[test]
    fn proportions_count_unique_ids() {
        let ds = dataset(&[0; 12]);
        let ten: Vec<SampleId> = (0..10).map(SampleId).collect();
        assert_eq!(class_proportions(&ten, &ds, 1), vec![10]);
        let repeated: Vec<SampleId> = ten.iter().chain(&ten[..3]).copied().collect();
        assert_eq!(class_proportions(&repeated, &ds, 1), vec![10]);
        assert_eq!(class_proportions(&[], &ds, 4), vec![0, 0, 0, 0]);
    }

    #[test]
    fn quartiles_interpolate() {
        let q = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        let one = quartiles(&[0.7]).unwrap();
        assert_eq!((one.min, one.q1, one.median, one.q3, one.max), (0.7, 0.7, 0.7, 0.7, 0.7));
    }

    #[test]
    fn uncertainty_grouped_by_class() {
        let ds = dataset(&[0, 1, 0]);
        let post = |i: u32, v: f64| ScorePosterior { sample: SampleId(i), draws: vec![], mean: 0.0, variance: v };
        let a = uncertainty_by_class(&[post(0, 0.1), post(1, 0.5), post(2, 0.3)], &ds);
        let b = uncertainty_by_class(&[post(2, 0.3), post(1, 0.5), post(0, 0.1)], &ds);
        assert_eq!(a, b);
        assert_eq!(a[&1].median, 0.5);
        assert!((a[&0].median - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(annotation_cost(4106, 2475), 53_606);
        assert_eq!(annotation_cost(0, 8214), 164_280);
        assert_eq!(annotation_cost(1, 1), 21);
    }

    #[test]
    fn mcnemar_examples() {
        assert!((mcnemar_statistic(10, 10) - 0.05).abs() < 1e-15);
        assert_eq!(mcnemar_statistic(0, 0), 0.0);
        assert_eq!(mcnemar_statistic(3, 11), mcnemar_statistic(11, 3));
        let a = [Some(true), Some(false), Some(true), None];
        let b = [Some(false), Some(true), Some(true), Some(true)];
        assert_eq!(discordant_counts(&a, &b), (1, 1));
    }
}
