//! Siamese pairwise ranking (RankNet) with optional regression calibration,
//! and the per-round training procedure.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleId, Source};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, LossSpec, NetworkParams, OptimizerState, PairExample, PairMasks};
use crate::seed;

/// Lower clamp on probabilities inside the logarithms of the rank loss.
pub const LOG_CLAMP: f64 = 1e-15;

/// Relative judgment `C` for an ordered pair `(left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum RelativeLabel {
    /// `C = 0`: right is more severe.
    RightMore,
    /// `C = 0.5`: equal severity.
    Equal,
    /// `C = 1`: left is more severe.
    LeftMore,
}

impl RelativeLabel {
    pub const ALL: [RelativeLabel; 3] = [RelativeLabel::RightMore, RelativeLabel::Equal, RelativeLabel::LeftMore];

    pub fn value(self) -> f64 {
        match self {
            RelativeLabel::RightMore => 0.0,
            RelativeLabel::Equal => 0.5,
            RelativeLabel::LeftMore => 1.0,
        }
    }

    /// The label of the same judgment with the pair reversed.
    pub fn swapped(self) -> Self {
        match self {
            RelativeLabel::RightMore => RelativeLabel::LeftMore,
            RelativeLabel::Equal => RelativeLabel::Equal,
            RelativeLabel::LeftMore => RelativeLabel::RightMore,
        }
    }
}

impl TryFrom<f64> for RelativeLabel {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        match c {
            c if c == 0.0 => Ok(RelativeLabel::RightMore),
            c if c == 0.5 => Ok(RelativeLabel::Equal),
            c if c == 1.0 => Ok(RelativeLabel::LeftMore),
            _ => Err(Error::Validation(format!("relative label {c} is not one of 0, 0.5, 1"))),
        }
    }
}

impl From<RelativeLabel> for f64 {
    fn from(l: RelativeLabel) -> f64 {
        l.value()
    }
}

fn check_label(c: f64) -> Result<()> {
    RelativeLabel::try_from(c).map(|_| ())
}

/// An ordered pair of distinct samples awaiting or carrying a judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelativePair {
    pub left: SampleId,
    pub right: SampleId,
}

impl RelativePair {
    pub fn new(left: SampleId, right: SampleId) -> Result<Self> {
        if left == right {
            return Err(Error::Validation(format!("self-pair on sample {left}")));
        }
        Ok(RelativePair { left, right })
    }

    /// Order-independent identity of the pair.
    pub fn key(&self) -> (SampleId, SampleId) {
        if self.left < self.right {
            (self.left, self.right)
        } else {
            (self.right, self.left)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub pair: RelativePair,
    pub label: RelativeLabel,
    /// Active-learning round in which the pair was annotated.
    pub round: usize,
    pub source: Source,
}

/// Labeled pairs with no duplicate unordered pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPairSet {
    pairs: Vec<LabeledPair>,
    keys: HashSet<(SampleId, SampleId)>,
}

impl LabeledPairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn contains(&self, pair: &RelativePair) -> bool {
        self.keys.contains(&pair.key())
    }

    pub fn contains_key(&self, key: &(SampleId, SampleId)) -> bool {
        self.keys.contains(key)
    }

    pub fn insert(&mut self, labeled: LabeledPair) -> Result<()> {
        if !self.keys.insert(labeled.pair.key()) {
            return Err(Error::Validation(format!(
                "pair ({}, {}) is already labeled",
                labeled.pair.left, labeled.pair.right
            )));
        }
        self.pairs.push(labeled);
        Ok(())
    }

    /// Distinct samples referenced by any pair, ascending.
    pub fn unique_samples(&self) -> Vec<SampleId> {
        let mut ids: Vec<SampleId> = self
            .pairs
            .iter()
            .flat_map(|p| [p.pair.left, p.pair.right])
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }
}

impl FromIterator<LabeledPair> for Result<LabeledPairSet> {
    fn from_iter<I: IntoIterator<Item = LabeledPair>>(iter: I) -> Self {
        let mut set = LabeledPairSet::new();
        for p in iter {
            set.insert(p)?;
        }
        Ok(set)
    }
}

/// Whether a new round starts from the previous round's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainMode {
    Warm,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub multitask: bool,
    pub retrain_mode: RetrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs_per_round: 30,
            learning_rate: 1e-3,
            multitask: false,
            retrain_mode: RetrainMode::Warm,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::Validation("epochs_per_round must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// `P_ij = sigmoid(s_i - s_j)`.
pub fn pair_probability(score_i: f64, score_j: f64) -> Result<f64> {
    if !score_i.is_finite() || !score_j.is_finite() {
        return Err(Error::numerical(None, "non-finite score in pair probability"));
    }
    let d = score_i - score_j;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

/// `ln sigmoid(d)` without overflow.
fn log_sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        -(-d).exp().ln_1p()
    } else {
        d - d.exp().ln_1p()
    }
}

/// Per-pair loss value and its derivatives with respect to both scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub loss: f64,
    pub d_left: f64,
    pub d_right: f64,
}

/// Cross-entropy of one pair, plus squared error to the absolute targets
/// under [`LossSpec::Multitask`].
pub fn pair_terms(si: f64, sj: f64, label: f64, targets: Option<(f64, f64)>, loss: LossSpec) -> Result<PairTerms> {
    check_label(label)?;
    let p = pair_probability(si, sj)?;
    let d = si - sj;
    let floor = LOG_CLAMP.ln();
    let (log_p, log_q) = (log_sigmoid(d), log_sigmoid(-d));
    let mut value = 0.0;
    let mut grad = 0.0;
    if label != 0.0 {
        value -= label * log_p.max(floor);
        if log_p > floor {
            grad -= label * (1.0 - p);
        }
    }
    if label != 1.0 {
        value -= (1.0 - label) * log_q.max(floor);
        if log_q > floor {
            grad += (1.0 - label) * p;
        }
    }
    let mut terms = PairTerms { loss: value, d_left: grad, d_right: -grad };
    if loss == LossSpec::Multitask {
        let (ai, aj) = targets.ok_or_else(|| Error::Validation("multitask loss needs absolute labels".into()))?;
        terms.loss += (si - ai).powi(2) + (sj - aj).powi(2);
        terms.d_left += 2.0 * (si - ai);
        terms.d_right += 2.0 * (sj - aj);
    }
    Ok(terms)
}

/// `-sum [C ln P + (1 - C) ln(1 - P)] + lambda * sum ||W||^2` over scored pairs.
pub fn rank_loss(scores: &[(f64, f64)], labels: &[f64], params: &NetworkParams) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} score pairs for {} labels", scores.len(), labels.len())));
    }
    let mut total = 0.0;
    for (&(si, sj), &c) in scores.iter().zip(labels) {
        total += pair_terms(si, sj, c, None, LossSpec::Rank)?.loss;
    }
    Ok(total + params.penalty())
}

/// `sum (s_i - A_i)^2 + (s_j - A_j)^2`; every sample must carry a label.
pub fn regression_loss(scores: &[(f64, f64)], absolute: &[(Option<f64>, Option<f64>)]) -> Result<f64> {
    if scores.len() != absolute.len() {
        return Err(Error::Validation(format!("{} score pairs for {} label pairs", scores.len(), absolute.len())));
    }
    scores.iter().zip(absolute).try_fold(0.0, |acc, (&(si, sj), &(ai, aj))| match (ai, aj) {
        (Some(ai), Some(aj)) => Ok(acc + (si - ai).powi(2) + (sj - aj).powi(2)),
        _ => Err(Error::Validation("regression loss needs an absolute label for every sample".into())),
    })
}

/// A scored pair with everything the multitask objective needs.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPair {
    pub scores: (f64, f64),
    pub label: f64,
    pub absolute: (Option<f64>, Option<f64>),
}

/// Unweighted sum of the rank loss and the regression loss.
pub fn multitask_loss(batch: &[ScoredPair], params: &NetworkParams, config: &TrainConfig) -> Result<f64> {
    if !config.multitask {
        return Err(Error::Validation("multitask loss requested but multitask mode is off".into()));
    }
    let scores: Vec<(f64, f64)> = batch.iter().map(|p| p.scores).collect();
    let labels: Vec<f64> = batch.iter().map(|p| p.label).collect();
    let absolute: Vec<_> = batch.iter().map(|p| p.absolute).collect();
    Ok(rank_loss(&scores, &labels, params)? + regression_loss(&scores, &absolute)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-pair objective over the epoch's mini-batches (with dropout).
    pub train_loss: f64,
    /// Validation pair accuracy without dropout; absent when undefined.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub n_pairs: usize,
    pub loss: LossSpec,
    /// Mean per-pair objective of the incoming parameters, without dropout.
    pub initial_loss: f64,
    /// Same quantity for the returned parameters.
    pub final_loss: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochStats>,
}

fn examples<'a>(
    pairs: &[LabeledPair],
    dataset: &'a Dataset,
    targets: Option<&HashMap<SampleId, u32>>,
) -> Result<Vec<PairExample<'a>>> {
    pairs
        .iter()
        .map(|p| {
            let (l, r) = (p.pair.left, p.pair.right);
            if dataset.get(l).is_none() || dataset.get(r).is_none() {
                return Err(Error::Validation(format!("pair ({l}, {r}) references an unknown sample")));
            }
            let targets = match targets {
                Some(t) => match (t.get(&l), t.get(&r)) {
                    (Some(&a), Some(&b)) => Some((a as f64, b as f64)),
                    _ => return Err(Error::Validation(format!("missing absolute label for pair ({l}, {r})"))),
                },
                None => None,
            };
            Ok(PairExample {
                left: dataset.features(l),
                right: dataset.features(r),
                label: p.label.value(),
                targets,
            })
        })
        .collect()
}

fn at_epoch(epoch: usize, err: Error) -> Error {
    match err {
        Error::Numerical { layer, message } => Error::Numerical {
            layer,
            message: format!("diverged at epoch {epoch}: {message}"),
        },
        other => other,
    }
}

/// Deterministic scores (no dropout) for every sample referenced by `pairs`.
pub fn deterministic_scores(params: &NetworkParams, dataset: &Dataset, pairs: &[LabeledPair]) -> Result<HashMap<SampleId, f64>> {
    let mut scores = HashMap::new();
    for p in pairs {
        for id in [p.pair.left, p.pair.right] {
            if let std::collections::hash_map::Entry::Vacant(e) = scores.entry(id) {
                e.insert(nn::forward(params, dataset.features(id), None)?);
            }
        }
    }
    Ok(scores)
}

fn validation_accuracy(params: &NetworkParams, dataset: &Dataset, validation: &[LabeledPair]) -> Result<Option<f64>> {
    if validation.is_empty() {
        return Ok(None);
    }
    let scores = deterministic_scores(params, dataset, validation)?;
    match metrics::pair_accuracy(validation, |id| scores[&id]) {
        Ok(acc) => Ok(Some(acc)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Train on `labeled` for `epochs_per_round` epochs of shuffled mini-batches,
/// drawing fresh dropout masks for every forward pass. Returns the
/// parameters of the epoch with the best validation accuracy (earliest on
/// ties; the last epoch when validation accuracy is undefined).
///
/// `targets` supplies absolute labels and switches the objective to the
/// multitask loss; it is required exactly when `config.multitask` is set.
pub fn train_round(
    params: NetworkParams,
    labeled: &LabeledPairSet,
    validation: &[LabeledPair],
    dataset: &Dataset,
    targets: Option<&HashMap<SampleId, u32>>,
    config: &TrainConfig,
    round: usize,
) -> Result<(NetworkParams, RoundReport)> {
    config.validate()?;
    params.validate()?;
    if labeled.is_empty() {
        return Err(Error::Validation("cannot train on an empty pair set".into()));
    }
    if config.multitask != targets.is_some() {
        return Err(Error::Validation(
            "absolute labels must be supplied exactly when multitask mode is on".into(),
        ));
    }
    let loss = if config.multitask { LossSpec::Multitask } else { LossSpec::Rank };
    let all = examples(labeled.pairs(), dataset, targets)?;
    let n = all.len() as f64;
    let initial_loss = nn::objective(&params, &all, None, loss).map_err(|e| at_epoch(0, e))? / n;

    let mut params = params;
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs_per_round);
    let mut best: Option<(f64, usize, NetworkParams)> = None;

    for epoch in 1..=config.epochs_per_round {
        let mut rng = seed::keyed_rng(config.seed, "train-epoch", &[round as u64, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PairExample> = chunk.iter().map(|&k| all[k]).collect();
            let masks: Vec<PairMasks> = batch
                .iter()
                .map(|_| PairMasks {
                    left: nn::sample_masks(&params, &mut rng),
                    right: nn::sample_masks(&params, &mut rng),
                })
                .collect();
            let (value, grads) =
                nn::loss_and_gradients(&params, &batch, Some(&masks), loss).map_err(|e| at_epoch(epoch, e))?;
            if !value.is_finite() {
                return Err(Error::numerical(None, format!("diverged at epoch {epoch}: loss is {value}")));
            }
            epoch_loss += value;
            nn::optimizer_step(&mut params, &grads, &mut opt);
        }
        let val_accuracy = validation_accuracy(&params, dataset, validation).map_err(|e| at_epoch(epoch, e))?;
        epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n,
            val_accuracy,
        });
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((b, _, _)) => score > *b || (val_accuracy.is_none() && *b == f64::NEG_INFINITY),
        };
        if improves {
            best = Some((score, epoch, params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    let final_loss = nn::objective(&params, &all, None, loss)? / n;
    Ok((
        params,
        RoundReport {
            round,
            n_pairs: all.len(),
            loss,
            initial_loss,
            final_loss,
            best_epoch,
            epochs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_network;

    fn tiny() -> NetworkParams {
        init_network(&[2, 3, 1], 1).unwrap()
    }

    #[test]
    fn probability_examples() {
        assert_eq!(pair_probability(1.0, 1.0).unwrap(), 0.5);
        assert!((pair_probability(1.0, 0.0).unwrap() - 0.731_058_578_6).abs() < 1e-9);
        let (a, b) = (pair_probability(0.3, -2.2).unwrap(), pair_probability(-2.2, 0.3).unwrap());
        assert!((a + b - 1.0).abs() < 1e-12);
        let far = pair_probability(700.0, 0.0).unwrap();
        assert!(far.is_finite() && far <= 1.0);
        assert!(pair_probability(-700.0, 0.0).unwrap() > 0.0);
        assert!(matches!(pair_probability(f64::NAN, 0.0), Err(Error::Numerical { .. })));
        assert!(matches!(pair_probability(0.0, f64::INFINITY), Err(Error::Numerical { .. })));
    }

    #[test]
    fn rank_loss_examples() {
        let p = tiny();
        let ln2 = rank_loss(&[(1.0, 1.0)], &[0.5], &p).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = rank_loss(&[(1.0, 0.0)], &[1.0], &p).unwrap();
        assert!((sure - 0.313_261_687_5).abs() < 1e-9);
    }

    #[test]
    fn rank_loss_penalty_only() {
        let p = tiny().with_regularization(0.0, 0.25).unwrap();
        assert_eq!(rank_loss(&[], &[], &p).unwrap(), 0.25 * p.weight_norm_sq());
    }

    #[test]
    fn rank_loss_rejects_illegal_labels() {
        assert!(matches!(rank_loss(&[(0.0, 1.0)], &[0.7], &tiny()), Err(Error::Validation(_))));
        assert!(RelativeLabel::try_from(0.25).is_err());
    }

    #[test]
    fn saturated_pair_is_clamped() {
        let wrong = rank_loss(&[(0.0, 100.0)], &[1.0], &tiny()).unwrap();
        assert!((wrong - (-LOG_CLAMP.ln())).abs() < 1e-9);
        let t = pair_terms(0.0, 100.0, 1.0, None, LossSpec::Rank).unwrap();
        assert_eq!(t.d_left, 0.0);
    }

    #[test]
    fn regression_examples() {
        assert_eq!(regression_loss(&[(1.5, 0.5)], &[(Some(2.0), Some(0.0))]).unwrap(), 0.5);
        assert_eq!(regression_loss(&[(2.0, 1.0)], &[(Some(2.0), Some(1.0))]).unwrap(), 0.0);
        let doubled = regression_loss(&[(1.5, 0.5); 2], &[(Some(2.0), Some(0.0)); 2]).unwrap();
        assert_eq!(doubled, 1.0);
        assert!(matches!(
            regression_loss(&[(1.0, 1.0)], &[(Some(1.0), None)]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn multitask_examples() {
        let p = tiny();
        let on = TrainConfig { multitask: true, ..Default::default() };
        let batch = [ScoredPair { scores: (1.5, 0.5), label: 0.5, absolute: (Some(2.0), Some(0.0)) }];
        // rank term for a score difference of 1 at C = 0.5
        let rank = rank_loss(&[(1.5, 0.5)], &[0.5], &p).unwrap();
        assert!((multitask_loss(&batch, &p, &on).unwrap() - (rank + 0.5)).abs() < 1e-12);
        let exact = [ScoredPair { scores: (1.0, 1.0), label: 0.5, absolute: (Some(1.0), Some(1.0)) }];
        assert_eq!(
            multitask_loss(&exact, &p, &on).unwrap(),
            rank_loss(&[(1.0, 1.0)], &[0.5], &p).unwrap()
        );
        let ln2_case = [ScoredPair { scores: (0.0, 0.0), label: 0.5, absolute: (Some(0.5), Some(-0.5)) }];
        assert!((multitask_loss(&ln2_case, &p, &on).unwrap() - 1.193_147).abs() < 1e-5);
        assert!(matches!(
            multitask_loss(&batch, &p, &TrainConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pair_set_rejects_duplicates_in_either_order() {
        let mut set = LabeledPairSet::new();
        let a = RelativePair::new(SampleId(1), SampleId(2)).unwrap();
        let lp = |pair| LabeledPair { pair, label: RelativeLabel::Equal, round: 0, source: Source::Sim };
        set.insert(lp(a)).unwrap();
        let b = RelativePair::new(SampleId(2), SampleId(1)).unwrap();
        assert!(set.contains(&b));
        assert!(set.insert(lp(b)).is_err());
        assert!(RelativePair::new(SampleId(3), SampleId(3)).is_err());
    }

    #[test]
    fn label_serializes_as_number() {
        assert_eq!(serde_json::to_string(&RelativeLabel::Equal).unwrap(), "0.5");
        let l: RelativeLabel = serde_json::from_str("1.0").unwrap();
        assert_eq!(l, RelativeLabel::LeftMore);
        assert!(serde_json::from_str::<RelativeLabel>("0.7").is_err());
    }

    #[test]
    fn train_round_guards() {
        let ds = Dataset::new(vec![]).unwrap();
        let err = train_round(tiny(), &LabeledPairSet::new(), &[], &ds, None, &TrainConfig::default(), 0);
        assert!(matches!(err, Err(Error::Validation(_))));
        let cfg = TrainConfig { epochs_per_round: 0, ..Default::default() };
        let err = train_round(tiny(), &LabeledPairSet::new(), &[], &ds, None, &cfg, 0);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
