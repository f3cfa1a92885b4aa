//! The active learning loop: random seeding, training rounds, acquisition
//! (uncertainty, random or core-set), pairing and annotation.
//!
//! [`LoopDriver`] exposes the loop one annotation phase at a time so that
//! the same code serves both simulated and human annotators; [`run_loop`]
//! drives it to completion with an [`Annotator`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::bayes::{self, ScorePosterior};
use crate::data::{Annotator, Dataset, SampleId, Source};
use crate::error::{Error, Result};
use crate::metrics::{self, Quartiles, TestPairMode, TestPairSet};
use crate::nn::{self, NetworkParams};
use crate::ranker::{self, LabeledPair, LabeledPairSet, RelativeLabel, RelativePair, RetrainMode, RoundReport, TrainConfig};
use crate::run::RunDir;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Highest Monte Carlo variance first.
    Ubs,
    Random,
    Coreset,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ubs" => Ok(Sampler::Ubs),
            "random" => Ok(Sampler::Random),
            "coreset" => Ok(Sampler::Coreset),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Initial selection, percent of the training set.
    pub r_percent: f64,
    /// Per-round selection, percent of the training set.
    pub s_percent: f64,
    /// Number of acquisition rounds.
    pub rounds: usize,
    /// Monte Carlo draws per sample.
    pub mc_draws: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            r_percent: 20.0,
            s_percent: 5.0,
            rounds: 6,
            mc_draws: bayes::DEFAULT_DRAWS,
            sampler: Sampler::Ubs,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_percent > 0.0 && self.r_percent <= 100.0) {
            return Err(Error::Config(format!("r_percent {} outside (0, 100]", self.r_percent)));
        }
        if !(0.0..=100.0).contains(&self.s_percent) {
            return Err(Error::Config(format!("s_percent {} outside [0, 100]", self.s_percent)));
        }
        let total = self.r_percent + self.s_percent * self.rounds as f64;
        if total > 100.0 + 1e-9 {
            return Err(Error::Config(format!("r + s*K = {total} exceeds 100 percent")));
        }
        if self.mc_draws == 0 {
            return Err(Error::Config("mc_draws must be at least 1".into()));
        }
        Ok(())
    }

    /// Final labeling ratio `r + sK`, in percent.
    pub fn final_ratio_percent(&self) -> f64 {
        self.r_percent + self.s_percent * self.rounds as f64
    }
}

/// Architecture and regularization of the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub weight_decay: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![32, 16],
            dropout_rate: 0.2,
            weight_decay: 1e-4,
        }
    }
}

impl NetConfig {
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<NetworkParams> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        nn::init_network(&sizes, seed)?.with_regularization(self.dropout_rate, self.weight_decay)
    }
}

/// `round(percent * n / 100)` with halves rounded up.
pub fn quota(percent: f64, n: usize) -> usize {
    // The epsilon absorbs representation error such as 0.15 * 1000 / 100.
    (percent * n as f64 / 100.0 + 0.5 + 1e-9).floor() as usize
}

/// Uniform sample of `round(r% * N)` training ids without replacement,
/// returned in ascending order.
pub fn initial_selection(train_ids: &[SampleId], r_percent: f64, rng: &mut seed::Rng) -> Result<Vec<SampleId>> {
    let r = quota(r_percent, train_ids.len());
    if r < 2 {
        return Err(Error::Config(format!(
            "initial selection of {r_percent}% of {} samples yields {r} < 2 images",
            train_ids.len()
        )));
    }
    let mut chosen: Vec<SampleId> = train_ids.choose_multiple(rng, r.min(train_ids.len())).copied().collect();
    chosen.sort();
    Ok(chosen)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<RelativePair>,
    /// Selected ids for which no new pair could be formed.
    pub skipped: Vec<SampleId>,
}

fn try_partner(
    id: SampleId,
    candidates: &[SampleId],
    existing: &LabeledPairSet,
    taken: &HashSet<(SampleId, SampleId)>,
    rng: &mut seed::Rng,
) -> Option<RelativePair> {
    let mut order: Vec<SampleId> = candidates.iter().copied().filter(|&c| c != id).collect();
    order.shuffle(rng);
    order.into_iter().find_map(|partner| {
        let pair = RelativePair { left: id, right: partner };
        let key = pair.key();
        (!existing.contains_key(&key) && !taken.contains(&key)).then_some(pair)
    })
}

/// One pair per selected id with a uniformly drawn partner from the other
/// selected ids. A partner that would duplicate a labeled or already formed
/// pair is redrawn (each other id tried at most once), then the `fallback`
/// ids are tried the same way; if all fail the id is skipped with a warning.
pub fn make_pairs(
    selected: &[SampleId],
    existing: &LabeledPairSet,
    fallback: &[SampleId],
    rng: &mut seed::Rng,
) -> Result<Pairing> {
    if selected.len() < 2 && fallback.is_empty() {
        return Err(Error::Pairing(format!("need at least two images to pair, got {}", selected.len())));
    }
    let mut out = Pairing::default();
    let mut taken = HashSet::new();
    for &id in selected {
        let pair = try_partner(id, selected, existing, &taken, rng)
            .or_else(|| try_partner(id, fallback, existing, &taken, rng));
        match pair {
            Some(p) => {
                taken.insert(p.key());
                out.pairs.push(p);
            }
            None => {
                warn!("no unlabeled partner left for sample {id}; skipping");
                out.skipped.push(id);
            }
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::Pairing("every candidate pair is already labeled".into()));
    }
    Ok(out)
}

fn selection_size(s_percent: f64, n: usize) -> Result<usize> {
    let s = quota(s_percent, n);
    if s < 1 {
        return Err(Error::Config(format!("selecting {s_percent}% of {n} samples yields no images")));
    }
    Ok(s)
}

/// The `round(s% * N)` most uncertain samples of the pool.
pub fn select_uncertain(posteriors: &[ScorePosterior], s_percent: f64, n: usize) -> Result<Vec<SampleId>> {
    let s = selection_size(s_percent, n)?;
    let mut ranked = bayes::acquisition_rank(posteriors);
    ranked.truncate(s);
    Ok(ranked)
}

/// `round(s% * N)` pool members drawn uniformly without replacement.
pub fn random_select(pool: &[SampleId], s_percent: f64, n: usize, rng: &mut seed::Rng) -> Result<Vec<SampleId>> {
    let s = selection_size(s_percent, n)?;
    if pool.is_empty() {
        return Err(Error::Config("selection pool is empty".into()));
    }
    let mut sorted = pool.to_vec();
    sorted.sort();
    Ok(sorted.choose_multiple(rng, s.min(sorted.len())).copied().collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center: repeatedly take the pool point farthest from its
/// nearest center, starting from `centers`. Ties go to the lower id. With no
/// initial centers the first pick is the lowest id.
pub fn coreset_select(
    pool: &[(SampleId, Vec<f64>)],
    centers: &[Vec<f64>],
    s_percent: f64,
    n: usize,
) -> Result<Vec<SampleId>> {
    let s = selection_size(s_percent, n)?;
    if pool.is_empty() {
        return Err(Error::Config("selection pool is empty".into()));
    }
    let mut points: Vec<&(SampleId, Vec<f64>)> = pool.iter().collect();
    points.sort_by_key(|(id, _)| *id);
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|(_, x)| {
            centers
                .iter()
                .map(|c| squared_distance(x, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut chosen = Vec::with_capacity(s);
    let mut used = vec![false; points.len()];
    for _ in 0..s.min(points.len()) {
        let mut best: Option<usize> = None;
        for (k, &d) in nearest.iter().enumerate() {
            if used[k] {
                continue;
            }
            if best.is_none_or(|b| d > nearest[b]) {
                best = Some(k);
            }
        }
        let b = best.expect("unused point remains");
        used[b] = true;
        chosen.push(points[b].0);
        let center = &points[b].1;
        for (k, (_, x)) in points.iter().enumerate() {
            nearest[k] = nearest[k].min(squared_distance(x, center));
        }
    }
    Ok(chosen)
}

/// Fixed train/validation/test membership for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<SampleId>,
    pub val: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

impl From<crate::data::Split> for SplitIds {
    fn from(s: crate::data::Split) -> Self {
        SplitIds { train: s.train, val: s.val, test: s.test }
    }
}

/// Test-set pair accuracies after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall_accuracy: Option<f64>,
    pub neighboring: BTreeMap<String, f64>,
    pub mean_neighboring: Option<f64>,
}

/// Everything recorded about one round; one line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampler: Sampler,
    pub selected: usize,
    pub new_pairs: usize,
    pub skipped: usize,
    pub labeled_pairs: usize,
    pub labeling_ratio: f64,
    /// Distinct images with an absolute label so far.
    pub absolute_labels: usize,
    pub cost_seconds: u64,
    pub train: RoundReport,
    pub eval: Option<EvalSummary>,
    /// Label histogram over all distinct images selected so far.
    pub selected_class_counts: Vec<usize>,
    /// Variance statistics of the training pool per class after this round's training.
    pub pool_uncertainty: BTreeMap<u32, Quartiles>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub labeled: LabeledPairSet,
    pub selected_ids_by_round: Vec<Vec<SampleId>>,
    pub params: NetworkParams,
    pub metrics_by_round: Vec<RoundRecord>,
    /// `(round, id)` for every selected image that could not be paired.
    pub skipped: Vec<(usize, SampleId)>,
    /// Posteriors over the training pool after the most recent training.
    pub pool_posteriors: Vec<ScorePosterior>,
}

impl LoopState {
    /// Distinct images selected in any round, ascending.
    pub fn accumulated_selection(&self) -> Vec<SampleId> {
        self.selected_ids_by_round
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// New pairs await annotation.
    Collecting,
    Done,
}

/// Settings of a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Settings {
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub train: TrainConfig,
    pub net: NetConfig,
    /// Independent balanced pairings averaged into the overall test set.
    pub overall_test_repeats: usize,
}

/// The loop as a resumable state machine.
pub struct LoopDriver<'a> {
    dataset: &'a Dataset,
    split: SplitIds,
    settings: Settings,
    state: LoopState,
    round: usize,
    pending: Vec<RelativePair>,
    answers: Vec<Option<(RelativeLabel, Source)>>,
    validation: Vec<LabeledPair>,
    test_sets: Vec<TestPairSet>,
    absolute: BTreeMap<SampleId, u32>,
    done: bool,
    run_dir: Option<RunDir>,
}

impl<'a> LoopDriver<'a> {
    /// Validate settings, build evaluation pairs and perform the initial
    /// random selection and pairing.
    pub fn new(dataset: &'a Dataset, split: SplitIds, settings: Settings, run_dir: Option<RunDir>) -> Result<Self> {
        settings.loop_config.validate()?;
        settings.train.validate()?;
        if split.train.len() < 2 {
            return Err(Error::Config("training split needs at least two samples".into()));
        }
        let seed = settings.loop_config.seed;
        let params = settings.net.build(dataset.feature_dim(), seed::derive(seed, &[seed::tag("net")]))?;

        let validation = if split.val.iter().all(|&id| dataset.label(id).is_some()) && split.val.len() >= 2 {
            let mut rng = seed::keyed_rng(seed, "validation-pairs", &[]);
            let pairing = make_pairs(&split.val, &LabeledPairSet::new(), &[], &mut rng)?;
            pairing
                .pairs
                .into_iter()
                .map(|pair| {
                    Ok(LabeledPair {
                        pair,
                        label: crate::data::oracle_relative((pair.left, pair.right), dataset)?,
                        round: 0,
                        source: Source::Sim,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let test_sets = test_pair_sets(dataset, &split.test, &settings)?;

        let mut rng = seed::keyed_rng(seed, "initial-selection", &[]);
        let selected = initial_selection(&split.train, settings.loop_config.r_percent, &mut rng)?;
        let mut driver = LoopDriver {
            dataset,
            split,
            settings,
            state: LoopState {
                labeled: LabeledPairSet::new(),
                selected_ids_by_round: Vec::new(),
                params,
                metrics_by_round: Vec::new(),
                skipped: Vec::new(),
                pool_posteriors: Vec::new(),
            },
            round: 0,
            pending: Vec::new(),
            answers: Vec::new(),
            validation,
            test_sets,
            absolute: BTreeMap::new(),
            done: false,
            run_dir,
        };
        if let Some(dir) = &driver.run_dir {
            dir.write_split(dataset, &driver.split)?;
        }
        driver.queue_round(selected, None)?;
        Ok(driver)
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn split(&self) -> &SplitIds {
        &self.split
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn into_state(self) -> LoopState {
        self.state
    }

    /// Index of the round whose pairs are being collected (or the last round once done).
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn pending(&self) -> &[RelativePair] {
        &self.pending
    }

    pub fn answer(&self, slot: usize) -> Option<(RelativeLabel, Source)> {
        self.answers.get(slot).copied().flatten()
    }

    /// Index of the first pending pair that has no answer yet.
    pub fn next_unanswered(&self) -> Option<usize> {
        self.answers.iter().position(Option::is_none)
    }

    pub fn outstanding(&self) -> usize {
        self.answers.iter().filter(|a| a.is_none()).count()
    }

    pub fn training_size(&self) -> usize {
        self.split.train.len()
    }

    pub fn labeling_ratio(&self) -> f64 {
        self.state.labeled.len() as f64 / self.split.train.len() as f64
    }

    fn queue_round(&mut self, selected: Vec<SampleId>, variances: Option<&HashMap<SampleId, f64>>) -> Result<()> {
        let fallback = self.state.accumulated_selection();
        let mut rng = seed::keyed_rng(self.settings.loop_config.seed, "pairing", &[self.round as u64]);
        let pairing = make_pairs(&selected, &self.state.labeled, &fallback, &mut rng)?;
        if let Some(dir) = &self.run_dir {
            dir.append_selections(self.dataset, self.round, &selected, variances)?;
        }
        self.state.skipped.extend(pairing.skipped.iter().map(|&id| (self.round, id)));
        self.state.selected_ids_by_round.push(selected);
        self.answers = vec![None; pairing.pairs.len()];
        self.pending = pairing.pairs;
        Ok(())
    }

    /// Record the judgment for pending slot `slot`. The first answer wins.
    pub fn submit(&mut self, slot: usize, label: RelativeLabel, source: Source) -> Result<()> {
        if self.done {
            return Err(Error::Validation("the loop has finished".into()));
        }
        let answer = self
            .answers
            .get_mut(slot)
            .ok_or_else(|| Error::Validation(format!("no pending pair in slot {slot}")))?;
        if answer.is_some() {
            return Err(Error::Validation(format!("pair in slot {slot} is already labeled")));
        }
        *answer = Some((label, source));
        Ok(())
    }

    /// Label every outstanding pair with `annotator`.
    pub fn annotate_pending(&mut self, annotator: &mut dyn Annotator) -> Result<()> {
        for slot in 0..self.pending.len() {
            if self.answers[slot].is_none() {
                let label = annotator.relative(&self.pending[slot])?;
                self.answers[slot] = Some((label, annotator.source()));
            }
        }
        Ok(())
    }

    /// Commit the answered round, train, and either queue the next round's
    /// pairs or finish. `absolute` answers absolute-label queries in
    /// multitask mode.
    pub fn advance(&mut self, absolute: Option<&mut dyn Annotator>) -> Result<Progress> {
        if self.done {
            return Ok(Progress::Done);
        }
        if self.outstanding() > 0 {
            return Err(Error::Validation(format!("{} pairs still await labels", self.outstanding())));
        }
        let round = self.round;
        let committed: Vec<LabeledPair> = self
            .pending
            .iter()
            .zip(&self.answers)
            .map(|(&pair, a)| {
                let (label, source) = a.expect("all answered");
                LabeledPair { pair, label, round, source }
            })
            .collect();
        for lp in &committed {
            self.state.labeled.insert(*lp)?;
        }
        if let Some(dir) = &self.run_dir {
            dir.append_pairs(self.dataset, &committed)?;
        }
        self.pending.clear();
        self.answers.clear();

        let cfg = &self.settings;
        let last = round == cfg.loop_config.rounds;
        let multitask = cfg.train.multitask && last;
        if multitask {
            let annotator = absolute.ok_or_else(|| {
                Error::Validation("multitask training needs an absolute-label annotator".into())
            })?;
            for id in self.state.labeled.unique_samples() {
                let answer = annotator.absolute(id)?;
                self.absolute.insert(id, answer.label);
            }
        }

        let seed = cfg.loop_config.seed;
        let mut params = self.state.params.clone();
        if cfg.train.retrain_mode == RetrainMode::Scratch && round > 0 {
            params = cfg
                .net
                .build(self.dataset.feature_dim(), seed::derive(seed, &[seed::tag("net"), round as u64]))?;
        }
        let mut train_cfg = cfg.train.clone();
        train_cfg.multitask = multitask;
        let targets: Option<HashMap<SampleId, u32>> =
            multitask.then(|| self.absolute.iter().map(|(&k, &v)| (k, v)).collect());
        let (params, report) = ranker::train_round(
            params,
            &self.state.labeled,
            &self.validation,
            self.dataset,
            targets.as_ref(),
            &train_cfg,
            round,
        )?;
        self.state.params = params;
        if let Some(dir) = &self.run_dir {
            dir.write_params(round, &self.state.params)?;
        }

        let draws = cfg.loop_config.mc_draws;
        let mc_seed = seed::derive(seed, &[seed::tag("mc"), round as u64]);
        let posteriors = bayes::predict_all(&self.state.params, self.dataset, &self.split.train, draws, mc_seed)?;
        let eval = self.evaluate(round)?;

        let accumulated = self.state.accumulated_selection();
        let num_classes = self.dataset.num_classes();
        let pool_uncertainty = metrics::uncertainty_by_class(&posteriors, self.dataset);
        let round_selected = self.state.selected_ids_by_round.last().map_or(0, Vec::len);
        let record = RoundRecord {
            round,
            sampler: cfg.loop_config.sampler,
            selected: round_selected,
            new_pairs: committed.len(),
            skipped: self.state.skipped.iter().filter(|(r, _)| *r == round).count(),
            labeled_pairs: self.state.labeled.len(),
            labeling_ratio: self.labeling_ratio(),
            absolute_labels: self.absolute.len(),
            cost_seconds: metrics::annotation_cost(self.state.labeled.len() as u64, self.absolute.len() as u64),
            train: report,
            eval,
            selected_class_counts: metrics::class_proportions(&accumulated, self.dataset, num_classes),
            pool_uncertainty,
        };
        if let Some(dir) = &self.run_dir {
            dir.append_round(&record)?;
        }
        self.state.metrics_by_round.push(record);
        self.state.pool_posteriors = posteriors;

        if last {
            self.done = true;
            return Ok(Progress::Done);
        }
        self.round += 1;
        let selected = self.select_next()?;
        let variances: HashMap<SampleId, f64> =
            self.state.pool_posteriors.iter().map(|p| (p.sample, p.variance)).collect();
        self.queue_round(selected, Some(&variances))?;
        Ok(Progress::Collecting)
    }

    fn select_next(&self) -> Result<Vec<SampleId>> {
        let cfg = &self.settings.loop_config;
        let n = self.split.train.len();
        match cfg.sampler {
            Sampler::Ubs => select_uncertain(&self.state.pool_posteriors, cfg.s_percent, n),
            Sampler::Random => {
                let mut rng = seed::keyed_rng(cfg.seed, "random-select", &[self.round as u64]);
                random_select(&self.split.train, cfg.s_percent, n, &mut rng)
            }
            Sampler::Coreset => {
                let embed = |id: SampleId| nn::embed(&self.state.params, self.dataset.features(id));
                let pool = self
                    .split
                    .train
                    .iter()
                    .map(|&id| Ok((id, embed(id)?)))
                    .collect::<Result<Vec<_>>>()?;
                let centers = self
                    .state
                    .accumulated_selection()
                    .into_iter()
                    .map(embed)
                    .collect::<Result<Vec<_>>>()?;
                coreset_select(&pool, &centers, cfg.s_percent, n)
            }
        }
    }

    fn evaluate(&self, round: usize) -> Result<Option<EvalSummary>> {
        evaluate_round(&self.state.params, self.dataset, &self.split.test, &self.test_sets, &self.settings, round)
    }

    /// Ground-truth test pairs used for evaluation.
    pub fn test_sets(&self) -> &[TestPairSet] {
        &self.test_sets
    }
}

/// The run's ground-truth test pair sets: one balanced overall set and one
/// set per adjacent class pair. Empty when the test split is unlabeled.
pub fn test_pair_sets(dataset: &Dataset, test: &[SampleId], settings: &Settings) -> Result<Vec<TestPairSet>> {
    let mut sets = Vec::new();
    if !test.is_empty() && test.iter().all(|&id| dataset.label(id).is_some()) {
        let seed = settings.loop_config.seed;
        let repeats = settings.overall_test_repeats.max(1);
        sets.extend(metrics::build_test_pairs(dataset, test, TestPairMode::Overall, repeats, seed)?);
        sets.extend(metrics::build_test_pairs(dataset, test, TestPairMode::Neighboring, 1, seed)?);
    }
    Ok(sets)
}

/// Monte Carlo mean scores of the test split after `round`, with the same
/// draws the loop uses for its own evaluation.
pub fn test_posteriors(
    params: &NetworkParams,
    dataset: &Dataset,
    test: &[SampleId],
    settings: &Settings,
    round: usize,
) -> Result<Vec<ScorePosterior>> {
    let cfg = &settings.loop_config;
    let mc_seed = seed::derive(cfg.seed, &[seed::tag("eval"), round as u64]);
    bayes::predict_all(params, dataset, test, cfg.mc_draws, mc_seed)
}

/// Pair accuracies of `params` on every test set; sets whose accuracy is
/// undefined are left out. `None` when there are no test sets.
pub fn evaluate_round(
    params: &NetworkParams,
    dataset: &Dataset,
    test: &[SampleId],
    test_sets: &[TestPairSet],
    settings: &Settings,
    round: usize,
) -> Result<Option<EvalSummary>> {
    if test_sets.is_empty() {
        return Ok(None);
    }
    let posteriors = test_posteriors(params, dataset, test, settings, round)?;
    let scores: HashMap<SampleId, f64> = posteriors.iter().map(|p| (p.sample, p.mean)).collect();
    let score = |id: SampleId| scores[&id];
    let mut summary = EvalSummary { overall_accuracy: None, neighboring: BTreeMap::new(), mean_neighboring: None };
    for set in test_sets {
        let acc = match metrics::pair_accuracy(&set.pairs, score) {
            Ok(a) => a,
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        };
        if set.name == "overall" {
            summary.overall_accuracy = Some(acc);
        } else {
            summary.neighboring.insert(set.name.clone(), acc);
        }
    }
    if !summary.neighboring.is_empty() {
        summary.mean_neighboring = Some(summary.neighboring.values().sum::<f64>() / summary.neighboring.len() as f64);
    }
    Ok(Some(summary))
}

/// Run the whole loop against a single annotator.
pub fn run_loop(
    dataset: &Dataset,
    split: SplitIds,
    oracle: &mut dyn Annotator,
    settings: Settings,
    run_dir: Option<RunDir>,
) -> Result<LoopState> {
    let mut driver = LoopDriver::new(dataset, split, settings, run_dir)?;
    loop {
        driver.annotate_pending(oracle)?;
        if driver.advance(Some(oracle))? == Progress::Done {
            return Ok(driver.into_state());
        }
    }
}
