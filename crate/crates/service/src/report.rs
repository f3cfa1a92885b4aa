//! Metrics of finished runs and their table renderings.

use std::fmt::Write as _;

use bayesrank::active::{evaluate_round, test_pair_sets, test_posteriors, RoundRecord};
use bayesrank::bayes::{self, ScorePosterior};
use bayesrank::metrics::{classification_metrics, quantize_score, ClassificationReport, MetricReport};
use bayesrank::run::{RunConfig, RunDir};
use bayesrank::{seed, Dataset, Error, NetworkParams, Result};

/// Everything loaded from a run directory that evaluation needs.
pub struct FinishedRun {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub split: bayesrank::SplitIds,
    pub round: usize,
    pub params: NetworkParams,
    pub rounds: Vec<RoundRecord>,
}

impl FinishedRun {
    pub fn load(dir: &RunDir) -> Result<Self> {
        let config = dir.read_config()?;
        let (dataset, _) = config.materialize()?;
        let split = dir.read_split(&dataset)?;
        let round = dir
            .last_params_round()
            .ok_or_else(|| Error::Validation(format!("{} holds no trained parameters", dir.path().display())))?;
        let params = dir.read_params(round)?;
        let rounds = dir.read_rounds()?;
        Ok(FinishedRun { config, dataset, split, round, params, rounds })
    }
}

/// Pair accuracies, quantized classification metrics, selection histogram,
/// pool uncertainty and annotation cost of the final parameters.
pub fn evaluate(run: &FinishedRun) -> Result<MetricReport> {
    let settings = &run.config.settings;
    let sets = test_pair_sets(&run.dataset, &run.split.test, settings)?;
    let summary = evaluate_round(&run.params, &run.dataset, &run.split.test, &sets, settings, run.round)?;
    let classification = classify(run)?;
    let last = run.rounds.iter().find(|r| r.round == run.round);
    Ok(MetricReport {
        overall_accuracy: summary.as_ref().and_then(|s| s.overall_accuracy),
        neighboring_accuracies: summary.as_ref().map(|s| s.neighboring.clone()).unwrap_or_default(),
        mean_neighboring: summary.as_ref().and_then(|s| s.mean_neighboring),
        classification,
        class_proportions: last.map(|r| r.selected_class_counts.clone()).unwrap_or_default(),
        uncertainty_stats: last.map(|r| r.pool_uncertainty.clone()).unwrap_or_default(),
        cost_seconds: last.map_or(0, |r| r.cost_seconds),
    })
}

fn classify(run: &FinishedRun) -> Result<Option<ClassificationReport>> {
    let test = &run.split.test;
    if test.is_empty() || test.iter().any(|&id| run.dataset.label(id).is_none()) {
        return Ok(None);
    }
    let k = run.dataset.num_classes();
    let posteriors = test_posteriors(&run.params, &run.dataset, test, &run.config.settings, run.round)?;
    let truth: Vec<u32> = test.iter().map(|&id| run.dataset.label(id).expect("checked")).collect();
    let predicted = posteriors
        .iter()
        .map(|p| quantize_score(p.mean, k))
        .collect::<Result<Vec<u32>>>()?;
    classification_metrics(&truth, &predicted, k).map(Some)
}

/// Posterior of every sample in the dataset under the final parameters.
pub fn all_posteriors(run: &FinishedRun) -> Result<Vec<ScorePosterior>> {
    let cfg = &run.config.settings.loop_config;
    let ids: Vec<_> = run.dataset.ids().collect();
    let mc_seed = seed::derive(cfg.seed, &[seed::tag("report"), run.round as u64]);
    bayes::predict_all(&run.params, &run.dataset, &ids, cfg.mc_draws, mc_seed)
}

pub fn posteriors_csv(dataset: &Dataset, posteriors: &[ScorePosterior]) -> String {
    let mut out = String::from("id,mean,variance\n");
    for p in posteriors {
        let _ = writeln!(out, "{},{:e},{:e}", dataset.sample(p.sample).name, p.mean, p.variance);
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

/// Pair accuracy per round: overall, each adjacent class pair, and their mean.
pub fn accuracy_table(rounds: &[RoundRecord]) -> String {
    let names: Vec<String> = rounds
        .iter()
        .filter_map(|r| r.eval.as_ref())
        .flat_map(|e| e.neighboring.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = format!("{:>5} {:>7} {:>8}", "round", "ratio", "overall");
    for n in &names {
        let _ = write!(out, " {n:>7}");
    }
    out.push_str("    mean\n");
    for r in rounds {
        let eval = r.eval.as_ref();
        let _ = write!(
            out,
            "{:>5} {:>6.1}% {:>8}",
            r.round,
            100.0 * r.labeling_ratio,
            cell(eval.and_then(|e| e.overall_accuracy))
        );
        for n in &names {
            let _ = write!(out, " {:>7}", cell(eval.and_then(|e| e.neighboring.get(n).copied())));
        }
        let _ = writeln!(out, " {:>7}", cell(eval.and_then(|e| e.mean_neighboring)));
    }
    out
}

/// Annotation effort of the run.
pub fn cost_table(rounds: &[RoundRecord]) -> String {
    let mut out = format!("{:>14} {:>15} {:>10} {:>8}\n", "relative pairs", "absolute images", "seconds", "hours");
    if let Some(r) = rounds.last() {
        let _ = writeln!(
            out,
            "{:>14} {:>15} {:>10} {:>8.1}",
            r.labeled_pairs,
            r.absolute_labels,
            r.cost_seconds,
            r.cost_seconds as f64 / 3600.0
        );
    }
    out
}

/// Per-class precision, recall and F1 of quantized scores, with macro averages.
pub fn classification_table(report: &ClassificationReport) -> String {
    let mut out = format!("{:>7} {:>9} {:>7} {:>7} {:>8}\n", "class", "precision", "recall", "f1", "support");
    for m in &report.per_class {
        let _ = writeln!(out, "{:>7} {:>9.3} {:>7.3} {:>7.3} {:>8}", m.class, m.precision, m.recall, m.f1, m.support);
    }
    let _ = writeln!(
        out,
        "{:>7} {:>9.3} {:>7.3} {:>7.3}",
        "macro", report.macro_precision, report.macro_recall, report.macro_f1
    );
    out
}
