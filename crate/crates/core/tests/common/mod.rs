//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bayesrank::nn::{self, LossSpec, NetworkParams, PairExample, PairMasks};
use bayesrank::seed;
use rand::Rng;

/// Central finite-difference check of every weight and bias. Returns the
/// largest relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_gradient_error(
    params: &NetworkParams,
    batch: &[PairExample],
    masks: Option<&[PairMasks]>,
    loss: LossSpec,
    step: f64,
    floor: f64,
) -> f64 {
    let analytic = nn::gradients(params, batch, masks, loss).unwrap();
    let objective = |p: &NetworkParams| nn::objective(p, batch, masks, loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for l in 0..params.weights.len() {
        for k in 0..params.weights[l].len() {
            let orig = probe.weights[l][k];
            probe.weights[l][k] = orig + step;
            let up = objective(&probe);
            probe.weights[l][k] = orig - step;
            let down = objective(&probe);
            probe.weights[l][k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.weights[l][k], numeric, floor));
        }
        for k in 0..params.biases[l].len() {
            let orig = probe.biases[l][k];
            probe.biases[l][k] = orig + step;
            let up = objective(&probe);
            probe.biases[l][k] = orig - step;
            let down = objective(&probe);
            probe.biases[l][k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.biases[l][k], numeric, floor));
        }
    }
    worst
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A random network, batch and mask set for gradient checking.
pub struct GradCase {
    pub params: NetworkParams,
    pub features: Vec<(Vec<f64>, Vec<f64>)>,
    pub labels: Vec<f64>,
    pub targets: Vec<(f64, f64)>,
    pub masks: Vec<PairMasks>,
}

impl GradCase {
    pub fn random(case: u64) -> GradCase {
        let mut rng = seed::keyed_rng(case, "grad-case", &[]);
        let input = rng.random_range(1..6);
        let depth = rng.random_range(1..4);
        let mut sizes = vec![input];
        sizes.extend((0..depth).map(|_| rng.random_range(2..8)));
        sizes.push(1);
        let mut params = nn::init_network(&sizes, case)
            .unwrap()
            .with_regularization(rng.random_range(0.0..0.5), rng.random_range(0.0..0.1))
            .unwrap();
        for b in params.biases.iter_mut().flatten() {
            *b = rng.random_range(-0.5..0.5);
        }
        let n = rng.random_range(1..6);
        let vector = |rng: &mut seed::Rng| (0..input).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let features = (0..n).map(|_| (vector(&mut rng), vector(&mut rng))).collect();
        let labels = (0..n).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect();
        let targets = (0..n)
            .map(|_| (rng.random_range(0..4) as f64, rng.random_range(0..4) as f64))
            .collect();
        let masks = (0..n)
            .map(|_| PairMasks { left: nn::sample_masks(&params, &mut rng), right: nn::sample_masks(&params, &mut rng) })
            .collect();
        GradCase { params, features, labels, targets, masks }
    }

    pub fn batch(&self, with_targets: bool) -> Vec<PairExample<'_>> {
        self.features
            .iter()
            .zip(&self.labels)
            .zip(&self.targets)
            .map(|(((l, r), &label), &t)| PairExample { left: l, right: r, label, targets: with_targets.then_some(t) })
            .collect()
    }
}

/// Largest gradient error over both objectives, with and without masks.
pub fn grad_case_error(case: u64) -> f64 {
    let c = GradCase::random(case);
    let mut worst: f64 = 0.0;
    for (loss, with_targets) in [(LossSpec::Rank, false), (LossSpec::Multitask, true)] {
        let batch = c.batch(with_targets);
        worst = worst.max(max_gradient_error(&c.params, &batch, Some(&c.masks), loss, 1e-5, 1e-4));
        worst = worst.max(max_gradient_error(&c.params, &batch, None, loss, 1e-5, 1e-4));
    }
    worst
}

/// Straightforward greedy k-center: every step recomputes each candidate's
/// distance to every center from scratch.
pub fn brute_force_k_center(points: &[(u32, Vec<f64>)], seeds: &[Vec<f64>], s: usize) -> Vec<u32> {
    let distance = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut centers: Vec<Vec<f64>> = seeds.to_vec();
    let mut chosen: Vec<u32> = Vec::new();
    for _ in 0..s.min(points.len()) {
        let mut best: Option<(f64, u32, usize)> = None;
        for (k, (id, x)) in points.iter().enumerate() {
            if chosen.contains(id) {
                continue;
            }
            let d = centers.iter().map(|c| distance(x, c)).fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d > bd || (d == bd && *id < bid),
            };
            if better {
                best = Some((d, *id, k));
            }
        }
        let (_, id, k) = best.unwrap();
        chosen.push(id);
        centers.push(points[k].1.clone());
    }
    chosen
}
