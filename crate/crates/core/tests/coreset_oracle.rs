//! Greedy k-center selection against a brute-force reference.

mod common;

use bayesrank::active::coreset_select;
use bayesrank::data::SampleId;
use bayesrank::seed;
use rand::Rng;

fn pool(points: &[(u32, Vec<f64>)]) -> Vec<(SampleId, Vec<f64>)> {
    points.iter().map(|(id, x)| (SampleId(*id), x.clone())).collect()
}

fn ids(selected: Vec<SampleId>) -> Vec<u32> {
    selected.into_iter().map(|id| id.0).collect()
}

#[test]
fn two_hundred_random_points() {
    for case in 0..5u64 {
        let mut rng = seed::keyed_rng(case, "coreset-points", &[]);
        let dim = 1 + case as usize;
        let points: Vec<(u32, Vec<f64>)> = (0..200)
            .map(|i| (i, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let seeds: Vec<Vec<f64>> = points.iter().take(case as usize).map(|(_, x)| x.clone()).collect();
        // N = 400 and s = 5% give S = 20.
        let fast = ids(coreset_select(&pool(&points), &seeds, 5.0, 400).unwrap());
        let slow = common::brute_force_k_center(&points, &seeds, 20);
        assert_eq!(fast.len(), 20);
        assert_eq!(fast, slow, "case {case}");
    }
}

#[test]
fn ties_on_integer_grid() {
    // Many exactly equal distances: only the lower-id rule separates them.
    let mut rng = seed::keyed_rng(7, "coreset-grid", &[]);
    let mut points: Vec<(u32, Vec<f64>)> = (0..200)
        .map(|i| (i, vec![rng.random_range(0..6) as f64, rng.random_range(0..6) as f64]))
        .collect();
    // Input order must not matter.
    points.reverse();
    for seeds in [vec![], vec![vec![0.0, 0.0]], vec![vec![2.0, 3.0], vec![5.0, 5.0]]] {
        let fast = ids(coreset_select(&pool(&points), &seeds, 5.0, 400).unwrap());
        let mut sorted = points.clone();
        sorted.sort_by_key(|(id, _)| *id);
        let slow = common::brute_force_k_center(&sorted, &seeds, 20);
        assert_eq!(fast, slow);
    }
}

#[test]
fn spec_examples() {
    let points = vec![(0, vec![0.0]), (1, vec![1.0]), (2, vec![10.0])];
    assert_eq!(ids(coreset_select(&pool(&points), &[vec![0.0]], 100.0, 1).unwrap()), vec![2]);
    assert_eq!(ids(coreset_select(&pool(&points), &[vec![0.0]], 100.0, 2).unwrap()), vec![2, 1]);
    assert!(coreset_select(&[], &[], 100.0, 2).is_err());
}
