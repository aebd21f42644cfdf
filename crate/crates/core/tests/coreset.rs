use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;

use vcl::data::LabeledDataset;
use vcl::rng;
use vcl::trainer::{k_center_from, k_center_select, propagation_set, update_coreset, Coreset, CoresetPolicy};
use vcl::Tensor;

fn dist(p: &Tensor, a: usize, b: usize) -> f64 {
    p.row(a).iter().zip(p.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn radius(p: &Tensor, centers: &[usize]) -> f64 {
    (0..p.rows())
        .map(|i| centers.iter().map(|&c| dist(p, i, c)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Smallest covering radius over every k-subset.
fn optimal_radius(p: &Tensor, k: usize) -> f64 {
    fn go(p: &Tensor, k: usize, from: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if chosen.len() == k {
            *best = best.min(radius(p, chosen));
            return;
        }
        for i in from..p.rows() {
            chosen.push(i);
            go(p, k, i + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    go(p, k, 0, &mut Vec::new(), &mut best);
    best
}

fn dataset(seed: u64, n: usize, task: usize) -> LabeledDataset {
    let r = &mut rng::stream(seed, &[]);
    let x = Tensor::randn(&[n, 2], r);
    let labels = (0..n).map(|_| r.gen_range(0..2)).collect();
    LabeledDataset::new(x, labels, 2, task).unwrap()
}

proptest! {
    #[test]
    fn greedy_k_center_is_a_two_approximation(seed in any::<u64>(), n in 2usize..10, k in 1usize..4, first in 0usize..10) {
        let k = k.min(n);
        let p = Tensor::randn(&[n, 2], &mut rng::stream(seed, &[]));
        let centers = k_center_from(&p, k, first % n).unwrap();
        prop_assert_eq!(centers.len(), k);
        prop_assert_eq!(centers.iter().collect::<BTreeSet<_>>().len(), k);
        prop_assert!(radius(&p, &centers) <= 2.0 * optimal_radius(&p, k) + 1e-12);
    }

    #[test]
    fn coreset_grows_by_quota_and_propagation_set_is_the_rest(
        seed in any::<u64>(),
        tasks in 1usize..5,
        k in 0usize..6,
        kcenter in any::<bool>(),
    ) {
        let policy = if kcenter { CoresetPolicy::KCenter } else { CoresetPolicy::Random };
        let mut c = Coreset::new(policy, k);
        for t in 0..tasks {
            let data = dataset(seed ^ t as u64, 12, t);
            let (next, chosen) = update_coreset(&c, &data, policy, k, &mut rng::stream(seed, &[4, t as u64])).unwrap();
            prop_assert_eq!(next.len(), (t + 1) * k);
            prop_assert_eq!(next.keys().len(), next.len());
            prop_assert!(c.keys().is_subset(&next.keys()));
            prop_assert_eq!(chosen.len(), k);
            // multi-head: earlier tasks' points are never evicted, so only D_t minus the picks remains
            let prop = propagation_set(&data, &c, &next, true).unwrap();
            prop_assert_eq!(prop.len(), data.len() - k);
            let picked: BTreeSet<Vec<u64>> = chosen.iter().map(|&i| data.inputs.row(i).iter().map(|v| v.to_bits()).collect()).collect();
            for i in 0..prop.len() {
                let row: Vec<u64> = prop.inputs.row(i).iter().map(|v| v.to_bits()).collect();
                prop_assert!(!picked.contains(&row));
            }
            c = next;
        }
        prop_assert_eq!(c.task_ids(), (0..if k > 0 { tasks } else { 0 }).collect::<Vec<_>>());
    }

    #[test]
    fn selection_is_reproducible(seed in any::<u64>(), k in 1usize..8) {
        let data = dataset(seed, 20, 0);
        for policy in [CoresetPolicy::Random, CoresetPolicy::KCenter] {
            let a = update_coreset(&Coreset::new(policy, k), &data, policy, k, &mut rng::stream(seed, &[4])).unwrap();
            let b = update_coreset(&Coreset::new(policy, k), &data, policy, k, &mut rng::stream(seed, &[4])).unwrap();
            prop_assert_eq!(a.1, b.1);
        }
    }
}

#[test]
fn quota_larger_than_task_is_rejected() {
    let data = dataset(0, 5, 0);
    let c = Coreset::new(CoresetPolicy::Random, 6);
    assert!(update_coreset(&c, &data, CoresetPolicy::Random, 6, &mut rng::stream(0, &[])).is_err());
    assert!(k_center_select(&data.inputs, 6, &mut rng::stream(0, &[])).is_err());
}
