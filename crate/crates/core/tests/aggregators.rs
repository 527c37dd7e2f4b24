use fedrec_core::aggregation::{
    aggregate_item, aggregate_item_krum, aggregate_item_mean, aggregate_item_median,
    aggregate_item_norm_clip, aggregate_item_trimmed_mean, sparse_aggregate_and_apply,
    AggregatorKind, AggregatorSpec, SparseRoundUpdate,
};
use fedrec_core::model::Embeddings;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random gradients; roughly a third of coordinates are small integers so
/// ties show up regularly.
fn instance(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=9);
    let dim = rng.random_range(1..=8);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(-3..=3) as f64
                    } else {
                        rng.random_range(-10.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|g| g.as_slice()).collect()
}

fn column(grads: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut c: Vec<f64> = grads.iter().map(|g| g[k]).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c
}

fn oracle_median(grads: &[Vec<f64>]) -> Vec<f64> {
    let n = grads.len();
    (0..grads[0].len())
        .map(|k| {
            let c = column(grads, k);
            if n % 2 == 1 {
                c[n / 2]
            } else {
                0.5 * (c[n / 2 - 1] + c[n / 2])
            }
        })
        .collect()
}

fn oracle_trimmed(grads: &[Vec<f64>], t: usize) -> Vec<f64> {
    let n = grads.len();
    (0..grads[0].len())
        .map(|k| {
            let c = column(grads, k);
            let kept = &c[t..n - t];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn oracle_krum(grads: &[Vec<f64>], f: usize) -> usize {
    let n = grads.len();
    let d = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(&grads[i], &grads[j])).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds.iter().take(n - f - 2).sum()
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    scores.iter().position(|&s| s == best).unwrap()
}

fn oracle_clip(grads: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let clipped: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = (tau / norm).min(1.0);
            g.iter().map(|x| x * s).collect()
        })
        .collect();
    (0..grads[0].len())
        .map(|k| clipped.iter().map(|g| g[k]).sum::<f64>() / grads.len() as f64)
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn aggregators_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut krum_checked = 0;
    for _ in 0..1000 {
        let grads = instance(&mut rng);
        let n = grads.len();
        let r = refs(&grads);

        assert_close(&aggregate_item_median(&r).unwrap(), &oracle_median(&grads), 1e-12);

        let t = rng.random_range(0..=(n - 1) / 2);
        assert_close(&aggregate_item_trimmed_mean(&r, t).unwrap(), &oracle_trimmed(&grads, t), 1e-12);
        assert!(aggregate_item_trimmed_mean(&r, n.div_ceil(2)).is_err());

        if n >= 3 {
            let f = rng.random_range(0..=n - 3);
            let chosen = oracle_krum(&grads, f);
            assert_eq!(aggregate_item_krum(&r, f).unwrap(), grads[chosen]);
            krum_checked += 1;
        }
        assert!(aggregate_item_krum(&r, n.saturating_sub(2)).is_err());

        let tau = rng.random_range(0.1..20.0);
        assert_close(&aggregate_item_norm_clip(&r, tau).unwrap(), &oracle_clip(&grads, tau), 1e-12);
    }
    assert!(krum_checked > 500);
}

#[test]
fn median_bounded_by_benign_range_under_minority() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let dim = rng.random_range(1..=8);
        let benign_n = rng.random_range(1..=9);
        let malicious_n = rng.random_range(0..benign_n);
        let benign: Vec<Vec<f64>> = (0..benign_n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut all = benign.clone();
        for _ in 0..malicious_n {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            all.push((0..dim).map(|_| sign * rng.random_range(1e3..1e9)).collect());
        }
        all.shuffle(&mut rng);
        let m = aggregate_item_median(&refs(&all)).unwrap();
        for k in 0..dim {
            let c = column(&benign, k);
            assert!(c[0] <= m[k] && m[k] <= c[benign_n - 1]);
        }
    }
}

#[test]
fn permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let grads = instance(&mut rng);
        let mut shuffled = grads.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = (refs(&grads), refs(&shuffled));
        assert_close(&aggregate_item_mean(&a).unwrap(), &aggregate_item_mean(&b).unwrap(), 1e-12);
        assert_eq!(aggregate_item_median(&a).unwrap(), aggregate_item_median(&b).unwrap());
        let t = (grads.len() - 1) / 2;
        assert_close(
            &aggregate_item_trimmed_mean(&a, t).unwrap(),
            &aggregate_item_trimmed_mean(&b, t).unwrap(),
            1e-12,
        );
        assert_close(
            &aggregate_item_norm_clip(&a, 1.0).unwrap(),
            &aggregate_item_norm_clip(&b, 1.0).unwrap(),
            1e-12,
        );
    }
}

#[test]
fn mean_cancels_negated_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let mut grads = instance(&mut rng);
        let dim = grads[0].len();
        let neg_sum: Vec<f64> = (0..dim).map(|k| -grads.iter().map(|g| g[k]).sum::<f64>()).collect();
        grads.push(neg_sum);
        for x in aggregate_item_mean(&refs(&grads)).unwrap() {
            assert!(x.abs() <= 1e-9);
        }
    }
}

#[test]
fn sparse_apply_equals_independent_item_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n_items, dim, n_clients) = (15, 4, 12);
    let items: Vec<Vec<f64>> = (0..n_items)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut update = SparseRoundUpdate::new(n_items, dim);
    let mut lists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_items];
    for client in 0..n_clients {
        for (j, list) in lists.iter_mut().enumerate() {
            if rng.random_bool(0.4) {
                let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                update.push(j, client, &g);
                list.push(g);
            }
        }
    }
    for kind in [
        AggregatorKind::Mean,
        AggregatorKind::Median,
        AggregatorKind::TrimmedMean,
        AggregatorKind::Krum,
        AggregatorKind::NormClip,
    ] {
        let spec = AggregatorSpec {
            trim_count: 1,
            assumed_byzantine: 1,
            ..AggregatorSpec::new(kind)
        };
        let mut applied = Embeddings::from_rows(&items);
        let round = sparse_aggregate_and_apply(&update, &spec, &mut applied, 0.1).unwrap();
        let mut expected = Embeddings::from_rows(&items);
        let mut fallbacks = 0;
        for j in (0..n_items).rev() {
            if lists[j].is_empty() {
                continue;
            }
            let agg = aggregate_item(&spec, &refs(&lists[j])).unwrap();
            fallbacks += agg.fallback as usize;
            for (v, g) in expected.row_mut(j).iter_mut().zip(&agg.value) {
                *v -= 0.1 * g;
            }
        }
        assert_eq!(applied, expected, "{kind:?}");
        assert_eq!(round.log.iter().filter(|e| e.fallback).count(), fallbacks);
        assert_eq!(round.log.len(), lists.iter().filter(|l| !l.is_empty()).count());
    }
}

#[test]
fn empty_update_leaves_items_unchanged() {
    let rows = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
    let mut items = Embeddings::from_rows(&rows);
    let update = SparseRoundUpdate::new(2, 2);
    let round = sparse_aggregate_and_apply(&update, &AggregatorSpec::new(AggregatorKind::Median), &mut items, 0.5).unwrap();
    assert!(round.log.is_empty());
    assert_eq!(items, Embeddings::from_rows(&rows));
}
