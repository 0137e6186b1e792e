mod common;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{rng, random_spd};
use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::rerank::{
    build_dpp_kernel, dpp_greedy_map, min_eigenvalue, mmr_rerank, mmr_select, random_augment, random_augment_user,
    Candidate, DppKernel, RerankError,
};

fn cands(rels: &[f64]) -> Vec<Candidate> {
    rels.iter()
        .enumerate()
        .map(|(i, &rel)| Candidate { item: format!("c{i}"), rel })
        .collect()
}

/// Greedy MMR recomputed from scratch at every step: all remaining
/// candidates are scored against the full selected set, then sorted by
/// (score desc, rel desc, id asc).
fn naive_mmr(c: &[Candidate], sim: &[Vec<f64>], k: usize, lambda: f64) -> Vec<usize> {
    let mut sel: Vec<usize> = Vec::new();
    while sel.len() < k {
        let mut scored: Vec<(f64, usize)> = (0..c.len())
            .filter(|i| !sel.contains(i))
            .map(|i| {
                let s = if sel.is_empty() {
                    c[i].rel
                } else {
                    let red = sel.iter().map(|&j| sim[i][j]).fold(f64::NEG_INFINITY, f64::max);
                    lambda * c[i].rel - (1.0 - lambda) * red
                };
                (s, i)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(c[b.1].rel.total_cmp(&c[a.1].rel))
                .then(c[a.1].item.cmp(&c[b.1].item))
        });
        sel.push(scored[0].1);
    }
    sel
}

#[test]
fn hand_set_mmr_table_matches_the_naive_trace() {
    let c = cands(&[0.95, 0.90, 0.60, 0.55, 0.30]);
    let sim = vec![
        vec![1.0, 0.9, 0.1, 0.3, 0.0],
        vec![0.9, 1.0, 0.2, 0.4, 0.1],
        vec![0.1, 0.2, 1.0, 0.8, 0.2],
        vec![0.3, 0.4, 0.8, 1.0, 0.5],
        vec![0.0, 0.1, 0.2, 0.5, 1.0],
    ];
    let got = mmr_select(&c, &sim, 3, 0.5).unwrap();
    assert_eq!(got, naive_mmr(&c, &sim, 3, 0.5));
    // c0 first; c1 is redundant with it, so the far c2 follows, then c4
    assert_eq!(got, vec![0, 2, 4]);
}

#[test]
fn mmr_relevance_only_is_the_relevance_order() {
    let mut r = rng(3);
    for _ in 0..50 {
        let n = r.random_range(3..20);
        let c = cands(&(0..n).map(|_| r.random_range(0.0..1.0)).collect::<Vec<_>>());
        let emb: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
        let k = r.random_range(1..=n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| c[b].rel.total_cmp(&c[a].rel).then(c[a].item.cmp(&c[b].item)));
        let want: Vec<String> = order[..k].iter().map(|&i| c[i].item.clone()).collect();
        assert_eq!(mmr_rerank(&c, &emb, k, 1.0).unwrap(), want);
    }
}

#[test]
fn mmr_rejects_bad_input() {
    let c = cands(&[0.5, 0.4]);
    let sim = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(matches!(mmr_select(&c, &sim, 3, 0.5), Err(RerankError::KTooLarge { k: 3, n: 2 })));
    assert!(matches!(mmr_select(&c, &sim, 1, 1.5), Err(RerankError::InvalidParam(_))));
    assert!(matches!(mmr_select(&c, &sim[..1], 1, 0.5), Err(RerankError::DimensionMismatch(1, 2))));
}

#[test]
fn built_kernels_are_psd() {
    let mut r = rng(5);
    for _ in 0..40 {
        let n = r.random_range(2..=50);
        let rel: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let emb: Vec<Vec<f32>> = (0..n).map(|_| (0..16).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
        let k = build_dpp_kernel(&rel, &emb, 3.0).unwrap();
        let m = k.matrix();
        assert!((m - m.transpose()).abs().max() == 0.0);
        let min = min_eigenvalue(m);
        assert!(min >= -1e-8, "minimum eigenvalue {min}");
        assert!(DppKernel::from_matrix(m.clone()).is_ok());
    }
}

#[test]
fn unit_quality_kernel_is_the_similarity() {
    let emb = vec![vec![1.0f32, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let k = build_dpp_kernel(&[0.2, 0.7, 0.1], &emb, 0.0).unwrap();
    let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 1.0]);
    assert!((k.matrix() - want).abs().max() < 1e-9);
    assert!(matches!(build_dpp_kernel(&[], &Vec::<Vec<f32>>::new(), 1.0), Err(RerankError::Empty)));
}

#[test]
fn diagonal_kernel_picks_the_largest_entries() {
    let mut r = rng(8);
    for _ in 0..30 {
        let n = r.random_range(2..30);
        let d: Vec<f64> = (0..n).map(|_| r.random_range(0.01..5.0)).collect();
        let k = r.random_range(1..=n);
        let kern = DppKernel::from_matrix(DMatrix::from_diagonal(&DVector::from_vec(d.clone()))).unwrap();
        let got = dpp_greedy_map(&kern, k).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        assert_eq!(got.indices, order[..k].to_vec());
    }
}

#[test]
fn dpp_rejects_k_beyond_n_and_asymmetric_kernels() {
    let kern = DppKernel::from_matrix(DMatrix::identity(3, 3)).unwrap();
    assert!(matches!(dpp_greedy_map(&kern, 4), Err(RerankError::KTooLarge { k: 4, n: 3 })));
    let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    assert!(matches!(DppKernel::from_matrix(skew), Err(RerankError::NotPsd(_))));
}

fn small_dataset(seed: u64) -> toprec::corpus::Dataset {
    let cfg = SynthConfig {
        num_users: 20,
        num_items: 60,
        interactions_per_user: 10,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, seed).unwrap().dataset
}

#[test]
fn random_augment_is_seeded_and_avoids_observed_items() {
    let d = small_dataset(1);
    let a = random_augment(&d, 5, 42);
    assert_eq!(a, random_augment(&d, 5, 42));
    assert_ne!(a, random_augment(&d, 5, 43));
    assert_eq!(a.len(), 5 * d.users().len());
    for row in &a {
        assert!(row.synthetic);
        assert!(!d.observed_items(&row.user).contains(&row.item), "{} already has {}", row.user, row.item);
    }
    assert!(random_augment(&d, 0, 42).is_empty());
    assert!(random_augment_user(&d, d.users().len(), 5, 42).is_empty());
}

#[test]
fn random_augment_caps_at_the_free_items() {
    let d = small_dataset(2);
    let u = &d.users()[0];
    let free = d.items().len() - d.observed_items(&u.id).len();
    let all = random_augment_user(&d, 0, 10_000, 7);
    assert_eq!(all.len(), free);
    let distinct: BTreeSet<&String> = all.iter().map(|r| &r.item).collect();
    assert_eq!(distinct.len(), free);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dpp_gains_never_increase(seed in 0u64..10_000, n in 2usize..30, k in 1usize..10) {
        let mut r = rng(seed);
        let l = random_spd(n, &mut r);
        let kern = DppKernel::from_matrix(DMatrix::from_fn(n, n, |a, b| l[a][b])).unwrap();
        let s = dpp_greedy_map(&kern, k.min(n)).unwrap();
        prop_assert_eq!(s.indices.len(), s.gains.len());
        prop_assert!(s.gains.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "gains {:?}", s.gains);
        prop_assert_eq!(s.indices[0], (0..n).fold(0, |b, i| if l[i][i] > l[b][b] { i } else { b }));
    }

    #[test]
    fn mmr_matches_the_naive_greedy(seed in 0u64..10_000, n in 1usize..15, lambda in 0.0f64..=1.0) {
        let mut r = rng(seed);
        // coarse grid values make ties common
        let c = cands(&(0..n).map(|_| f64::from(r.random_range(0..5u8)) / 4.0).collect::<Vec<_>>());
        let mut sim = vec![vec![1.0; n]; n];
        for (a, b) in (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))) {
            let v = f64::from(r.random_range(0..5u8)) / 4.0;
            sim[a][b] = v;
            sim[b][a] = v;
        }
        let k = r.random_range(1..=n);
        let got = mmr_select(&c, &sim, k, lambda).unwrap();
        prop_assert_eq!(&got, &naive_mmr(&c, &sim, k, lambda));
        prop_assert_eq!(got.iter().collect::<BTreeSet<_>>().len(), k);
    }
}
