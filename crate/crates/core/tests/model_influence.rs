mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::Rng;

use common::{rng, spearman_oracle, toy_data};
use toprec::influence::{
    dynamic_loop, group_influence, make_groups, user_influence_exact, InfluenceError, LoopConfig, Projector,
};
use toprec::recmodel::{
    local_grad, recommend_topk, train, val_recall, Backbone, ModelParams, TrainConfig, TrainData, TrainTrace, Trainer,
};

/// 5 users, 8 items, 2-3 positives each.
fn tiny() -> TrainData {
    TrainData {
        user_ids: (0..5).map(|u| format!("u{u}")).collect(),
        item_ids: (0..8).map(|i| format!("i{i}")).collect(),
        train: vec![vec![0, 1, 2], vec![1, 3], vec![2, 4, 5], vec![5, 6], vec![0, 7]],
        val: vec![vec![3], vec![0], vec![6], vec![7], vec![1]],
        test: vec![vec![]; 5],
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        neg_ratio: 4,
        epochs_max: 12,
        patience: 100,
        batch_size: 16,
        seed,
        val_k: 3,
        ..TrainConfig::default()
    }
}

fn bits(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn loss_falls_over_the_first_five_epochs() {
    let data = tiny();
    for backbone in [Backbone::Mf, Backbone::Lightgcn] {
        let params = ModelParams::init(&data, backbone, 4, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs_max: 5,
            ..small_cfg(3)
        };
        let (_, _, hist) = train(params, &data, &cfg, TrainTrace::new(2, None), &mut ()).unwrap();
        let losses: Vec<f64> = hist.epochs.iter().map(|e| e.loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{backbone:?} losses {losses:?}");
    }
}

#[test]
fn patience_one_stops_after_a_non_improving_eval() {
    // without validation items the metric is frozen at 0
    let mut data = tiny();
    data.val = vec![vec![]; 5];
    let params = ModelParams::init(&data, Backbone::Mf, 4, 0, 1).unwrap();
    let cfg = TrainConfig {
        patience: 1,
        epochs_max: 50,
        ..small_cfg(1)
    };
    let (_, _, hist) = train(params, &data, &cfg, TrainTrace::new(2, None), &mut ()).unwrap();
    assert_eq!(hist.evals, 2);
    assert_eq!(hist.epochs.len(), 2);
    assert!(hist.stopped_early);
    assert_eq!(hist.best_epoch, 1);
}

#[test]
fn same_seed_gives_byte_identical_parameters() {
    let data = toy_data(12, 30, 6, 5);
    let run = || {
        let p = ModelParams::init(&data, Backbone::Lightgcn, 8, 2, 9).unwrap();
        train(p, &data, &small_cfg(9), TrainTrace::new(2, None), &mut ()).unwrap()
    };
    let (a, _, ha) = run();
    let (b, _, hb) = run();
    assert_eq!(bits(&a.theta), bits(&b.theta));
    assert_eq!(ha, hb);
}

#[test]
fn best_validation_snapshot_is_restored() {
    let data = toy_data(16, 30, 6, 2);
    let p = ModelParams::init(&data, Backbone::Mf, 8, 0, 4).unwrap();
    let cfg = TrainConfig {
        lr: 0.2,
        patience: 4,
        epochs_max: 40,
        val_k: 5,
        ..small_cfg(4)
    };
    let (params, _, hist) = train(p, &data, &cfg, TrainTrace::new(2, None), &mut ()).unwrap();
    let max = hist.epochs.iter().filter_map(|e| e.val_recall).fold(f64::MIN, f64::max);
    assert_eq!(hist.best_val_recall, max);
    assert_eq!(val_recall(&params, &data, cfg.val_k), max);
}

#[test]
fn recorded_deltas_are_projected_differences() {
    let data = toy_data(10, 20, 5, 8);
    let p = ModelParams::init(&data, Backbone::Lightgcn, 4, 2, 8).unwrap();
    let proj = Projector::new(p.n_params(), 16, 5).unwrap();
    let mut t = Trainer::new(p, data, small_cfg(8), TrainTrace::new(4, Some(proj))).unwrap();
    for _ in 0..6 {
        t.step().unwrap();
    }
    let snaps: BTreeMap<usize, Vec<f64>> = t.trace().snapshots().map(|(e, s)| (e, s.to_vec())).collect();
    assert_eq!(snaps.keys().copied().collect::<Vec<_>>(), vec![3, 4, 5, 6]);
    let mut seen = 0;
    for (e, d) in t.trace().deltas() {
        let (Some(prev), Some(cur)) = (snaps.get(&(e - 1)), snaps.get(&e)) else { continue };
        let diff: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
        assert_eq!(bits(&proj.project(&diff).unwrap()), bits(d));
        seen += 1;
    }
    assert_eq!(seen, 3);
}

#[test]
fn lightgcn_without_layers_scores_like_mf() {
    let data = toy_data(8, 15, 5, 1);
    let mf = ModelParams::init(&data, Backbone::Mf, 6, 0, 2).unwrap();
    let gcn = ModelParams::init(&data, Backbone::Lightgcn, 6, 0, 2).unwrap();
    for u in 0..8 {
        for i in 0..15 {
            assert_eq!(mf.score(u, i).unwrap(), gcn.score(u, i).unwrap());
        }
    }
}

#[test]
fn sketch_preserves_inner_products() {
    // correlated pairs keep the exact inner product away from zero
    let p = Projector::new(4096, 512, 11).unwrap();
    let mut r = rng(12);
    let mut errs: Vec<f64> = (0..100)
        .map(|_| {
            let x: Vec<f64> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.7 * v + 0.3 * r.random_range(-1.0..1.0)).collect();
            let exact = dot(&x, &y);
            let approx = dot(&p.project(&x).unwrap(), &p.project(&y).unwrap());
            ((approx - exact) / exact).abs()
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    let median = (errs[49] + errs[50]) / 2.0;
    assert!(median < 0.15, "median relative error {median}");
    assert!(p.project(&[0.0; 4096]).unwrap().iter().all(|v| *v == 0.0));
}

/// User 0 has every item but the last, so its only negative is fixed and the
/// local gradient does not depend on the negative seed.
fn saturated() -> TrainData {
    TrainData {
        user_ids: vec!["u0".into(), "u1".into()],
        item_ids: (0..6).map(|i| format!("i{i}")).collect(),
        train: vec![vec![0, 1, 2, 3, 4], vec![2]],
        val: vec![vec![], vec![3]],
        test: vec![vec![]; 2],
    }
}

#[test]
fn one_step_along_the_gradient_gives_its_squared_norm() {
    let data = saturated();
    let p = ModelParams::init(&data, Backbone::Mf, 4, 0, 6).unwrap();
    let g = local_grad(&p, &data, &[0], 3, 1).unwrap();
    let next: Vec<f64> = p.theta.iter().zip(&g).map(|(a, b)| a + b).collect();
    let mut trace = TrainTrace::new(2, None);
    trace.record(0, &p.theta).unwrap();
    trace.record(1, &next).unwrap();
    let inf = user_influence_exact(0, &p, &data, &trace, 1, 3, 99).unwrap();
    let sq = dot(&g, &g);
    assert!((inf - sq).abs() <= 1e-12 * sq.max(1.0), "{inf} vs {sq}");
}

#[test]
fn single_step_influence_matches_the_recorded_update() {
    let mut data = saturated();
    data.user_ids.truncate(1);
    data.train.truncate(1);
    data.val = vec![vec![5]];
    data.test.truncate(1);
    let p = ModelParams::init(&data, Backbone::Mf, 4, 0, 7).unwrap();
    let cfg = TrainConfig {
        epochs_max: 1,
        ..small_cfg(7)
    };
    let mut t = Trainer::new(p.clone(), data.clone(), cfg, TrainTrace::new(2, None)).unwrap();
    t.step().unwrap();
    let snaps: Vec<Vec<f64>> = t.trace().snapshots().map(|(_, s)| s.to_vec()).collect();
    let delta: Vec<f64> = snaps[1].iter().zip(&snaps[0]).map(|(a, b)| a - b).collect();
    let g = local_grad(&p, &data, &[0], 4, 0).unwrap();
    let want = dot(&g, &delta);
    let got = user_influence_exact(0, &p, &data, t.trace(), 1, 4, 0).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(got < 0.0, "an Adam step against the gradient lowers the loss");
}

fn trained(n_users: usize, dim: usize, proj: Option<usize>, seed: u64) -> (ModelParams, TrainData, TrainTrace) {
    let data = toy_data(n_users, 40, 8, seed);
    let p = ModelParams::init(&data, Backbone::Lightgcn, dim, 2, seed).unwrap();
    let projector = proj.map(|m| Projector::new(p.n_params(), m, seed + 100).unwrap());
    let mut t = Trainer::new(p, data.clone(), TrainConfig { epochs_max: 6, ..small_cfg(seed) }, TrainTrace::new(4, projector)).unwrap();
    while t.step().unwrap() {}
    let params = t.params().clone();
    let (_, trace, _) = t.finish();
    (params, data, trace)
}

#[test]
fn group_influence_is_additive_over_members() {
    let (p, data, trace) = trained(15, 4, None, 3);
    let groups = make_groups(&(0..15).collect::<Vec<_>>(), 4, 3);
    let rep = group_influence(&groups, &p, &data, &trace, 3, 4, 21).unwrap();
    for (g, members) in &groups {
        let sum: f64 = members
            .iter()
            .map(|&u| user_influence_exact(u, &p, &data, &trace, 3, 4, 21).unwrap())
            .sum();
        assert!((rep.per_group[g] - sum).abs() < 1e-6, "group {g}: {} vs {sum}", rep.per_group[g]);
    }
}

#[test]
fn sketched_group_ranking_follows_the_exact_one() {
    let (p, data, trace) = trained(50, 16, Some(512), 5);
    let groups = make_groups(&(0..50).collect::<Vec<_>>(), 10, 5);
    let rep = group_influence(&groups, &p, &data, &trace, 3, 4, 8).unwrap();
    let exact: Vec<f64> = groups
        .values()
        .map(|m| m.iter().map(|&u| user_influence_exact(u, &p, &data, &trace, 3, 4, 8).unwrap()).sum())
        .collect();
    let sketched: Vec<f64> = groups.keys().map(|g| rep.per_group[g]).collect();
    let rho = spearman_oracle(&sketched, &exact);
    assert!(rho >= 0.8, "spearman {rho}");
}

/// One unseen item per selected user.
fn one_new_item(data: &TrainData) -> impl FnMut(&[usize]) -> Result<Vec<(usize, usize)>, InfluenceError> + '_ {
    move |users| {
        Ok(users
            .iter()
            .filter_map(|&u| (0..data.n_items()).find(|i| !data.train[u].contains(&(*i as u32)) && !data.val[u].contains(&(*i as u32))).map(|i| (u, i)))
            .collect())
    }
}

#[test]
fn zero_budget_is_plain_training() {
    let data = toy_data(12, 25, 6, 4);
    let p = ModelParams::init(&data, Backbone::Lightgcn, 4, 2, 4).unwrap();
    let cfg = small_cfg(4);
    let lc = LoopConfig {
        budget_fraction: 0.0,
        ..LoopConfig::default()
    };
    let out = dynamic_loop(p.clone(), data.clone(), &cfg, &lc, one_new_item(&data)).unwrap();
    let (plain, _, hist) = train(p, &data, &cfg, TrainTrace::new(4, None), &mut ()).unwrap();
    assert_eq!(bits(&out.params.theta), bits(&plain.theta));
    assert_eq!(out.history, hist);
    assert!(out.audit.is_empty());
}

#[test]
fn full_round_size_means_one_round() {
    let data = toy_data(12, 25, 6, 6);
    let p = ModelParams::init(&data, Backbone::Mf, 4, 0, 6).unwrap();
    let mut lc = LoopConfig {
        budget_fraction: 0.5,
        groups: 4,
        projection_dim: 32,
        ..LoopConfig::default()
    };
    lc.per_round = Some(lc.total_budget(12));
    let out = dynamic_loop(p, data.clone(), &small_cfg(6), &lc, one_new_item(&data)).unwrap();
    assert_eq!(out.audit.len(), 1);
    assert_eq!(out.augmented_users.len(), 6);
    assert_eq!(out.audit[0].added_interactions, 6);
    assert_eq!(out.data.n_positives(), data.n_positives() + 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mf_scores_scale_quadratically(seed in 0u64..500, c in 0.1f64..5.0) {
        let data = toy_data(6, 12, 4, seed);
        let p = ModelParams::init(&data, Backbone::Mf, 5, 0, seed).unwrap();
        let q = p.with_theta(p.theta.iter().map(|v| v * c).collect());
        let (ep, eq) = (p.embeddings(), q.embeddings());
        for u in 0..6 {
            for i in 0..12 {
                let (a, b) = (ep.score(u, i), eq.score(u, i));
                prop_assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + (c * c * a).abs()));
            }
            let ra = recommend_topk(&ep, u, 5, &BTreeSet::new(), &data.item_ids);
            let rb = recommend_topk(&eq, u, 5, &BTreeSet::new(), &data.item_ids);
            let ia: Vec<usize> = ra.items.iter().map(|x| x.0).collect();
            let ib: Vec<usize> = rb.items.iter().map(|x| x.0).collect();
            prop_assert_eq!(ia, ib);
        }
    }

    #[test]
    fn augmentation_respects_the_budget(
        seed in 0u64..1000,
        frac in 0.0f64..=1.0,
        per_round in prop::option::of(1usize..6),
        groups in 1usize..6,
        interval in 1usize..3,
    ) {
        let data = toy_data(10, 20, 5, seed);
        let p = ModelParams::init(&data, Backbone::Mf, 4, 0, seed).unwrap();
        let cfg = TrainConfig { epochs_max: 8, ..small_cfg(seed) };
        let lc = LoopConfig { k: 2, interval, budget_fraction: frac, per_round, groups, projection_dim: 16, seed };
        let out = dynamic_loop(p, data.clone(), &cfg, &lc, one_new_item(&data)).unwrap();
        let chosen: Vec<&String> = out.audit.iter().flat_map(|r| &r.selected_users).collect();
        let distinct: BTreeSet<&String> = chosen.iter().copied().collect();
        prop_assert_eq!(distinct.len(), chosen.len());
        prop_assert!(chosen.len() <= (frac * 10.0 - 1e-9).ceil().max(0.0) as usize);
        prop_assert_eq!(chosen.len(), out.augmented_users.len());
        for r in &out.audit {
            prop_assert!(r.selected_users.len() <= lc.round_size(10));
        }
    }
}
