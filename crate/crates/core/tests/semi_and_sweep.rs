mod common;

use adadepth::congruency::Regularizer;
use adadepth::evalkit::{evaluate_dataset, EvalConfig};
use adadepth::scenegen::SplitData;
use adadepth::trainkit::{adapt, adapt_semi, sweep_sharing, AdaptConfig, SemiConfig};
use adadepth::Error;
use common::{adapt_cfg, fixture, frozen, SIZE};

#[test]
fn empty_labeled_split_is_a_config_error() {
    let f = fixture();
    let empty = SplitData::from_samples(SIZE, &[]).unwrap();
    let r = adapt_semi(&f.net, &f.source, &f.target, &empty, &adapt_cfg(Regularizer::Dcr, 2), &SemiConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn labeled_and_unlabeled_batches_alternate_strictly() {
    let f = fixture();
    let cfg = adapt_cfg(Regularizer::Fcf, 3);
    for u in [1usize, 2] {
        let semi = SemiConfig {
            k_outer: 7,
            unlabeled_per_labeled: u,
        };
        let out = adapt_semi(&f.net, &f.source, &f.target, &f.target_labeled, &cfg, &semi).unwrap();
        let flags: Vec<bool> = out.log.records.iter().map(|r| r.labeled).collect();
        let expected: Vec<bool> = (0..3).map(|_| false).chain((0..7).map(|j| j % (u + 1) == 0)).collect();
        assert_eq!(flags, expected, "u = {u}");
        assert!(out.bundle.net.store.bit_equal_where(&f.net.store, |a| frozen(a.tag)));
    }
}

#[test]
fn zero_unlabeled_batches_is_supervised_fine_tuning() {
    let f = fixture();
    let cfg = adapt_cfg(Regularizer::Dcr, 0);
    let semi = SemiConfig {
        k_outer: 5,
        unlabeled_per_labeled: 0,
    };
    let out = adapt_semi(&f.net, &f.source, &f.target, &f.target_labeled, &cfg, &semi).unwrap();
    assert_eq!(out.log.records.len(), 5);
    assert!(out.log.records.iter().all(|r| r.labeled && r.l_content > 0.0));
    assert!(out.bundle.net.store.bit_equal_where(&f.net.store, |a| frozen(a.tag)));
    assert!(!out.bundle.net.store.bit_equal(&f.net.store));
}

#[test]
fn singleton_sweep_reproduces_a_plain_run() {
    let f = fixture();
    let cfg = adapt_cfg(Regularizer::Dcr, 4);
    let eval = EvalConfig::default();
    let report = sweep_sharing(&f.net, &f.source, &f.target, &f.target_eval, &[1], &cfg, &eval).unwrap();
    let out = adapt(&f.net, &f.source, &f.target, &cfg).unwrap();
    let direct = evaluate_dataset(&out.bundle.model(), &f.target_eval, &eval).unwrap().aggregate;
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].metrics, direct);
}

#[test]
fn deeper_sharing_trains_more_parameters() {
    let f = fixture();
    let depths = [1, 2, 3, 4];
    // The sweep always runs DCR, whatever the base config names.
    let cfg = AdaptConfig {
        regularizer: Regularizer::Fcf,
        ..adapt_cfg(Regularizer::Dcr, 2)
    };
    let report = sweep_sharing(&f.net, &f.source, &f.target, &f.target_eval, &depths, &cfg, &EvalConfig::default()).unwrap();
    assert_eq!(report.rows.len(), depths.len());
    let rows: Vec<(usize, usize)> = report.rows.iter().map(|r| (r.adapt_depth, r.trainable_params)).collect();
    assert!(rows.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{rows:?}");
    let table = report.to_table();
    assert_eq!(table.lines().count(), depths.len() + 1);
}

#[test]
fn sweep_rejects_depths_the_architecture_lacks() {
    let f = fixture();
    let cfg = adapt_cfg(Regularizer::Dcr, 1);
    let eval = EvalConfig::default();
    for bad in [vec![], vec![1, 5], vec![0]] {
        let r = sweep_sharing(&f.net, &f.source, &f.target, &f.target_eval, &bad, &cfg, &eval);
        assert!(matches!(r, Err(Error::Config(_))), "{bad:?}");
    }
}
