mod common;

use std::fs;

use adadepth::congruency::Regularizer;
use adadepth::trainkit::{adapt, checkpoint, load_model, restore, run_adaptation, AdaptFeatures, CHECKPOINT_VERSION};
use adadepth::Error;
use common::{adapt_cfg, fixture, probe};

#[test]
fn adaptation_state_round_trips_bit_exactly() {
    let f = fixture();
    for reg in [Regularizer::Dcr, Regularizer::Rtf, Regularizer::Fcf] {
        let out = adapt(&f.net, &f.source, &f.target, &adapt_cfg(reg, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        checkpoint(&out.bundle, &path).unwrap();
        let back = restore(&path).unwrap();
        assert_eq!(back, out.bundle, "{reg:?}");
        assert!(back.net.store.bit_equal(&out.bundle.net.store));
        assert!(back.disc_f.store.bit_equal(&out.bundle.disc_f.store));
        for (party, opt) in &out.bundle.optimizers {
            assert!(back.optimizers[party].state.bit_equal(&opt.state), "{party}");
        }
        let x = probe(&f.target, 2);
        let a = load_model(&path).unwrap().predict(&x).unwrap();
        let b = out.bundle.model().predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let f = fixture();
    let cfg = adapt_cfg(Regularizer::Fcf, 10);
    let straight = adapt(&f.net, &f.source, &f.target, &cfg).unwrap();

    let features = AdaptFeatures::compute(&f.net, cfg.partition, &f.source, &f.target).unwrap();
    let mut first = adapt(&f.net, &f.source, &f.target, &adadepth::trainkit::AdaptConfig { k_outer: 4, ..cfg.clone() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint(&first.bundle, dir.path()).unwrap();
    let mut resumed = restore(dir.path()).unwrap();
    run_adaptation(&mut resumed, &features, 10, &mut first.log).unwrap();

    assert_eq!(resumed.iteration, 10);
    assert!(resumed.net.store.bit_equal(&straight.bundle.net.store));
    assert!(resumed.recon.as_ref().unwrap().store.bit_equal(&straight.bundle.recon.as_ref().unwrap().store));
    assert_eq!(first.log.records, straight.log.records);
}

#[test]
fn bumped_version_is_rejected_without_partial_state() {
    let f = fixture();
    let out = adapt(&f.net, &f.source, &f.target, &adapt_cfg(Regularizer::Dcr, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint(&out.bundle, dir.path()).unwrap();
    let meta = dir.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap();
    let bumped = text.replacen(
        &format!("\"version\": {CHECKPOINT_VERSION}"),
        &format!("\"version\": {}", CHECKPOINT_VERSION + 1),
        1,
    );
    assert_ne!(bumped, text);
    fs::write(&meta, bumped).unwrap();
    assert!(matches!(restore(dir.path()), Err(Error::Checkpoint { .. })));
    assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint { .. })));
}

#[test]
fn missing_array_file_is_a_checkpoint_error() {
    let f = fixture();
    let out = adapt(&f.net, &f.source, &f.target, &adapt_cfg(Regularizer::Rtf, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint(&out.bundle, dir.path()).unwrap();
    let victim = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("residual."))
        .unwrap();
    fs::remove_file(victim).unwrap();
    assert!(matches!(restore(dir.path()), Err(Error::Checkpoint { .. })));
}
