mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::rng;
use flashdec::cost::count_params;
use flashdec::decoder::store::{
    load_weights, load_weights_checked, save_weights, weights_from_bytes, weights_to_bytes,
};
use flashdec::decoder::{Decoder, DecoderConfig, OperatorKind, ShortcutKind, StageName};
use flashdec::{Error, ErrorClass, Tensor};

fn small(seed: u64) -> Decoder {
    Decoder::build(DecoderConfig::with_widths([8, 8, 8, 8, 4], 4, seed)).unwrap()
}

#[test]
fn reference_decoder_expands_latents_by_four_eight_eight() {
    let d = Decoder::build(DecoderConfig::reference(0)).unwrap();
    let z = Tensor::randn(&[8, 4, 8, 8], &mut rng(1));
    let y = d.decode(&z).unwrap();
    assert_eq!(y.shape(), &[3, 16, 64, 64]);
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert_eq!(d.config().output_extents([4, 8, 8]), [16, 64, 64]);
}

#[test]
fn mismatched_stage_interfaces_are_rejected() {
    let mut cfg = DecoderConfig::reference(0);
    cfg.stages[3].channels_in = 12;
    let e = Decoder::build(cfg).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);

    // A width change through an identity shortcut cannot be built either.
    let mut cfg = DecoderConfig::reference(0);
    cfg.stages[1].shortcut = ShortcutKind::Identity;
    cfg.stages[2].shortcut = ShortcutKind::Identity;
    assert_eq!(Decoder::build(cfg).unwrap_err().class(), ErrorClass::Config);
}

#[test]
fn same_seed_same_parameters() {
    assert_eq!(small(3).params(), small(3).params());
    assert_ne!(small(3).params(), small(4).params());
}

#[test]
fn captured_features_have_the_stage_shapes() {
    let d = small(5);
    let z = Tensor::randn(&[4, 2, 3, 3], &mut rng(2));
    let (y, f) = d.forward(&z, &BTreeSet::new()).unwrap();
    assert!(f.is_empty());
    assert_eq!(y.shape(), &[3, 8, 24, 24]);
    let all: BTreeSet<StageName> = d.stage_names().into_iter().collect();
    let (y2, f) = d.forward(&z, &all).unwrap();
    assert_eq!(y, y2);
    assert_eq!(f.keys().copied().collect::<BTreeSet<_>>(), all);
    assert_eq!(f[&StageName::Mid].shape(), &[8, 2, 3, 3]);
    assert_eq!(f[&StageName::Up0].shape(), &[8, 4, 6, 6]);
    assert_eq!(f[&StageName::Up1].shape(), &[8, 8, 12, 12]);
    assert_eq!(f[&StageName::Up2].shape(), &[8, 8, 24, 24]);
    assert_eq!(f[&StageName::Up3].shape(), &[4, 8, 24, 24]);
}

#[test]
fn resuming_from_captured_features_matches_the_whole_run() {
    let d = small(6);
    let z = Tensor::randn(&[4, 2, 2, 2], &mut rng(3));
    let whole = d.decode(&z).unwrap();
    let all: BTreeSet<StageName> = d.stage_names().into_iter().collect();
    let (_, f) = d.forward(&z, &all).unwrap();
    for (name, feat) in &f {
        assert_eq!(d.forward_from(*name, feat).unwrap(), whole, "{name}");
    }
}

#[test]
fn substitution_copies_untouched_parameters_and_keeps_interfaces() {
    let d = small(7);
    let plan = BTreeMap::from([
        (StageName::Mid, OperatorKind::Dwsep3d),
        (StageName::Up0, OperatorKind::Dwsep3d),
        (StageName::Up1, OperatorKind::Dwsep3d),
        (StageName::Up2, OperatorKind::Conv2d),
        (StageName::Up3, OperatorKind::Conv2d),
    ]);
    let s = d.substitute_operators(&plan, 1).unwrap();
    for (stage, kind) in &plan {
        assert_eq!(s.config().stage(*stage).unwrap().operator, *kind);
    }
    assert!(count_params(&s) < count_params(&d));
    for name in [
        "conv_in.weight",
        "conv_out.bias",
        "up1.b0.norm1.gamma",
        "up2.b0.shortcut.weight",
    ] {
        if let Ok(p) = d.param(name) {
            assert_eq!(s.param(name).unwrap(), p, "{name}");
        }
    }
    let z = Tensor::randn(&[4, 2, 2, 2], &mut rng(4));
    let all: BTreeSet<StageName> = d.stage_names().into_iter().collect();
    let (ya, fa) = d.forward(&z, &all).unwrap();
    let (yb, fb) = s.forward(&z, &all).unwrap();
    assert_eq!(ya.shape(), yb.shape());
    for (k, v) in &fa {
        assert_eq!(v.shape(), fb[k].shape());
    }

    let same = d.substitute_operators(&BTreeMap::new(), 1).unwrap();
    assert_eq!(same.params(), d.params());
    assert_eq!(same.config(), d.config());
}

#[test]
fn substituted_stage_params_follow_the_separable_ratio() {
    // Only the main-path kernels of the stage change; biases stay.
    let d = small(8);
    let s = d
        .substitute_operators(&BTreeMap::from([(StageName::Mid, OperatorKind::Dwsep3d)]), 0)
        .unwrap();
    let conv_weights = |d: &Decoder| -> usize {
        d.params()
            .iter()
            .filter(|(n, _)| n.starts_with("mid.") && n.contains(".conv") && !n.ends_with("bias"))
            .map(|(_, t)| t.numel())
            .sum()
    };
    let c = 8;
    // Depthwise N³ per channel plus pointwise C² against a full C²N³.
    let expect = (27 * c + c * c) as f64 / (c * c * 27) as f64;
    let got = conv_weights(&s) as f64 / conv_weights(&d) as f64;
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!((expect - (1.0 / c as f64 + 1.0 / 27.0)).abs() < 1e-12);
}

#[test]
fn unknown_stage_in_a_plan_is_a_config_error() {
    let mut cfg = DecoderConfig::with_widths([8, 8, 8, 8, 4], 4, 0);
    cfg.stages.pop();
    let d = Decoder::build(cfg).unwrap();
    let e = d
        .substitute_operators(&BTreeMap::from([(StageName::Up3, OperatorKind::Conv2d)]), 0)
        .unwrap_err();
    assert_eq!(e.class(), ErrorClass::Config);
}

#[test]
fn weights_round_trip_bit_exactly() {
    let d = small(9)
        .substitute_operators(&BTreeMap::from([(StageName::Up2, OperatorKind::Conv2d)]), 2)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.fvae");
    save_weights(&d, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, d);
    assert_eq!(load_weights_checked(&path, d.config()).unwrap(), d);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FVAE");
}

#[test]
fn corrupted_or_truncated_weights_are_rejected() {
    let bytes = weights_to_bytes(&small(10)).unwrap();
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    match weights_from_bytes(&bad).unwrap_err() {
        Error::Checksum { stored, computed } => assert_ne!(stored, computed),
        e => panic!("expected a checksum error, got {e}"),
    }
    assert_eq!(
        weights_from_bytes(&bytes[..bytes.len() - 7]).unwrap_err().class(),
        ErrorClass::Io
    );
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(weights_from_bytes(&magic).is_err());
}

#[test]
fn weights_saved_for_another_config_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.fvae");
    save_weights(&small(11), &path).unwrap();
    let other = DecoderConfig::with_widths([8, 8, 8, 8, 8], 4, 11);
    assert_eq!(
        load_weights_checked(&path, &other).unwrap_err().class(),
        ErrorClass::Config
    );
}
