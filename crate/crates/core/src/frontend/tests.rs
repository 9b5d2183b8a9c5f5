use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::nn::BackendKind;

fn layers(k: usize, n: usize, d: usize, seed: u32) -> MultiLayerFeatures {
    let data = (0..k * n * d)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 250.0 - 2.0)
        .collect();
    MultiLayerFeatures::new(k, n, d, data).unwrap()
}

fn write_manifest(dir: &std::path::Path, items: &[(&str, MultiLayerFeatures)]) -> PathBuf {
    let mut entries = BTreeMap::new();
    for (id, f) in items {
        let rel = PathBuf::from(format!("{id}.cmf"));
        write_features(dir.join(&rel), f).unwrap();
        entries.insert(id.to_string(), rel);
    }
    let path = dir.join("manifest.tsv");
    FeatureManifest::write(&path, &entries).unwrap();
    path
}

#[test]
fn singleton_layer_passes_through() {
    let f = layers(1, 5, 3, 1);
    for raw in [-3.0, 0.0, 7.5] {
        let out = combine_layers(&f, &LayerWeights { raw: vec![raw] }, 0.02).unwrap();
        assert_eq!(out.data(), f.data());
    }
}

#[test]
fn opposite_layers_cancel() {
    let a = layers(1, 4, 3, 9);
    let neg: Vec<f32> = a.data().iter().map(|v| -v).collect();
    let both = MultiLayerFeatures::new(2, 4, 3, a.data().iter().copied().chain(neg).collect()).unwrap();
    let out = combine_layers(&both, &LayerWeights::uniform(2), 0.02).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn weighted_sum_matches_direct_summation() {
    let f = layers(3, 6, 4, 3);
    let w = LayerWeights { raw: vec![0.3, -1.2, 2.0] };
    let out = combine_layers(&f, &w, 0.02).unwrap();
    let e: Vec<f64> = w.raw.iter().map(|r| r.exp()).collect();
    let total: f64 = e.iter().sum();
    for i in 0..6 * 4 {
        let want: f64 = (0..3).map(|k| e[k] / total * f.data()[k * 24 + i] as f64).sum();
        assert!((out.data()[i] as f64 - want).abs() < 1e-6);
    }
    assert!(matches!(
        combine_layers(&f, &LayerWeights::uniform(2), 0.02),
        Err(Error::Shape(_))
    ));
}

#[test]
fn projection_examples() {
    let x = FeatureSequence::new((0..5 * 128).map(|i| (i % 17) as f32 - 8.0).collect(), 5, 128, 0.02).unwrap();
    let mut eye = Tensor::zeros(&[128, 128]);
    for i in 0..128 {
        eye.data_mut()[i * 128 + i] = 1.0;
    }
    let id = ProjectionParams { weight: eye, bias: Tensor::zeros(&[128]) };
    assert_eq!(project(&x, &id).unwrap().data(), x.data());

    let bias = Tensor::new(vec![128], (0..128).map(|i| i as f64 * 0.25).collect()).unwrap();
    let zero = ProjectionParams { weight: Tensor::zeros(&[128, 128]), bias: bias.clone() };
    for row in project(&x, &zero).unwrap().rows() {
        assert!(row.iter().zip(bias.data()).all(|(&a, &b)| a as f64 == b));
    }
    let bad = ProjectionParams { weight: Tensor::zeros(&[64, 128]), bias };
    assert!(matches!(project(&x, &bad), Err(Error::Shape(_))));
}

#[test]
fn frontend_configuration() {
    let lfcc = FrontEnd::new(&FrontendConfig::default()).unwrap();
    let input = lfcc.from_waveform(&Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
    assert_eq!(input.n_frames(), 99);
    assert_eq!(lfcc.output_dim(), 60);

    let cfg = FrontendConfig { kind: FrontendKind::External, ..Default::default() };
    assert!(matches!(FrontEnd::new(&cfg), Err(Error::Config(_))));
}

#[test]
fn external_projects_to_128_and_singleton_weighting_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("t1", layers(1, 10, 24, 5))]);
    let base = FrontendConfig { manifest: Some(manifest), ..Default::default() };
    let ext = FrontEnd::new(&FrontendConfig { kind: FrontendKind::External, ..base.clone() }).unwrap();
    let wtd = FrontEnd::new(&FrontendConfig { kind: FrontendKind::ExternalWeighted, ..base }).unwrap();
    assert_eq!((ext.raw_dim(), ext.output_dim()), (24, 128));

    let mut p_ext = ModelParams::empty(BackendKind::Gf, 128, 11);
    ext.init_params(&mut p_ext);
    let mut p_wtd = ModelParams::empty(BackendKind::Gf, 128, 11);
    wtd.init_params(&mut p_wtd);
    p_wtd.params.get_mut(LAYER_WEIGHTS).unwrap().data_mut()[0] = 3.7;

    let protocol = ProtocolSet::new(
        vec![TrialRecord::new("t1", crate::data::Label::Bonafide)],
        None,
        dir.path(),
    )
    .unwrap();
    let rec = protocol.get("t1").unwrap();
    let a = ext.features(&p_ext, &ext.load_trial(&protocol, rec).unwrap()).unwrap();
    let b = wtd.features(&p_wtd, &wtd.load_trial(&protocol, rec).unwrap()).unwrap();
    assert_eq!(a.dim(), 128);
    assert_eq!(a, b);
    assert!(ext.from_waveform(&Waveform::new(vec![0.0; 400], 16000).unwrap()).is_err());
}

#[test]
fn stored_features_slice_by_segment_duration() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("t1", layers(2, 450, 4, 8))]);
    let cfg = FrontendConfig { kind: FrontendKind::External, manifest: Some(manifest), ..Default::default() };
    let fe = FrontEnd::new(&cfg).unwrap();
    let protocol = ProtocolSet::new(vec![TrialRecord::new("t1", crate::data::Label::Spoof)], None, dir.path()).unwrap();
    let segs = fe.training_segments(&protocol, protocol.get("t1").unwrap(), 4.0).unwrap();
    let lens: Vec<usize> = segs.iter().map(FrontendInput::n_frames).collect();
    assert_eq!(lens, vec![200, 200, 50]);
}

#[test]
fn mismatched_params_are_rejected() {
    let lfcc = FrontEnd::new(&FrontendConfig::default()).unwrap();
    let mut p = ModelParams::init(BackendKind::Gf, 60, 1).unwrap();
    assert!(lfcc.check_params(&p).is_ok());
    p.params.insert(PROJ_WEIGHT.into(), Tensor::zeros(&[60, 128]));
    assert!(matches!(lfcc.check_params(&p), Err(Error::KindMismatch { .. })));
    let p = ModelParams::init(BackendKind::Gf, 128, 1).unwrap();
    assert!(matches!(lfcc.check_params(&p), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmfeat_round_trip_is_byte_exact(k in 1usize..4, n in 1usize..9, d in 1usize..7, seed: u32) {
        let f = layers(k, n, d, seed);
        let bytes = f.to_bytes();
        let back = MultiLayerFeatures::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, f);
    }

    #[test]
    fn layer_weights_are_shift_invariant(raw in prop::collection::vec(-4.0f64..4.0, 3), shift in -20.0f64..20.0) {
        let f = layers(3, 4, 2, 17);
        let a = combine_layers(&f, &LayerWeights { raw: raw.clone() }, 0.02).unwrap();
        let shifted = LayerWeights { raw: raw.iter().map(|r| r + shift).collect() };
        let b = combine_layers(&f, &shifted, 0.02).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let eff = shifted.effective();
        prop_assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(eff.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn projection_is_frame_local(perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = 7;
        let x = layers(1, n, 5, 2).layer(0, 0.02);
        let mut init = Initializer::new(perm_seed);
        let p = ProjectionParams { weight: init.uniform(&[5, 3], 1.0), bias: init.uniform(&[3], 1.0) };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let rows: Vec<Vec<f32>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let permuted = FeatureSequence::from_rows(&rows, 0.02).unwrap();
        let (y, yp) = (project(&x, &p).unwrap(), project(&permuted, &p).unwrap());
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(yp.row(j), y.row(i));
        }
    }
}
