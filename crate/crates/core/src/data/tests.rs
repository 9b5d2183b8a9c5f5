use std::path::Path;

use proptest::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use super::*;
use crate::dsp::{FeatureSequence, Waveform};

fn small(n: usize) -> SynthConfig {
    SynthConfig { n_per_class: n, ..SynthConfig::default() }
}

fn band_energy_fraction(x: &[f64], fs: f64, low: f64, high: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate().take(buf.len() / 2 + 1) {
        let e = c.norm_sqr();
        let f = k as f64 * fs / buf.len() as f64;
        total += e;
        if (low..=high).contains(&f) {
            inside += e;
        }
    }
    inside / total
}

#[test]
fn artifact_energy_sits_in_band() {
    let cfg = SynthConfig::default();
    for i in 0..8 {
        let (bona, spoof) = render_pair(&cfg, i).unwrap();
        let diff: Vec<f64> = spoof.samples.iter().zip(&bona.samples).map(|(s, b)| (s - b) as f64).collect();
        let frac = band_energy_fraction(&diff, 16000.0, cfg.artifact_low_hz, cfg.artifact_high_hz);
        assert!(frac >= 0.9, "pair {i}: {frac}");
        assert!(bona.samples.iter().chain(&spoof.samples).all(|v| v.abs() <= 0.9 + 1e-6));
    }
}

#[test]
fn corpus_is_deterministic_and_split_by_pair() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let corpus = generate_synthetic_dataset(&small(50), a.path()).unwrap();
    generate_synthetic_dataset(&small(50), b.path()).unwrap();
    assert_eq!(corpus.total(), 100);
    assert_eq!(corpus.train.len(), 60);
    assert_eq!((corpus.dev.len(), corpus.eval.len()), (20, 20));
    assert_eq!(corpus.train.count(Label::Bonafide), 30);
    for name in ["train.tsv", "dev.tsv", "eval.tsv", "wav/SYN_S_00049.wav", "wav/SYN_B_00000.wav"] {
        let read = |d: &Path| std::fs::read(d.join(name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
    let reparsed = parse_protocol(a.path().join("eval.tsv"), ProtocolFormat::CanonicalTsv).unwrap();
    assert_eq!(reparsed.records, corpus.eval.records);

    let other = render_pair(&SynthConfig { seed: 8, ..small(1) }, 0).unwrap();
    assert_ne!(other, render_pair(&small(1), 0).unwrap());
}

#[test]
fn band_outside_nyquist_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (low, high) in [(0.0, 3000.0), (3000.0, 2000.0), (7000.0, 8000.0)] {
        let cfg = SynthConfig { artifact_low_hz: low, artifact_high_hz: high, ..small(2) };
        assert!(generate_synthetic_dataset(&cfg, dir.path()).is_err());
    }
}

fn record_strategy() -> impl Strategy<Value = Vec<TrialRecord>> {
    prop::collection::vec(
        (any::<bool>(), prop::option::of("[A-Z]{2}[0-9]{2}"), prop::option::of("[a-z]{3}"), prop::option::of("[a-z]{1,6}/[a-z]{1,6}\\.wav")),
        1..12,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (bona, attack, codec, path))| TrialRecord {
                trial_id: format!("T{i:04}"),
                label: if bona { Label::Bonafide } else { Label::Spoof },
                attack_id: if bona { None } else { attack },
                codec_id: codec,
                audio_path: path.map(Into::into),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segments_concatenate_to_the_trial(len in 1usize..200_000, max_dur in 0.25f64..5.0) {
        let wave = Waveform::new((0..len).map(|i| (i % 97) as f32 / 97.0).collect(), 16000).unwrap();
        let segs = slice_segments(&wave, max_dur);
        let cap = (max_dur * 16000.0).round() as usize;
        prop_assert!(segs.iter().all(|s| !s.is_empty() && s.len() <= cap));
        prop_assert!(segs[..segs.len() - 1].iter().all(|s| s.len() == cap));
        let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples.iter().copied()).collect();
        prop_assert_eq!(joined, wave.samples);
    }

    #[test]
    fn batches_cover_every_item_once(n in 1usize..80, bs in 1usize..20, seed: u64, epoch in 0u64..50) {
        let items: Vec<(FeatureSequence, Label)> = (0..n)
            .map(|i| {
                let frames = 1 + i % 7;
                let f = FeatureSequence::new(vec![i as f32; frames * 2], frames, 2, 0.01).unwrap();
                (f, if i % 2 == 0 { Label::Bonafide } else { Label::Spoof })
            })
            .collect();
        let batches = make_batches(&items, bs, seed, epoch);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.members.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.len() <= bs);
            for (slot, &m) in b.members.iter().enumerate() {
                prop_assert_eq!(b.valid_len[slot], items[m].0.n_frames());
                prop_assert_eq!(b.labels[slot] as usize, items[m].1.index());
                let row = &b.features[slot * b.n_max * 2..(slot + 1) * b.n_max * 2];
                prop_assert!(row[b.valid_len[slot] * 2..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn canonical_tsv_is_a_fixpoint(records in record_strategy()) {
        let set = ProtocolSet::new(records, None, "/data").unwrap();
        let text = set.to_tsv();
        let again = parse_protocol_str(&text, ProtocolFormat::CanonicalTsv, Path::new("/data")).unwrap();
        prop_assert_eq!(&again.records, &set.records);
        prop_assert_eq!(again.to_tsv(), text);
    }
}
