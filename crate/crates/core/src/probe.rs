//! Sub-band probing: band-stop filter every trial, re-score, compare EERs
//! and score distributions against the unfiltered baseline.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, ProtocolSet};
use crate::dsp::{apply_filter, design_bandstop, read_wav, Waveform};
use crate::error::{Error, Result};
use crate::eval::{compute_eer, missing_inputs, score_histogram, EerResult, Histogram, ScoreSet};
use crate::model::Model;

/// Stopbands in Hz, 0–100 Hz up to 7.2–8 kHz.
pub const DEFAULT_BANDS: [(f64, f64); 7] = [
    (0.0, 100.0),
    (0.0, 800.0),
    (800.0, 2400.0),
    (2400.0, 4000.0),
    (4000.0, 5600.0),
    (5600.0, 7200.0),
    (7200.0, 8000.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub stopbands: Vec<(f64, f64)>,
    pub order: usize,
    /// Probe a class-stratified random subset of this many trials.
    pub subset_size: Option<usize>,
    pub seed: u64,
    pub n_bins: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { stopbands: DEFAULT_BANDS.to_vec(), order: 10, subset_size: None, seed: 0, n_bins: 50 }
    }
}

/// Seeded sample of `n` trials, each class drawn in proportion to its share.
/// Protocol order is kept.
pub fn subset_trials(protocol: &ProtocolSet, n: usize, seed: u64) -> Result<ProtocolSet> {
    let size = protocol.len();
    if n > size {
        return Err(Error::Param(format!("subset of {n} from {size} trials")));
    }
    if n == size {
        return Ok(protocol.clone());
    }
    let by_class = |l: Label| -> Vec<usize> {
        protocol.records.iter().enumerate().filter(|(_, r)| r.label == l).map(|(i, _)| i).collect()
    };
    let (bona, spoof) = (by_class(Label::Bonafide), by_class(Label::Spoof));
    let n_bona = ((n * bona.len()) as f64 / size as f64).round() as usize;
    let n_bona = n_bona.clamp(n.saturating_sub(spoof.len()), bona.len().min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = sample(&mut rng, bona.len(), n_bona).into_iter().map(|i| bona[i]).collect();
    keep.extend(sample(&mut rng, spoof.len(), n - n_bona).into_iter().map(|i| spoof[i]));
    keep.sort_unstable();
    let records = keep.into_iter().map(|i| protocol.records[i].clone()).collect();
    ProtocolSet::new(records, protocol.subset, protocol.base_dir.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandResult {
    /// `None` for the unfiltered baseline.
    pub band: Option<(f64, f64)>,
    pub eer: EerResult,
    pub histogram: Histogram,
    pub scores: ScoreSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub baseline: BandResult,
    pub bands: Vec<BandResult>,
}

impl ProbeReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("band_low,band_high,eer,threshold\n");
        for r in std::iter::once(&self.baseline).chain(&self.bands) {
            let (lo, hi) = r.band.map_or(("-".into(), "-".into()), |(l, h)| (format!("{l}"), format!("{h}")));
            out.push_str(&format!("{lo},{hi},{:.6},{:.6}\n", r.eer.eer, r.eer.threshold));
        }
        out
    }

    /// `summary.csv` plus `hist_baseline.csv` and `hist_<low>_<high>.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("summary.csv".into(), self.summary_csv())?;
        write("hist_baseline.csv".into(), self.baseline.histogram.to_csv())?;
        for r in &self.bands {
            let (lo, hi) = r.band.expect("filtered entry");
            write(format!("hist_{lo}_{hi}.csv"), r.histogram.to_csv())?;
        }
        Ok(())
    }
}

fn score_waves(model: &Model, waves: &[(String, Waveform)], filter: Option<(f64, f64, usize)>) -> Result<ScoreSet> {
    let scored = waves
        .par_iter()
        .map(|(id, wave)| {
            let wave = match filter {
                Some((lo, hi, order)) => apply_filter(&design_bandstop(lo, hi, order, wave.sample_rate_hz)?, wave)?,
                None => wave.clone(),
            };
            Ok((id.clone(), model.score(&model.frontend.from_waveform(&wave)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = ScoreSet::new();
    for (id, s) in scored {
        set.insert(id, s)?;
    }
    Ok(set)
}

pub fn run_probe(model: &Model, protocol: &ProtocolSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if !model.frontend.is_waveform_backed() {
        return Err(Error::UnsupportedFrontend(format!(
            "front end '{}' reads stored features; filtering features is not filtering audio. \
             Filter the audio, re-export features from it and evaluate each band with `cm eval`",
            model.frontend.kind()
        )));
    }
    if cfg.order == 0 || !cfg.order.is_multiple_of(2) {
        return Err(Error::Param(format!("filter order must be even and positive, got {}", cfg.order)));
    }
    let trials = match cfg.subset_size {
        Some(n) => subset_trials(protocol, n, cfg.seed)?,
        None => protocol.clone(),
    };
    let missing = missing_inputs(model, &trials);
    if !missing.is_empty() {
        return Err(Error::MissingTrials(missing));
    }
    let waves = trials
        .records
        .par_iter()
        .map(|r| Ok((r.trial_id.clone(), read_wav(trials.audio_path(r).expect("checked above"))?)))
        .collect::<Result<Vec<_>>>()?;

    let result = |band: Option<(f64, f64)>, scores: ScoreSet| -> Result<BandResult> {
        Ok(BandResult {
            band,
            eer: compute_eer(&scores, &trials)?,
            histogram: score_histogram(&scores, &trials, cfg.n_bins)?,
            scores,
        })
    };
    let baseline = result(None, score_waves(model, &waves, None)?)?;
    let mut bands = Vec::new();
    for &(lo, hi) in &cfg.stopbands {
        let scores = score_waves(model, &waves, Some((lo, hi, cfg.order)))?;
        let r = result(Some((lo, hi)), scores)?;
        log::info!("stopband {lo}-{hi} Hz: EER {:.4}", r.eer.eer);
        bands.push(r);
    }
    Ok(ProbeReport { baseline, bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig, TrialRecord};
    use crate::eval::score_trials;
    use crate::frontend::{FrontEnd, FrontendConfig, FrontendKind};
    use crate::nn::BackendKind;

    fn proto(nb: usize, ns: usize) -> ProtocolSet {
        let records = (0..nb + ns)
            .map(|i| TrialRecord::new(format!("t{i:03}"), if i < nb { Label::Bonafide } else { Label::Spoof }))
            .collect();
        ProtocolSet::new(records, None, ".").unwrap()
    }

    #[test]
    fn subsets_are_stratified_and_seeded() {
        let p = proto(30, 70);
        assert_eq!(subset_trials(&p, 100, 1).unwrap(), p);
        assert!(matches!(subset_trials(&p, 101, 1), Err(Error::Param(_))));
        assert_eq!(subset_trials(&p, 23, 4).unwrap(), subset_trials(&p, 23, 4).unwrap());
        for seed in 0..100 {
            let n = 5 + (seed as usize * 7) % 90;
            let s = subset_trials(&p, n, seed).unwrap();
            assert_eq!(s.len(), n);
            let target = n as f64 * 0.3;
            assert!((s.count(Label::Bonafide) as f64 - target).abs() <= 1.0);
            assert!(s.records.windows(2).all(|w| w[0].trial_id < w[1].trial_id));
        }
    }

    #[test]
    fn empty_band_list_reproduces_eval() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_dataset(&SynthConfig { n_per_class: 5, ..Default::default() }, dir.path()).unwrap();
        let fe = FrontEnd::new(&FrontendConfig::default()).unwrap();
        let model = Model::init(fe, BackendKind::Gf, 2).unwrap();
        let before = model.params.clone();
        let cfg = ProbeConfig { stopbands: vec![], ..Default::default() };
        let report = run_probe(&model, &corpus.train, &cfg).unwrap();
        assert!(report.bands.is_empty());
        let eval = score_trials(&model, &corpus.train).unwrap();
        assert_eq!(report.baseline.scores, eval);
        assert_eq!(report.baseline.eer, compute_eer(&eval, &corpus.train).unwrap());
        assert_eq!(model.params, before);

        let cfg = ProbeConfig { stopbands: vec![(2400.0, 4000.0)], ..Default::default() };
        let a = run_probe(&model, &corpus.train, &cfg).unwrap();
        assert_eq!(a, run_probe(&model, &corpus.train, &cfg).unwrap());
        assert_eq!(a.summary_csv().lines().count(), 3);
        a.write(dir.path().join("probe")).unwrap();
        assert!(dir.path().join("probe/hist_2400_4000.csv").is_file());
    }

    #[test]
    fn stored_feature_front_ends_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let f = crate::frontend::MultiLayerFeatures::new(1, 20, 4, vec![0.5; 80]).unwrap();
        crate::frontend::write_features(dir.path().join("a.cmf"), &f).unwrap();
        let entries = std::collections::BTreeMap::from([("t000".to_string(), "a.cmf".into())]);
        crate::frontend::FeatureManifest::write(dir.path().join("m.tsv"), &entries).unwrap();
        let cfg = FrontendConfig { kind: FrontendKind::External, manifest: Some(dir.path().join("m.tsv")), ..Default::default() };
        let model = Model::init(FrontEnd::new(&cfg).unwrap(), BackendKind::Gf, 0).unwrap();
        assert!(matches!(run_probe(&model, &proto(1, 0), &ProbeConfig::default()), Err(Error::UnsupportedFrontend(_))));
    }

    #[test]
    fn default_bands() {
        let cfg = ProbeConfig::default();
        assert_eq!(cfg.stopbands.len(), 7);
        assert_eq!((cfg.order, cfg.n_bins), (10, 50));
        assert_eq!(cfg.stopbands[3], (2400.0, 4000.0));
    }
}
