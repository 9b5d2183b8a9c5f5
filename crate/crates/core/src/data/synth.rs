//! Desk-scale stand-in corpus.
//!
//! Bona fide trials are noise- and pulse-excited formant resonances with a
//! syllabic envelope over a pink-noise floor. Each spoof trial is its paired
//! bona fide signal plus a narrowband tone cluster somewhere inside the
//! artifact band, so the only class cue is band-localized.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_protocol, Label, ProtocolSet, Subset, TrialRecord};
use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};

pub const SYNTH_ATTACK: &str = "AS01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub artifact_low_hz: f64,
    pub artifact_high_hz: f64,
    pub sample_rate_hz: u32,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
    /// Artifact RMS relative to the paired bona fide RMS.
    pub artifact_level_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_per_class: 200,
            artifact_low_hz: 2800.0,
            artifact_high_hz: 3200.0,
            sample_rate_hz: 16_000,
            min_dur_s: 1.5,
            max_dur_s: 4.5,
            artifact_level_db: -20.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.artifact_low_hz > 0.0 && self.artifact_low_hz < self.artifact_high_hz && self.artifact_high_hz < nyquist) {
            return Err(Error::Param(format!(
                "artifact band {}-{} Hz must lie inside (0, {nyquist})",
                self.artifact_low_hz, self.artifact_high_hz
            )));
        }
        if self.n_per_class == 0 || !(self.min_dur_s > 0.0 && self.min_dur_s <= self.max_dur_s) {
            return Err(Error::Param("need n_per_class >= 1 and 0 < min_dur_s <= max_dur_s".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: ProtocolSet,
    pub dev: ProtocolSet,
    pub eval: ProtocolSet,
}

impl SyntheticCorpus {
    pub fn total(&self) -> usize {
        self.train.len() + self.dev.len() + self.eval.len()
    }
}

/// Two-pole resonator in direct form.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self { a1: 0.0, a2: 0.0, gain: 0.0, y1: 0.0, y2: 0.0 }
    }

    fn tune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let r = (-PI * bandwidth / fs).exp();
        self.a1 = -2.0 * r * (2.0 * PI * freq / fs).cos();
        self.a2 = r * r;
        self.gain = 1.0 - r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const FORMANT_RANGES: [(f64, f64); 4] = [(300.0, 850.0), (850.0, 2300.0), (2300.0, 3300.0), (3300.0, 4500.0)];

fn pseudo_speech(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..220.0);
    let breathiness = rng.gen_range(0.05..0.4);
    let mut formants: Vec<Resonator> = FORMANT_RANGES.iter().map(|_| Resonator::new()).collect();
    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let mut pos = 0;
    while pos < n {
        let syllable = ((rng.gen_range(0.12..0.32) * fs) as usize).min(n - pos);
        let pause = (rng.gen_range(0.0..0.12) * fs) as usize;
        for (res, &(lo, hi)) in formants.iter_mut().zip(&FORMANT_RANGES) {
            res.tune(rng.gen_range(lo..hi), rng.gen_range(60.0..220.0), fs);
        }
        let level = rng.gen_range(0.4..1.0);
        let pitch = f0 * rng.gen_range(0.85..1.15);
        for (k, sample) in out[pos..pos + syllable].iter_mut().enumerate() {
            phase += pitch / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let excitation = pulse + breathiness * rng.gen_range(-1.0..1.0);
            let voiced: f64 = formants
                .iter_mut()
                .enumerate()
                .map(|(i, r)| r.step(excitation) / (1.0 + i as f64))
                .sum();
            let env = (PI * k as f64 / syllable as f64).sin();
            *sample = level * env * voiced;
        }
        pos += syllable + pause;
    }
    normalize_rms(&mut out, 1.0);
    // pink floor (Kellet's economy filter)
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let floor = 10f64.powf(rng.gen_range(-35.0..-25.0) / 20.0);
    let mut pink = Vec::with_capacity(n);
    for _ in 0..n {
        let white: f64 = rng.gen_range(-1.0..1.0);
        b0 = 0.99765 * b0 + white * 0.0990460;
        b1 = 0.96300 * b1 + white * 0.2965164;
        b2 = 0.57000 * b2 + white * 1.0526913;
        pink.push(b0 + b1 + b2 + white * 0.1848);
    }
    normalize_rms(&mut pink, floor);
    for (o, p) in out.iter_mut().zip(pink) {
        *o += p;
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

fn tone_cluster(rng: &mut ChaCha8Rng, n: usize, fs: f64, low: f64, high: f64) -> Vec<f64> {
    let margin = 0.1 * (high - low);
    let center = rng.gen_range(low + margin..high - margin);
    let spread = rng.gen_range(0.2..0.8) * (center - low - margin / 2.0).min(high - margin / 2.0 - center);
    let tones: Vec<(f64, f64, f64)> = [-1.0, 0.0, 1.0]
        .iter()
        .map(|k| (center + k * spread, rng.gen_range(0.5..1.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let fade = (0.02 * fs) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let edge = i.min(n - 1 - i);
            let ramp = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
            ramp * tones.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>()
        })
        .collect()
}

/// The `index`-th (bona fide, spoof) pair; the spoof is the bona fide
/// waveform plus the artifact.
pub fn render_pair(cfg: &SynthConfig, index: u64) -> Result<(Waveform, Waveform)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let fs = cfg.sample_rate_hz as f64;
    let n = (rng.gen_range(cfg.min_dur_s..=cfg.max_dur_s) * fs) as usize;
    let mut speech = pseudo_speech(&mut rng, n, fs);
    let mut artifact = tone_cluster(&mut rng, n, fs, cfg.artifact_low_hz, cfg.artifact_high_hz);

    let target = rng.gen_range(0.03..0.12);
    normalize_rms(&mut speech, target);
    normalize_rms(&mut artifact, target * 10f64.powf(cfg.artifact_level_db / 20.0));
    let peak = speech
        .iter()
        .zip(&artifact)
        .map(|(s, a)| (s + a).abs().max(s.abs()))
        .fold(0.0, f64::max);
    let scale = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    let bona: Vec<f32> = speech.iter().map(|s| (s * scale) as f32).collect();
    let spoof: Vec<f32> = speech.iter().zip(&artifact).map(|(s, a)| ((s + a) * scale) as f32).collect();
    Ok((Waveform::new(bona, cfg.sample_rate_hz)?, Waveform::new(spoof, cfg.sample_rate_hz)?))
}

/// Writes `n_per_class` pairs as PCM16 WAVs under `out_dir/wav/` plus
/// `train.tsv`, `dev.tsv` and `eval.tsv` split 60/20/20 by pair.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let n = cfg.n_per_class;
    let n_train = n * 6 / 10;
    let n_dev = n * 2 / 10;
    let mut splits: [Vec<TrialRecord>; 3] = Default::default();
    for i in 0..n {
        let (bona, spoof) = render_pair(cfg, i as u64)?;
        let split = if i < n_train {
            0
        } else if i < n_train + n_dev {
            1
        } else {
            2
        };
        for (label, wave) in [(Label::Bonafide, &bona), (Label::Spoof, &spoof)] {
            let tag = if label == Label::Bonafide { 'B' } else { 'S' };
            let id = format!("SYN_{tag}_{i:05}");
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(out_dir.join(&rel), wave)?;
            splits[split].push(TrialRecord {
                trial_id: id,
                label,
                attack_id: (label == Label::Spoof).then(|| SYNTH_ATTACK.to_string()),
                codec_id: None,
                audio_path: Some(rel),
            });
        }
    }
    let [train, dev, eval] = splits;
    let mut sets = Vec::new();
    for (records, subset, name) in [
        (train, Subset::Train, "train.tsv"),
        (dev, Subset::Dev, "dev.tsv"),
        (eval, Subset::Eval, "eval.tsv"),
    ] {
        let set = ProtocolSet::new(records, Some(subset), out_dir)?;
        write_protocol(out_dir.join(name), &set)?;
        sets.push(set);
    }
    let eval = sets.pop().unwrap();
    let dev = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(SyntheticCorpus { train, dev, eval })
}
