use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Waveform};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;
const DELTA_HALF_WINDOW: usize = 2;

/// Linear-frequency cepstral coefficient settings.
///
/// The defaults give 20 static coefficients (C0 included) from 20 linearly
/// spaced triangular filters, plus deltas and delta-deltas: 60 dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfccConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub include_deltas: bool,
}

impl Default for LfccConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 20.0,
            frame_shift_ms: 10.0,
            fft_size: 512,
            n_filters: 20,
            n_ceps: 20,
            include_deltas: true,
        }
    }
}

impl LfccConfig {
    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        (self.frame_len_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate_hz: u32) -> usize {
        (self.frame_shift_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn output_dim(&self) -> usize {
        if self.include_deltas {
            3 * self.n_ceps
        } else {
            self.n_ceps
        }
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let len = self.frame_len(sample_rate_hz);
        let shift = self.frame_shift(sample_rate_hz);
        if len == 0 || shift == 0 {
            return Err(Error::Param("frame length and shift must be at least one sample".into()));
        }
        if len > self.fft_size {
            return Err(Error::Param(format!(
                "frame of {len} samples exceeds fft size {}",
                self.fft_size
            )));
        }
        if self.n_filters == 0 || self.n_ceps == 0 || self.n_ceps > self.n_filters {
            return Err(Error::Param(format!(
                "need 1 <= n_ceps ({}) <= n_filters ({})",
                self.n_ceps, self.n_filters
            )));
        }
        Ok(())
    }
}

/// Triangular filters spaced linearly from 0 Hz to Nyquist, one row per
/// filter over the `fft_size / 2 + 1` power-spectrum bins.
pub fn linear_filterbank(n_filters: usize, fft_size: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    let n_bins = fft_size / 2 + 1;
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| nyquist * i as f64 / (n_filters + 1) as f64)
        .collect();
    (0..n_filters)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate_hz as f64 / fft_size as f64;
                    if f >= lo && f <= center {
                        (f - lo) / (center - lo)
                    } else if f > center && f <= hi {
                        (hi - f) / (hi - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal type-II DCT matrix, `size` × `size`, rows indexed by coefficient.
pub fn dct_matrix(size: usize) -> Vec<Vec<f64>> {
    let m = size as f64;
    (0..size)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            (0..size)
                .map(|n| scale * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                .collect()
        })
        .collect()
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn extract_lfcc(wave: &Waveform, cfg: &LfccConfig) -> Result<FeatureSequence> {
    let fs = wave.sample_rate_hz;
    cfg.validate(fs)?;
    let len = cfg.frame_len(fs);
    let shift = cfg.frame_shift(fs);
    if wave.len() < len {
        return Err(Error::InsufficientInput(format!(
            "{} samples is shorter than one {len}-sample frame",
            wave.len()
        )));
    }
    let n_frames = (wave.len() - len) / shift + 1;

    let window = hann(len);
    let bank = linear_filterbank(cfg.n_filters, cfg.fft_size, fs);
    let dct = dct_matrix(cfg.n_filters);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; cfg.fft_size / 2 + 1];
    let mut log_energy = vec![0.0; cfg.n_filters];

    let mut statics = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = &wave.samples[f * shift..f * shift + len];
        for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(x as f64 * w, 0.0);
        }
        buf[len..].fill(Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (e, tri) in log_energy.iter_mut().zip(&bank) {
            let energy: f64 = tri.iter().zip(&power).map(|(w, p)| w * p).sum();
            *e = energy.max(LOG_FLOOR).ln();
        }
        let ceps: Vec<f64> = dct[..cfg.n_ceps]
            .iter()
            .map(|row| row.iter().zip(&log_energy).map(|(a, b)| a * b).sum())
            .collect();
        statics.push(ceps);
    }

    let rows: Vec<Vec<f64>> = if cfg.include_deltas {
        let d1 = compute_deltas(&statics);
        let d2 = compute_deltas(&d1);
        statics
            .into_iter()
            .zip(d1)
            .zip(d2)
            .map(|((s, a), b)| [s, a, b].concat())
            .collect()
    } else {
        statics
    };
    let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    FeatureSequence::new(data, n_frames, cfg.output_dim(), shift as f64 / fs as f64)
}

/// Regression deltas over a ±2 frame window; out-of-range frames replicate
/// the nearest edge frame.
pub fn compute_deltas(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = features.len();
    let dim = features.first().map_or(0, Vec::len);
    let denom = 2.0 * (1..=DELTA_HALF_WINDOW).map(|k| (k * k) as f64).sum::<f64>();
    (0..n)
        .map(|t| {
            (0..dim)
                .map(|d| {
                    let mut acc = 0.0;
                    for k in 1..=DELTA_HALF_WINDOW {
                        let ahead = &features[(t + k).min(n - 1)];
                        let behind = &features[t.saturating_sub(k)];
                        acc += k as f64 * (ahead[d] - behind[d]);
                    }
                    acc / denom
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_99_identical_frames() {
        let wave = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let feats = extract_lfcc(&wave, &LfccConfig::default()).unwrap();
        assert_eq!(feats.n_frames(), 99);
        assert_eq!(feats.dim(), 60);
        let first = feats.row(0).to_vec();
        for row in feats.rows() {
            assert_eq!(row, &first[..]);
            assert!(row[20..].iter().all(|&v| v == 0.0));
        }
        assert!((feats.frame_shift_s - 0.01).abs() < 1e-12);
    }

    #[test]
    fn too_short_is_rejected() {
        let wave = Waveform::new(vec![0.0; 319], 16000).unwrap();
        assert!(matches!(
            extract_lfcc(&wave, &LfccConfig::default()),
            Err(Error::InsufficientInput(_))
        ));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = LfccConfig { fft_size: 256, ..Default::default() };
        assert!(cfg.validate(16000).is_err());
        cfg = LfccConfig { n_ceps: 21, ..Default::default() };
        assert!(cfg.validate(16000).is_err());
        assert!(LfccConfig::default().validate(16000).is_ok());
    }

    #[test]
    fn deltas_constant_single_and_ramp() {
        let constant = vec![vec![3.0, -1.0]; 6];
        assert!(compute_deltas(&constant).iter().flatten().all(|&v| v == 0.0));

        assert_eq!(compute_deltas(&[vec![5.0, 7.0]]), vec![vec![0.0, 0.0]]);

        let ramp: Vec<Vec<f64>> = (0..10).map(|n| vec![n as f64]).collect();
        let d = compute_deltas(&ramp);
        for row in &d[2..8] {
            assert!((row[0] - 1.0).abs() < 1e-12);
        }
        // edge replication: at t=0, (x1-x0)+2(x2-x0) = 5, over 10
        assert!((d[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dct_is_orthonormal() {
        let m = dct_matrix(20);
        for i in 0..20 {
            for j in 0..20 {
                let dot: f64 = (0..20).map(|k| m[i][k] * m[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn filterbank_peaks_at_linear_centers() {
        let bank = linear_filterbank(20, 512, 16000);
        assert_eq!(bank.len(), 20);
        assert_eq!(bank[0].len(), 257);
        // each filter's maximum weight lies within one bin of its center
        for (m, tri) in bank.iter().enumerate() {
            let center = 8000.0 * (m + 1) as f64 / 21.0;
            let peak = tri
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!((peak as f64 * 31.25 - center).abs() <= 31.25);
        }
    }
}
