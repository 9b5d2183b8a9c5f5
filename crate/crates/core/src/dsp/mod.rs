//! Deterministic signal processing: WAV ingestion, LFCC extraction, delta
//! features and Butterworth filter design/application.

mod iir;
mod lfcc;
mod wav;

pub use iir::{apply_filter, design_bandstop, freq_response, FilterDesign, FilterKind, IirFilter, Sos};
pub use lfcc::{compute_deltas, dct_matrix, extract_lfcc, linear_filterbank, LfccConfig};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Param("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Param(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// An N×D matrix of frame features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f32>,
    n_frames: usize,
    dim: usize,
    pub frame_shift_s: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f32>, n_frames: usize, dim: usize, frame_shift_s: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if data.len() != n_frames * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form {n_frames}x{dim} frames",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite feature value".into()));
        }
        Ok(Self { data, n_frames, dim, frame_shift_s })
    }

    pub fn from_rows(rows: &[Vec<f32>], frame_shift_s: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim, frame_shift_s)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Frames `start..end`, clamped to the sequence length.
    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureSequence {
        let end = end.min(self.n_frames);
        let start = start.min(end);
        FeatureSequence {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            n_frames: end - start,
            dim: self.dim,
            frame_shift_s: self.frame_shift_s,
        }
    }
}
