use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Magnitude reported for an exact transmission zero.
pub const DB_FLOOR: f64 = -400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    BandStop,
    HighPass,
    LowPass,
    /// Hand-assembled sections, not produced by the designer.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDesign {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of the analog low-pass prototype.
    pub order: usize,
    pub sample_rate_hz: u32,
}

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Sos {
    pub const IDENTITY: Sos = Sos { b: [1.0, 0.0, 0.0], a: [0.0, 0.0] };

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z_inv * self.a[0] + z2 * self.a[1];
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    pub sections: Vec<Sos>,
    pub design: FilterDesign,
}

impl IirFilter {
    pub fn from_sections(sections: Vec<Sos>, sample_rate_hz: u32) -> Self {
        let order = 2 * sections.len();
        Self {
            sections,
            design: FilterDesign {
                kind: FilterKind::Custom,
                low_hz: 0.0,
                high_hz: 0.0,
                order,
                sample_rate_hz,
            },
        }
    }

    pub fn identity(sample_rate_hz: u32) -> Self {
        Self::from_sections(vec![Sos::IDENTITY], sample_rate_hz)
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0 - 1e-9)
    }
}

fn prewarp(f_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f_hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

/// Designs the Butterworth filter that removes `[low_hz, high_hz]`.
///
/// A band touching 0 Hz becomes a high-pass at `high_hz`, one touching
/// Nyquist a low-pass at `low_hz`. `order` is the prototype order, so a
/// band-stop yields `order` sections and the one-sided cases `order / 2`.
pub fn design_bandstop(low_hz: f64, high_hz: f64, order: usize, sample_rate_hz: u32) -> Result<IirFilter> {
    let fs = sample_rate_hz as f64;
    let nyquist = fs / 2.0;
    if !(low_hz.is_finite() && high_hz.is_finite()) || low_hz < 0.0 || high_hz > nyquist || low_hz >= high_hz {
        return Err(Error::Param(format!(
            "stopband {low_hz}-{high_hz} Hz must satisfy 0 <= low < high <= {nyquist}"
        )));
    }
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::Param(format!("order must be even and >= 2, got {order}")));
    }
    let kind = match (low_hz == 0.0, high_hz == nyquist) {
        (true, true) => return Err(Error::Param("stopband covers the whole spectrum".into())),
        (true, false) => FilterKind::HighPass,
        (false, true) => FilterKind::LowPass,
        (false, false) => FilterKind::BandStop,
    };

    let prototype: Vec<Complex64> = (0..order)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64))
        .collect();

    let (analog_poles, numerator, reference) = match kind {
        FilterKind::HighPass => {
            let wc = prewarp(high_hz, fs);
            let poles = prototype.iter().map(|p| wc / p).collect::<Vec<_>>();
            // zeros at s = 0 map to z = 1; unit gain at Nyquist
            (poles, [1.0, -2.0, 1.0], -1.0)
        }
        FilterKind::LowPass => {
            let wc = prewarp(low_hz, fs);
            let poles = prototype.iter().map(|p| wc * p).collect::<Vec<_>>();
            (poles, [1.0, 2.0, 1.0], 1.0)
        }
        FilterKind::BandStop => {
            let w1 = prewarp(low_hz, fs);
            let w2 = prewarp(high_hz, fs);
            let bw = w2 - w1;
            let w0 = (w1 * w2).sqrt();
            let mut poles = Vec::with_capacity(2 * order);
            for p in &prototype {
                let half = (bw / 2.0) / p;
                let d = (half * half - w0 * w0).sqrt();
                poles.push(half + d);
                poles.push(half - d);
            }
            let notch = 2.0 * (w0 / (2.0 * fs)).atan();
            (poles, [1.0, -2.0 * notch.cos(), 1.0], 1.0)
        }
        FilterKind::Custom => unreachable!(),
    };

    let digital: Vec<Complex64> = analog_poles.iter().map(|&s| bilinear(s, fs)).collect();
    let sections = pair_sections(&digital, numerator, reference)?;
    let filter = IirFilter {
        sections,
        design: FilterDesign { kind, low_hz, high_hz, order, sample_rate_hz },
    };
    if !filter.is_stable() {
        return Err(Error::NumericFault(format!(
            "designed filter {low_hz}-{high_hz} Hz is unstable"
        )));
    }
    Ok(filter)
}

/// Groups conjugate pole pairs into biquads, ordered by ascending pole
/// magnitude, each scaled to unit gain at `z = reference`.
fn pair_sections(poles: &[Complex64], numerator: [f64; 3], reference: f64) -> Result<Vec<Sos>> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > TOL).collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= TOL).map(|p| p.re).collect();
    if 2 * complex.len() + real.len() != poles.len() || !real.len().is_multiple_of(2) {
        return Err(Error::NumericFault("pole set is not conjugate-symmetric".into()));
    }
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

    let mut denominators: Vec<(f64, [f64; 2])> = complex
        .iter()
        .map(|p| (p.norm(), [-2.0 * p.re, p.norm_sqr()]))
        .collect();
    denominators.extend(
        real.chunks_exact(2)
            .map(|pair| (pair[1].abs(), [-(pair[0] + pair[1]), pair[0] * pair[1]])),
    );
    denominators.sort_by(|a, b| a.0.total_cmp(&b.0));

    Ok(denominators
        .into_iter()
        .map(|(_, a)| {
            let z_inv = Complex64::new(1.0 / reference, 0.0);
            let gain = Sos { b: numerator, a }.response(z_inv).re;
            Sos { b: numerator.map(|c| c / gain), a }
        })
        .collect())
}

/// Causal filtering through the section cascade, zero initial state.
pub fn apply_filter(filter: &IirFilter, wave: &Waveform) -> Result<Waveform> {
    if filter.design.sample_rate_hz != wave.sample_rate_hz {
        return Err(Error::Param(format!(
            "filter designed for {} Hz applied to {} Hz audio",
            filter.design.sample_rate_hz, wave.sample_rate_hz
        )));
    }
    let mut signal: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    for sos in &filter.sections {
        let (mut s1, mut s2) = (0.0, 0.0);
        for x in signal.iter_mut() {
            // transposed direct form II
            let y = sos.b[0] * *x + s1;
            s1 = sos.b[1] * *x - sos.a[0] * y + s2;
            s2 = sos.b[2] * *x - sos.a[1] * y;
            *x = y;
        }
    }
    Waveform::new(signal.into_iter().map(|v| v as f32).collect(), wave.sample_rate_hz)
}

/// Magnitude response in dB at `f_hz`, floored at [`DB_FLOOR`].
pub fn freq_response(filter: &IirFilter, f_hz: f64) -> f64 {
    let omega = 2.0 * PI * f_hz / filter.design.sample_rate_hz as f64;
    let z_inv = Complex64::from_polar(1.0, -omega);
    let h: Complex64 = filter.sections.iter().map(|s| s.response(z_inv)).product();
    let mag = h.norm();
    if mag > 0.0 {
        (20.0 * mag.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}
