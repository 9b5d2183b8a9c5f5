use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a mono RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float samples.
///
/// PCM16 samples are divided by 32768, so the full-scale negative value maps to −1.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes 16-bit PCM, scaling by 32768 and saturating at full scale.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &wave.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("{}: truncated data", path.display()))
        }
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat(format!("{}: unsupported codec", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let wave = read_wav(&path).unwrap();
        assert_eq!(wave.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(wave.sample_rate_hz, 16000);
    }

    #[test]
    fn silence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
        let wave = read_wav(&path).unwrap();
        assert_eq!(wave.len(), 16000);
        assert!(wave.samples.iter().all(|&s| s == 0.0));
        assert_eq!(wave.sample_rate_hz, 16000);
    }

    #[test]
    fn float32_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.write_sample(-0.75f32).unwrap();
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples, vec![0.25, -0.75]);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1i16).unwrap();
        w.write_sample(1i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFX0000WAVEjunkjunk").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn write_read_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let samples: Vec<f32> = (0..4000).map(|_| rng.gen_range(-0.999f32..0.999)).collect();
        write_wav(&path, &Waveform::new(samples.clone(), 16000).unwrap()).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }
}
