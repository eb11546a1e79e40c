use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Reads a mono 16-bit PCM WAV at 16 kHz, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| ingest(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(ingest(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(ingest(format!(
            "expected sample rate {SAMPLE_RATE} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(ingest(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| ingest(e.to_string()))?;
    if samples.is_empty() {
        return Err(ingest("no samples".into()));
    }
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Writes mono 16-bit PCM, clamping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io)?;
    }
    writer.finalize().map_err(io)
}
