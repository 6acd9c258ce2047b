use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

use super::Waveform;

/// Reads a RIFF/WAVE PCM16 mono file. No resampling is done: a file whose
/// rate differs from `expected_rate` is rejected.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let bytes = fsutil::read(path)?;
    let fail = |reason: String| Error::WavFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("missing RIFF/WAVE magic bytes".into()));
    }
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| fail(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "expected 16-bit integer PCM, found {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(fail(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(fail(format!(
            "sample rate {} Hz differs from configured {} Hz",
            spec.sample_rate, expected_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fail(e.to_string()))?;
    Ok(Waveform {
        samples,
        sample_rate: expected_rate,
    })
}

/// PCM16 value for an amplitude: `round(x * 32768)` saturated to `i16`.
pub fn to_pcm16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(wave: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::Data(format!("wav encode: {e}")))?;
        for &s in &wave.samples {
            writer
                .write_sample(to_pcm16(s))
                .map_err(|e| Error::Data(format!("wav encode: {e}")))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Data(format!("wav encode: {e}")))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    fsutil::atomic_write(path, &encode_wav(wave)?)
}
