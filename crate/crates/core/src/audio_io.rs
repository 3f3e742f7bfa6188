//! Mono PCM audio buffers and RIFF/WAVE file I/O.
//!
//! Reading accepts PCM 16-bit and IEEE float 32-bit data with any number of
//! channels (averaged down to mono). Writing always produces PCM 16-bit mono.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Working sample rate of every pipeline in this crate.
pub const WORKING_RATE_HZ: u32 = 16_000;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
}

/// Mono samples in `[-1, 1]` together with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        let buf = Self {
            samples,
            sample_rate_hz,
        };
        buf.validate()?;
        Ok(buf)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.sample_rate_hz == 0 {
            return Err(AudioError::InvalidBuffer("sample rate must be positive".into()));
        }
        if self.samples.is_empty() {
            return Err(AudioError::InvalidBuffer("no samples".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidBuffer(format!("non-finite sample at {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::MalformedHeader(format!(
            "fmt chunk too short ({} bytes)",
            body.len()
        )));
    }
    let mut format = le_u16(body, 0);
    let bits_per_sample = le_u16(body, 14);
    if format == FORMAT_EXTENSIBLE {
        // WAVEFORMATEXTENSIBLE carries the real format tag in the sub-format GUID.
        if body.len() < 26 {
            return Err(AudioError::MalformedHeader("truncated extensible fmt chunk".into()));
        }
        format = le_u16(body, 24);
    }
    Ok(FmtChunk {
        format,
        channels: le_u16(body, 2),
        sample_rate: le_u32(body, 4),
        bits_per_sample,
    })
}

/// Parse a RIFF/WAVE byte image into a mono buffer.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE magic".into()));
    }
    let riff_size = le_u32(bytes, 4) as usize;
    if riff_size + 8 > bytes.len() || riff_size < 4 {
        return Err(AudioError::MalformedHeader(format!(
            "RIFF size {riff_size} inconsistent with file length {}",
            bytes.len()
        )));
    }
    let end = riff_size + 8;

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= end {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= end)
            .ok_or_else(|| {
                AudioError::MalformedHeader(format!(
                    "chunk {:?} of size {size} overruns file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[body_start..body_end])?),
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::MalformedHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedHeader("no data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }

    let channels = usize::from(fmt.channels);
    let interleaved: Vec<f32> = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag {format} with {bits} bits per sample"
            )))
        }
    };

    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(AudioError::MalformedHeader("data chunk holds no frames".into()));
    }
    let samples: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| {
            let mean = frame.iter().map(|&s| f64::from(s)).sum::<f64>() / channels as f64;
            let s = mean as f32;
            if s.is_finite() {
                s.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer::new(samples, fmt.sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => AudioError::MissingFile(path.display().to_string()),
        _ => AudioError::IoFailure(e),
    })?;
    decode_wav(&bytes)
}

/// Quantize one sample to signed 16-bit, rounding to nearest and clamping
/// full scale to 32767.
pub fn quantize_i16(s: f32) -> i16 {
    (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Serialize a buffer as a PCM 16-bit mono RIFF/WAVE byte image.
pub fn encode_wav(audio: &AudioBuffer) -> Result<Vec<u8>, AudioError> {
    audio.validate()?;
    let data_len = audio.samples.len() * 2;
    let data_len_u32 = u32::try_from(data_len)
        .ok()
        .filter(|n| *n <= u32::MAX - 36)
        .ok_or_else(|| AudioError::InvalidBuffer("too many samples for RIFF".into()))?;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len_u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len_u32.to_le_bytes());
    for &s in &audio.samples {
        out.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    Ok(out)
}

pub fn save_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), AudioError> {
    let bytes = encode_wav(audio)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Linear-interpolation resampler.
///
/// Output sample `j` sits at source position `j * src / dst`; positions past
/// the last source sample hold the last value.
pub fn resample_linear(audio: &AudioBuffer, target_rate_hz: u32) -> Result<AudioBuffer, AudioError> {
    if target_rate_hz == 0 {
        return Err(AudioError::InvalidBuffer("target rate must be positive".into()));
    }
    if target_rate_hz == audio.sample_rate_hz {
        return Ok(audio.clone());
    }
    let src = &audio.samples;
    let ratio = f64::from(target_rate_hz) / f64::from(audio.sample_rate_hz);
    let out_len = ((src.len() as f64 * ratio).round() as usize).max(1);
    let step = f64::from(audio.sample_rate_hz) / f64::from(target_rate_hz);
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = pos.floor() as usize;
            if i >= last {
                return src[last];
            }
            let frac = pos - i as f64;
            (f64::from(src[i]) * (1.0 - frac) + f64::from(src[i + 1]) * frac) as f32
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate_hz: target_rate_hz,
    })
}
