//! Mono RIFF/WAVE reading and writing: 16-bit PCM and 32-bit float.

use std::fs;
use std::path::Path;

use crate::data::AudioClip;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding of a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Fmt {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

fn parse_fmt(path: &Path, body: &[u8]) -> Result<Fmt> {
    if body.len() < 16 {
        return Err(format_err(path, "truncated fmt chunk"));
    }
    let mut tag = u16_at(body, 0);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(format_err(path, "truncated fmt chunk (extensible)"));
        }
        tag = u16_at(body, 24);
    }
    Ok(Fmt { tag, channels: u16_at(body, 2), rate: u32_at(body, 4), bits: u16_at(body, 14) })
}

/// Parses a mono WAV file from memory. `path` is only used in messages.
pub fn parse_wav(path: &Path, bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(format_err(path, "missing RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "not a RIFF/WAVE file"));
    }
    let mut fmt = None;
    let mut data = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let name = String::from_utf8_lossy(id).trim_end().to_string();
        if start + size > bytes.len() {
            return Err(format_err(path, format!("truncated {name} chunk: {size} bytes declared, {} present", bytes.len() - start)));
        }
        let body = &bytes[start..start + size];
        match id {
            b"fmt " => fmt = Some(parse_fmt(path, body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        pos = start + size + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| format_err(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| format_err(path, "missing data chunk"))?;
    if fmt.channels != 1 {
        return Err(format_err(path, format!("{} channels; only mono is supported", fmt.channels)));
    }
    if fmt.rate == 0 {
        return Err(format_err(path, "sample rate is zero"));
    }
    let samples: Vec<f64> = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0).collect(),
        (FORMAT_FLOAT, 32) => {
            data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
        }
        (tag, bits) => {
            return Err(format_err(
                path,
                format!("unsupported codec (format tag {tag}, {bits} bits); expected 16-bit PCM or 32-bit float"),
            ))
        }
    };
    let n = samples.len();
    let samples = Tensor::from_vec(&[n], samples)?;
    samples.ensure_finite(&path.display().to_string())?;
    Ok(AudioClip { samples, rate: fmt.rate })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_wav(path, &bytes)
}

/// Encodes a clip as WAV bytes.
pub fn encode_wav(clip: &AudioClip, format: SampleFormat) -> Result<Vec<u8>> {
    if clip.rate == 0 {
        return Err(invalid("sample rate is zero"));
    }
    clip.samples.ensure_finite("clip")?;
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = clip.samples.len() * block as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.rate.to_le_bytes());
    out.extend_from_slice(&(clip.rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in clip.samples.data() {
        match format {
            SampleFormat::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    Ok(out)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: SampleFormat) -> Result<()> {
    fs::write(path, encode_wav(clip, format)?)?;
    Ok(())
}
