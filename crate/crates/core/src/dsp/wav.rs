//! Minimal RIFF/WAVE reader and writer.
//!
//! Supports mono 16-bit PCM and mono 32-bit IEEE float files, which is all
//! the pipeline produces or consumes. Multi-channel files are rejected
//! rather than silently downmixed.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return format_err("unexpected end of WAV file");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_wav<S: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<S>> {
    let bytes = fs::read(path.as_ref())?;
    read_wav_bytes(&bytes)
}

pub fn read_wav_bytes<S: Scalar>(bytes: &[u8]) -> Result<Waveform<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return format_err("missing RIFF header");
    }
    let _riff_size = r.u32()?;
    if r.take(4)? != b"WAVE" {
        return format_err("missing WAVE tag");
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while r.pos + 8 <= bytes.len() {
        let id: [u8; 4] = r.take(4)?.try_into().unwrap();
        let size = r.u32()? as usize;
        let body = r.take(size)?;
        if size % 2 == 1 && r.pos < bytes.len() {
            r.pos += 1; // chunks are word-aligned
        }
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return format_err("fmt chunk too short");
                }
                let mut fr = Reader { bytes: body, pos: 0 };
                let format = fr.u16()?;
                let channels = fr.u16()?;
                let rate = fr.u32()?;
                let _byte_rate = fr.u32()?;
                let _block_align = fr.u16()?;
                let bits = fr.u16()?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;
    if channels != 1 {
        return Err(Error::InvalidInput(format!(
            "only mono WAV is supported, file has {channels} channels"
        )));
    }

    let samples: Vec<S> = match (format, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| {
                let v = i16::from_le_bytes(c.try_into().unwrap());
                S::from_f64c(v as f64 / 32768.0)
            })
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| S::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => {
            return format_err(format!(
                "unsupported WAV encoding: format tag {format}, {bits} bits"
            ))
        }
    };
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("WAV contains non-finite samples".into()));
    }
    Ok(Waveform::new(samples, rate))
}

pub fn write_wav<S: Scalar>(
    path: impl AsRef<Path>,
    wave: &Waveform<S>,
    format: SampleFormat,
) -> Result<()> {
    let bytes = wav_bytes(wave, format);
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn wav_bytes<S: Scalar>(wave: &Waveform<S>, format: SampleFormat) -> Vec<u8> {
    let n = wave.samples.len();
    let (tag, bits, data_len) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16, 2 * n),
        SampleFormat::Float32 => (FORMAT_IEEE_FLOAT, 32u16, 4 * n),
    };
    let block_align = (bits / 8) as u32;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * block_align).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    match format {
        SampleFormat::Pcm16 => {
            for &s in &wave.samples {
                let v = (s.to_f64c() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SampleFormat::Float32 => {
            for &s in &wave.samples {
                out.extend_from_slice(&(s.to_f64c() as f32).to_le_bytes());
            }
        }
    }
    out
}
