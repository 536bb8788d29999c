//! Audio standardization: mono, 44.1 kHz, 16-bit, at most 30 s.
//!
//! Downmix is the arithmetic mean of channels. Rate conversion uses a
//! Blackman-windowed sinc kernel spanning [`SINC_ZERO_CROSSINGS`] zero
//! crossings on each side of the output instant, low-passed at the lower of
//! the two Nyquist frequencies; weights are normalized to unit sum so DC is
//! preserved exactly. Cropping keeps the leading 30 s.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 44_100;
pub const MAX_DURATION_S: u32 = 30;
pub const MAX_FRAMES: usize = (TARGET_RATE * MAX_DURATION_S) as usize;
pub const SINC_ZERO_CROSSINGS: usize = 32;

const PHASE_TABLE_LIMIT: u64 = 1 << 16;

/// Interleaved linear PCM with samples normalized to full scale `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pcm {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<f32>,
}

impl Pcm {
    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Self {
        Pcm {
            sample_rate,
            channels: 1,
            samples,
        }
    }

    pub fn from_i16(sample_rate: u32, channels: u16, samples: &[i16]) -> Self {
        Pcm {
            sample_rate,
            channels,
            samples: samples.iter().map(|&s| s as f32 / 32768.0).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.samples.len() / self.channels as usize
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    /// Samples as 16-bit integers (only exact for standardized audio).
    pub fn to_i16(&self) -> Vec<i16> {
        self.samples.iter().map(|&x| quantize_i16(x)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.channels == 0 {
            return Err(Error::Audio(format!(
                "corrupt header: {} Hz, {} channels",
                self.sample_rate, self.channels
            )));
        }
        if !self.samples.len().is_multiple_of(self.channels as usize) {
            return Err(Error::Audio(
                "corrupt data: sample count is not a multiple of channel count".into(),
            ));
        }
        if self.samples.is_empty() {
            return Err(Error::Audio("zero-length input".into()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(())
    }
}

fn quantize_i16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn quantize(x: f64) -> f32 {
    ((x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32
}

/// Converts any linear PCM input to the standard format.
///
/// Already-standard input (mono, 44.1 kHz, on the 16-bit grid, ≤ 30 s) is
/// returned unchanged, which also makes the operation idempotent.
pub fn standardize_audio(pcm: &Pcm) -> Result<Pcm> {
    pcm.validate()?;
    let mono = downmix(pcm);
    let n_out = output_frames(mono.len(), pcm.sample_rate);
    let resampled = if pcm.sample_rate == TARGET_RATE {
        let mut mono = mono;
        mono.truncate(n_out);
        mono
    } else {
        resample(&mono, pcm.sample_rate, TARGET_RATE, n_out)
    };
    Ok(Pcm::mono(
        TARGET_RATE,
        resampled.into_iter().map(quantize).collect(),
    ))
}

fn downmix(pcm: &Pcm) -> Vec<f64> {
    let ch = pcm.channels as usize;
    if ch == 1 {
        return pcm.samples.iter().map(|&s| s as f64).collect();
    }
    pcm.samples
        .chunks_exact(ch)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / ch as f64)
        .collect()
}

fn output_frames(n_in: usize, in_rate: u32) -> usize {
    let scaled = (n_in as u128 * TARGET_RATE as u128 / in_rate as u128) as usize;
    scaled.min(MAX_FRAMES)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc rate conversion evaluated at output instants
/// `t_i = i · in_rate / out_rate` (in input samples).
pub fn resample(input: &[f64], in_rate: u32, out_rate: u32, n_out: usize) -> Vec<f64> {
    let cutoff = (out_rate as f64 / in_rate as f64).min(1.0);
    let half = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let reach = half.ceil() as i64;
    let kernel = |x: f64| cutoff * sinc(cutoff * x) * blackman(x / half);

    let g = gcd(in_rate as u64, out_rate as u64);
    let up = out_rate as u64 / g;
    let down = in_rate as u64 / g;
    let taps = (2 * reach + 1) as usize;

    // weights for offsets base-reach ..= base+reach, one row per fractional phase
    let table: Option<Vec<f64>> = (up <= PHASE_TABLE_LIMIT).then(|| {
        let mut t = vec![0.0; up as usize * taps];
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            for (k, w) in t[phase as usize * taps..(phase as usize + 1) * taps]
                .iter_mut()
                .enumerate()
            {
                let offset = k as i64 - reach;
                *w = kernel(offset as f64 - frac);
            }
        }
        t
    });

    let n_in = input.len() as i64;
    let mut out = Vec::with_capacity(n_out);
    let mut row = vec![0.0; taps];
    for i in 0..n_out as u64 {
        let num = i * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let weights: &[f64] = match &table {
            Some(t) => &t[phase as usize * taps..(phase as usize + 1) * taps],
            None => {
                let frac = phase as f64 / up as f64;
                for (k, w) in row.iter_mut().enumerate() {
                    *w = kernel((k as i64 - reach) as f64 - frac);
                }
                &row
            }
        };
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            let j = base + k as i64 - reach;
            if j < 0 || j >= n_in {
                continue;
            }
            acc += w * input[j as usize];
            norm += w;
        }
        out.push(if norm != 0.0 { acc / norm } else { 0.0 });
    }
    out
}

/// Decodes a RIFF/WAV file (integer PCM 8–32 bit or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Pcm> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let reader = hound::WavReader::new(file).map_err(corrupt_header)?;
    decode(reader)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Pcm> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(corrupt_header)?;
    decode(reader)
}

fn corrupt_header(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::Audio("unsupported encoding".into()),
        other => Error::Audio(format!("corrupt header: {other}")),
    }
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Pcm> {
    let spec = reader.spec();
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()?
        }
        (format, bits) => {
            return Err(Error::Audio(format!(
                "unsupported encoding: {format:?} {bits}-bit"
            )))
        }
    };
    Ok(Pcm {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        samples,
    })
}

/// Writes 16-bit integer PCM.
pub fn write_wav(path: impl AsRef<Path>, pcm: &Pcm) -> Result<()> {
    let spec = hound::WavSpec {
        channels: pcm.channels,
        sample_rate: pcm.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in pcm.to_i16() {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
