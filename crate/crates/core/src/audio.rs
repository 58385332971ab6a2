//! Audio front end: WAV decoding, resampling, fixed-length clips, STFT,
//! log-power spectrograms, per-bin standardization, SpecAugment masks and the
//! 2x2 space-to-channel squeeze that produces flow inputs.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 64_000;
pub const N_FFT: usize = 512;
pub const HOP: usize = 160;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-6;

const ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
const CUTOFF_FRACTION: f64 = 0.45;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV data chunk is truncated")]
    TruncatedData,
    #[error("invalid sample rate {0} Hz")]
    InvalidRate(u32),
    #[error("clip is empty")]
    EmptyClip,
    #[error("expected {expected}, got {actual}")]
    WrongShape { expected: String, actual: String },
    #[error("bin count mismatch: standardizer has {expected}, spectrogram has {actual}")]
    BinMismatch { expected: usize, actual: usize },
    #[error("standardizer needs at least one spectrogram")]
    NoSpectrograms,
    #[error("feature cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio at a given sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Decodes a PCM16 or float32 RIFF/WAVE file, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let file = File::open(path.as_ref())?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(header_error)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    let declared = reader.len() as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(data_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(data_error)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?}"
            )))
        }
    };
    if interleaved.len() < declared || !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::TruncatedData);
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioClip::new(samples, spec.sample_rate))
}

fn header_error(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            AudioError::MalformedHeader("file ends inside the header".into())
        }
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::FormatError(msg) => AudioError::MalformedHeader(msg.into()),
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            AudioError::UnsupportedEncoding(e.to_string())
        }
        other => AudioError::MalformedHeader(other.to_string()),
    }
}

fn data_error(e: hound::Error) -> AudioError {
    match e {
        // hound reports a short read as a custom error
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || io.to_string().contains("enough bytes") =>
        {
            AudioError::TruncatedData
        }
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::UnfinishedSample => AudioError::TruncatedData,
        other => AudioError::MalformedHeader(other.to_string()),
    }
}

/// Writes a mono PCM16 file. Samples are scaled by 32768 and clamped.
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::MalformedHeader(other.to_string()),
    })?;
    for &s in &clip.samples {
        writer
            .write_sample(quantize_pcm16(s))
            .map_err(|e| AudioError::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .finalize()
        .map_err(|e| AudioError::Io(std::io::Error::other(e.to_string())))
}

pub fn quantize_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The cutoff is `0.45 * min(source, target)` Hz and the kernel spans 32
/// zero crossings of the sinc on each side. Each output sample is normalized
/// by the kernel's tap sum so constant signals are reproduced exactly away
/// from the edges. Output length is `round(L * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if clip.sample_rate < 8000 {
        return Err(AudioError::InvalidRate(clip.sample_rate));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as u64;
    let tgt = target_rate as u64;
    let out_len = ((clip.len() as f64) * tgt as f64 / src as f64).round() as usize;
    // cutoff as a fraction of the source rate
    let fc = CUTOFF_FRACTION * (src.min(tgt) as f64) / src as f64;
    let half_width = ZERO_CROSSINGS / (2.0 * fc);
    let reach = half_width.floor() as i64;
    let g = gcd(src, tgt);
    let phases = tgt / g;
    let mut kernels: HashMap<u64, (Vec<f64>, f64)> = HashMap::new();
    let kernel_for = |frac: f64| -> (Vec<f64>, f64) {
        // taps for offsets k = -reach..=reach+1 relative to floor(position)
        let taps: Vec<f64> = (-reach..=reach + 1)
            .map(|k| {
                let u = frac - k as f64;
                if u.abs() >= half_width {
                    return 0.0;
                }
                let arg = 2.0 * fc * u;
                let sinc = if arg == 0.0 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let r = u / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA);
                2.0 * fc * sinc * window
            })
            .collect();
        let norm = taps.iter().sum();
        (taps, norm)
    };
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        // source position n * src / tgt = base + rem / tgt
        let num = n * src;
        let base = (num / tgt) as i64;
        let rem = num % tgt;
        let phase = (rem / g) % phases;
        let (taps, norm) = kernels
            .entry(phase)
            .or_insert_with(|| kernel_for(rem as f64 / tgt as f64));
        let mut acc = 0.0;
        for (i, &w) in taps.iter().enumerate() {
            let k = base + i as i64 - reach;
            if k >= 0 && (k as usize) < clip.len() {
                acc += w * clip.samples[k as usize];
            }
        }
        out.push(acc / *norm);
    }
    Ok(AudioClip::new(out, target_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Crops (random offset in training, centered in evaluation) or zero-pads at
/// the end to exactly `target` samples.
pub fn fix_length<R: Rng + ?Sized>(
    clip: &AudioClip,
    target: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if clip.sample_rate != SAMPLE_RATE {
        return Err(AudioError::InvalidRate(clip.sample_rate));
    }
    let len = clip.len();
    let samples = if len >= target {
        let slack = len - target;
        let offset = match mode {
            Mode::Train if slack > 0 => rng.random_range(0..=slack),
            Mode::Train => 0,
            Mode::Eval => slack / 2,
        };
        clip.samples[offset..offset + target].to_vec()
    } else {
        let mut s = clip.samples.clone();
        s.resize(target, 0.0);
        s
    };
    Ok(AudioClip::new(samples, clip.sample_rate))
}

/// Complex STFT coefficients, `frames x bins`, row-major.
#[derive(Debug, Clone)]
pub struct StftGrid {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Center-aligned STFT with reflect padding; `1 + L / hop` frames.
pub fn stft(clip: &AudioClip) -> Result<StftGrid> {
    if clip.sample_rate != SAMPLE_RATE || clip.len() != CLIP_SAMPLES {
        return Err(AudioError::WrongShape {
            expected: format!("{CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz"),
            actual: format!("{} samples at {} Hz", clip.len(), clip.sample_rate),
        });
    }
    Ok(stft_raw(&clip.samples))
}

pub(crate) fn stft_raw(x: &[f64]) -> StftGrid {
    let pad = N_FFT / 2;
    let len = x.len();
    let padded: Vec<f64> = (0..len + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            let j = if j < 0 {
                -j
            } else if j >= len as isize {
                2 * (len as isize - 1) - j
            } else {
                j
            };
            x[j.clamp(0, len as isize - 1) as usize]
        })
        .collect();
    let frames = 1 + len / HOP;
    let window = hann_periodic(N_FFT);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut data = Vec::with_capacity(frames * N_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
    for t in 0..frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..N_BINS]);
    }
    StftGrid {
        frames,
        bins: N_BINS,
        data,
    }
}

/// Log-power grid, `frames x bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
    pub frame_hop: f64,
    pub bin_width: f64,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Self {
        assert_eq!(frames * bins, data.len());
        Spectrogram {
            frames,
            bins,
            data,
            frame_hop: HOP as f64 / SAMPLE_RATE as f64,
            bin_width: SAMPLE_RATE as f64 / N_FFT as f64,
        }
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }
}

/// `ln(|X|^2 + 1e-10)` per coefficient.
pub fn log_power(grid: &StftGrid) -> Spectrogram {
    let data = grid
        .data
        .iter()
        .map(|c| (c.norm_sqr() + LOG_FLOOR).ln())
        .collect();
    Spectrogram::new(grid.frames, grid.bins, data)
}

/// Per-frequency-bin z-normalization fitted on training spectrograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl Standardizer {
    /// Population mean and standard deviation per bin, pooled over frames and
    /// spectrograms; standard deviations are floored at 1e-6.
    pub fn fit(spectrograms: &[Spectrogram]) -> Result<Self> {
        let first = spectrograms.first().ok_or(AudioError::NoSpectrograms)?;
        let bins = first.bins;
        let mut sum = vec![0.0; bins];
        let mut rows = 0usize;
        for s in spectrograms {
            if s.bins != bins {
                return Err(AudioError::BinMismatch {
                    expected: bins,
                    actual: s.bins,
                });
            }
            for row in s.data.chunks_exact(bins) {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            rows += s.frames;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        let mut sq = vec![0.0; bins];
        for s in spectrograms {
            for row in s.data.chunks_exact(bins) {
                for ((acc, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / rows as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Standardizer {
            mean,
            std,
            count: spectrograms.len(),
        })
    }

    pub fn apply(&self, s: &Spectrogram) -> Result<Spectrogram> {
        self.check(s)?;
        let mut out = s.clone();
        for row in out.data.chunks_exact_mut(s.bins) {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, s: &Spectrogram) -> Result<Spectrogram> {
        self.check(s)?;
        let mut out = s.clone();
        for row in out.data.chunks_exact_mut(s.bins) {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + m;
            }
        }
        Ok(out)
    }

    fn check(&self, s: &Spectrogram) -> Result<()> {
        if s.bins != self.mean.len() {
            return Err(AudioError::BinMismatch {
                expected: self.mean.len(),
                actual: s.bins,
            });
        }
        Ok(())
    }
}

pub const MAX_FREQ_MASK: usize = 16;
pub const MAX_TIME_MASK: usize = 40;
pub const MASKS_PER_AXIS: usize = 2;

/// Frequency and time ranges zeroed by SpecAugment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlan {
    pub freq: Vec<Range<usize>>,
    pub time: Vec<Range<usize>>,
}

impl MaskPlan {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, frames: usize, bins: usize) -> Self {
        let mut draw = |max_width: usize, extent: usize| -> Vec<Range<usize>> {
            (0..MASKS_PER_AXIS)
                .filter_map(|_| {
                    let width = rng.random_range(0..=max_width.min(extent));
                    let start = rng.random_range(0..=extent - width);
                    (width > 0).then_some(start..start + width)
                })
                .collect()
        };
        let freq = draw(MAX_FREQ_MASK, bins);
        let time = draw(MAX_TIME_MASK, frames);
        MaskPlan { freq, time }
    }

    pub fn apply(&self, s: &Spectrogram) -> Spectrogram {
        let mut out = s.clone();
        for t in 0..s.frames {
            let row = &mut out.data[t * s.bins..(t + 1) * s.bins];
            if self.time.iter().any(|r| r.contains(&t)) {
                row.fill(0.0);
                continue;
            }
            for r in &self.freq {
                row[r.start.min(s.bins)..r.end.min(s.bins)].fill(0.0);
            }
        }
        out
    }
}

/// Up to two frequency masks (width 0..=16 bins) and two time masks (width
/// 0..=40 frames); masked entries become 0, the standardized mean.
pub fn spec_augment<R: Rng + ?Sized>(s: &Spectrogram, rng: &mut R) -> Spectrogram {
    MaskPlan::sample(rng, s.frames, s.bins).apply(s)
}

pub const FEATURE_FRAMES: usize = 400;
pub const FEATURE_BINS: usize = 256;

/// `C x T' x F'` flow input (4 x 200 x 128 for a 4 s clip).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(pub Tensor);

impl FeatureTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }
}

/// Crops a standardized spectrogram to 400 x 256 and squeezes 2x2 blocks into
/// channels: `channel = 2 * (t % 2) + (f % 2)`.
pub fn to_feature(s: &Spectrogram) -> Result<FeatureTensor> {
    if s.frames != FEATURE_FRAMES + 1 || s.bins != FEATURE_BINS + 1 {
        return Err(AudioError::WrongShape {
            expected: format!("{} x {} spectrogram", FEATURE_FRAMES + 1, FEATURE_BINS + 1),
            actual: format!("{} x {}", s.frames, s.bins),
        });
    }
    let grid: Vec<f64> = (0..FEATURE_FRAMES)
        .flat_map(|t| s.data[t * s.bins..t * s.bins + FEATURE_BINS].iter().copied())
        .collect();
    Ok(squeeze(&grid, FEATURE_FRAMES, FEATURE_BINS))
}

/// Space-to-channel squeeze of a `frames x bins` grid with even sides.
pub fn squeeze(grid: &[f64], frames: usize, bins: usize) -> FeatureTensor {
    assert!(frames.is_multiple_of(2) && bins.is_multiple_of(2) && grid.len() == frames * bins);
    let (t2, f2) = (frames / 2, bins / 2);
    let mut data = vec![0.0; grid.len()];
    for t in 0..frames {
        for f in 0..bins {
            let c = 2 * (t % 2) + (f % 2);
            data[(c * t2 + t / 2) * f2 + f / 2] = grid[t * bins + f];
        }
    }
    FeatureTensor(Tensor::new(&[4, t2, f2], data).expect("squeeze shape"))
}

/// Inverse of [`squeeze`]: returns the `2T' x 2F'` grid.
pub fn unsqueeze(x: &FeatureTensor) -> Vec<f64> {
    let [c, t2, f2] = x.dims();
    assert_eq!(c, 4);
    let (frames, bins) = (2 * t2, 2 * f2);
    let data = x.0.data();
    let mut grid = vec![0.0; frames * bins];
    for t in 0..frames {
        for f in 0..bins {
            let c = 2 * (t % 2) + (f % 2);
            grid[t * bins + f] = data[(c * t2 + t / 2) * f2 + f / 2];
        }
    }
    grid
}

const CACHE_MAGIC: &[u8; 4] = b"MDFT";
const CACHE_VERSION: u32 = 1;

/// Writes the flat `MDFT` feature cache format.
pub fn write_feature_cache(path: impl AsRef<Path>, x: &FeatureTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    for d in x.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in x.0.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(AudioError::Cache("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CACHE_VERSION {
        return Err(AudioError::Cache(format!("unsupported version {version}")));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let n: usize = dims.iter().product();
    let payload = &bytes[20..];
    if payload.len() != n * 8 {
        return Err(AudioError::Cache(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&dims, data)
        .map(FeatureTensor)
        .map_err(|e| AudioError::Cache(e.to_string()))
}

/// Full preprocessing of a 16 kHz clip up to the standardized spectrogram.
pub fn standardized_spectrogram<R: Rng + ?Sized>(
    clip: &AudioClip,
    mode: Mode,
    rng: &mut R,
    standardizer: &Standardizer,
) -> Result<Spectrogram> {
    let fixed = fix_length(clip, CLIP_SAMPLES, mode, rng)?;
    standardizer.apply(&log_power(&stft(&fixed)?))
}

/// Log-power spectrogram of the center-cropped clip (no standardization).
pub fn eval_log_power(clip: &AudioClip) -> Result<Spectrogram> {
    let mut unused = crate::rng::seeded(0);
    let fixed = fix_length(clip, CLIP_SAMPLES, Mode::Eval, &mut unused)?;
    Ok(log_power(&stft(&fixed)?))
}

/// Reads a WAV file and brings it to 16 kHz mono.
pub fn load_clip(path: impl AsRef<Path>) -> Result<AudioClip> {
    resample(&read_wav(path)?, SAMPLE_RATE)
}
