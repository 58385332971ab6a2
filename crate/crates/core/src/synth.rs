//! Synthetic benchmark: coherent harmonic "real" clips and spectrally
//! irregular "fake" clips built on the same harmonic skeleton.
//!
//! A real and a fake clip generated from identically seeded generators share
//! their skeleton (fundamental, envelope, vibrato, noise floor), so they form
//! a pair that differs only in the fake-specific perturbations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, CLIP_SAMPLES, LOG_FLOOR, SAMPLE_RATE};
use crate::manifest::{Label, Manifest, ManifestEntry, ManifestError, Split};
use crate::rng::{self, DetRng};

pub const F0_RANGE: (f64, f64) = (110.0, 440.0);
pub const HARMONICS: usize = 6;
pub const PEAK: f64 = 0.9;
pub const BLOCK_SAMPLES: usize = 1_600;
pub const BLOCKS: usize = CLIP_SAMPLES / BLOCK_SAMPLES;
pub const BURST_BLOCKS: usize = BLOCKS / 5;
pub const BURST_BAND: (f64, f64) = (2_000.0, 6_000.0);
/// Noise-burst RMS relative to the harmonic RMS, in dB.
pub const BURST_GAIN_DB: f64 = -3.0;
/// Range of the per-clip broadband noise floor relative to the harmonic RMS.
pub const FLOOR_DB: (f64, f64) = (-70.0, -60.0);
/// Longest rest (silent gap) in a clip, in seconds.
pub const REST_MAX: f64 = 0.1;
const REST_RAMP: f64 = 0.005;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// What to generate: the class and the seed of the clip's generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub class: Label,
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> AudioClip {
        let mut rng = rng::seeded(self.seed);
        match self.class {
            Label::Real => gen_real_clip(&mut rng),
            Label::Fake => gen_fake_clip(&mut rng),
        }
    }
}

struct Skeleton {
    f0: f64,
    env_rate: f64,
    env_phase: f64,
    vib_phase: f64,
    start_phases: [f64; HARMONICS],
    rest: (f64, f64),
    floor: Vec<f64>,
}

impl Skeleton {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let f0 = rng.random_range(F0_RANGE.0..=F0_RANGE.1);
        let env_rate = rng.random_range(0.5..=2.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let vib_phase = rng.random_range(0.0..2.0 * PI);
        let mut start_phases = [0.0; HARMONICS];
        for p in &mut start_phases {
            *p = rng.random_range(0.0..2.0 * PI);
        }
        let rest_start = rng.random_range(0.5..=3.5);
        let rest_len = rng.random_range(0.0..=REST_MAX);
        let floor_db = rng.random_range(FLOOR_DB.0..=FLOOR_DB.1);
        let floor_rms = harmonic_rms() * db(floor_db);
        let floor = (0..CLIP_SAMPLES)
            .map(|_| floor_rms * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Skeleton {
            f0,
            env_rate,
            env_phase,
            vib_phase,
            start_phases,
            rest: (rest_start, rest_len),
            floor,
        }
    }

    fn envelope(&self, t: f64) -> f64 {
        (0.65 + 0.35 * (2.0 * PI * self.env_rate * t + self.env_phase).sin()) * self.gate(t)
    }

    /// Silence between `rest.0` and `rest.0 + rest.1` with raised-cosine ramps.
    fn gate(&self, t: f64) -> f64 {
        let (start, len) = self.rest;
        let d = if t < start { start - t } else if t > start + len { t - start - len } else { 0.0 };
        if d >= REST_RAMP {
            1.0
        } else {
            0.5 - 0.5 * (PI * d / REST_RAMP).cos()
        }
    }

    /// Instantaneous fundamental with +-1% vibrato at 5 Hz.
    fn frequency(&self, t: f64) -> f64 {
        self.f0 * (1.0 + 0.01 * (2.0 * PI * 5.0 * t + self.vib_phase).sin())
    }
}

fn db(x: f64) -> f64 {
    10f64.powf(x / 20.0)
}

/// RMS of the unit-envelope harmonic stack with amplitudes `1/k`.
fn harmonic_rms() -> f64 {
    ((1..=HARMONICS).map(|k| 0.5 / (k * k) as f64).sum::<f64>()).sqrt()
}

fn peak_normalize(mut x: Vec<f64>) -> AudioClip {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::new(x, SAMPLE_RATE)
}

/// Phase-continuous harmonic stack; `amps(block, k)` and `resets(block)`
/// let the fake generator perturb it per block.
fn render(
    sk: &Skeleton,
    mut amps: impl FnMut(usize, usize) -> f64,
    mut reset: impl FnMut(usize) -> Option<[f64; HARMONICS]>,
) -> Vec<f64> {
    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut phase = sk.start_phases;
    let mut out = vec![0.0; CLIP_SAMPLES];
    for block in 0..BLOCKS {
        if block > 0 {
            if let Some(p) = reset(block) {
                phase = p;
            }
        }
        let a: Vec<f64> = (0..HARMONICS).map(|k| amps(block, k)).collect();
        for n in block * BLOCK_SAMPLES..(block + 1) * BLOCK_SAMPLES {
            let t = n as f64 * dt;
            let f = sk.frequency(t);
            let mut v = 0.0;
            for k in 0..HARMONICS {
                v += a[k] * phase[k].sin();
                phase[k] = (phase[k] + 2.0 * PI * f * (k + 1) as f64 * dt) % (2.0 * PI);
            }
            out[n] = sk.envelope(t) * v + sk.floor[n];
        }
    }
    out
}

/// Harmonic stack over a random fundamental in [110, 440] Hz with `1/k`
/// amplitudes, slow envelope with one short rest, mild vibrato and a
/// per-clip noise floor.
pub fn gen_real_clip<R: Rng + ?Sized>(rng: &mut R) -> AudioClip {
    let sk = Skeleton::draw(rng);
    peak_normalize(render(&sk, |_, k| 1.0 / (k + 1) as f64, |_| None))
}

/// The real construction with per-block amplitude re-randomization, phase
/// resets at every block boundary and 2-6 kHz noise bursts in a fifth of
/// the blocks.
pub fn gen_fake_clip<R: Rng + ?Sized>(rng: &mut R) -> AudioClip {
    let sk = Skeleton::draw(rng);
    let amps: Vec<[f64; HARMONICS]> = (0..BLOCKS)
        .map(|_| {
            let mut a = [0.0; HARMONICS];
            for (k, v) in a.iter_mut().enumerate() {
                *v = rng.random_range(0.2..=1.8) / (k + 1) as f64;
            }
            a
        })
        .collect();
    let resets: Vec<[f64; HARMONICS]> = (0..BLOCKS)
        .map(|_| {
            let mut p = [0.0; HARMONICS];
            for v in &mut p {
                *v = rng.random_range(0.0..2.0 * PI);
            }
            p
        })
        .collect();
    let mut order: Vec<usize> = (0..BLOCKS).collect();
    order.shuffle(rng);
    let burst_blocks = &order[..BURST_BLOCKS];
    let noise = band_noise(rng, BURST_BAND, harmonic_rms() * db(BURST_GAIN_DB));
    let mut x = render(&sk, |b, k| amps[b][k], |b| Some(resets[b]));
    for &b in burst_blocks {
        for n in b * BLOCK_SAMPLES..(b + 1) * BLOCK_SAMPLES {
            x[n] += noise[n];
        }
    }
    peak_normalize(x)
}

/// White noise restricted to `band` (Hz) by zeroing FFT bins, scaled to `rms`.
fn band_noise<R: Rng + ?Sized>(rng: &mut R, band: (f64, f64), rms: f64) -> Vec<f64> {
    let n = CLIP_SAMPLES;
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let hz = SAMPLE_RATE as f64 / n as f64;
    for (i, v) in buf.iter_mut().enumerate() {
        let f = i.min(n - i) as f64 * hz;
        if f < band.0 || f > band.1 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| v * rms / cur).collect()
}

/// Frame-averaged ratio of geometric to arithmetic mean of the power bins.
pub fn spectral_flatness(clip: &AudioClip) -> Result<f64> {
    let grid = audio::stft(clip)?;
    let mut total = 0.0;
    for frame in grid.data.chunks_exact(grid.bins) {
        let power: Vec<f64> = frame.iter().map(|c| c.norm_sqr()).collect();
        let am = power.iter().sum::<f64>() / power.len() as f64;
        let gm = (power.iter().map(|p| (p + LOG_FLOOR).ln()).sum::<f64>() / power.len() as f64).exp();
        total += gm / (am + LOG_FLOOR);
    }
    Ok(total / grid.frames as f64)
}

/// Mean power per frame in bins above `hz`.
pub fn band_power_above(clip: &AudioClip, hz: f64) -> Result<f64> {
    let grid = audio::stft(clip)?;
    let first = (hz / (SAMPLE_RATE as f64 / audio::N_FFT as f64)).ceil() as usize;
    let total: f64 = grid
        .data
        .chunks_exact(grid.bins)
        .map(|f| f[first..].iter().map(|c| c.norm_sqr()).sum::<f64>())
        .sum();
    Ok(total / grid.frames as f64)
}

/// One clip to write: its label, split, and generator seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusItem {
    pub label: Label,
    pub split: Split,
    pub seed: u64,
}

/// Seed of clip `index` in a corpus seeded with `seed`; real and fake clips
/// with the same index are paired.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut r = rng::stream(seed, index as u64 + 1);
    r.random()
}

/// 70/15/15 train/val/test assignment of `n` clips by seeded shuffle.
pub fn assign_splits(n: usize, rng: &mut DetRng) -> Vec<Split> {
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = ((n as f64 * 0.15).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Writes `items` as PCM16 WAVs plus a manifest in `out_dir` and returns the
/// manifest path. Files are named `<label>_<index>.wav` by position.
pub fn write_corpus(out_dir: impl AsRef<Path>, items: &[CorpusItem]) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let name = format!("{}_{i:05}.wav", item.label.as_str());
        let clip = SynthSpec {
            class: item.label,
            seed: item.seed,
        }
        .generate();
        audio::write_wav_pcm16(out_dir.join(&name), &clip)?;
        entries.push(ManifestEntry {
            path: name,
            label: item.label,
            split: item.split,
        });
    }
    let path = out_dir.join(MANIFEST_NAME);
    Manifest::write(&entries, &path)?;
    Ok(path)
}

/// `n_real` real and `n_fake` fake clips (fake `i` paired with real `i`),
/// split 70/15/15 within each class.
pub fn build_corpus(
    n_real: usize,
    n_fake: usize,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<PathBuf> {
    let mut split_rng = rng::stream(seed, 0);
    let mut items = Vec::with_capacity(n_real + n_fake);
    for (label, n) in [(Label::Real, n_real), (Label::Fake, n_fake)] {
        let splits = assign_splits(n, &mut split_rng);
        for (i, split) in splits.into_iter().enumerate() {
            items.push(CorpusItem {
                label,
                split,
                seed: clip_seed(seed, i),
            });
        }
    }
    write_corpus(out_dir, &items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seed: u64) -> (AudioClip, AudioClip) {
        (
            SynthSpec { class: Label::Real, seed }.generate(),
            SynthSpec { class: Label::Fake, seed }.generate(),
        )
    }

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let (r1, f1) = pair(3);
        let (r2, f2) = pair(3);
        assert_eq!(r1, r2);
        assert_eq!(f1, f2);
        for c in [&r1, &f1] {
            assert_eq!(c.samples.len(), CLIP_SAMPLES);
            assert_eq!(c.sample_rate, SAMPLE_RATE);
            let peak = c.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(peak <= 0.99 && (peak - PEAK).abs() < 1e-12);
        }
    }

    #[test]
    fn real_spectrum_peaks_at_harmonics() {
        for seed in 0..10 {
            let mut r = rng::seeded(seed);
            let sk = Skeleton::draw(&mut r);
            let clip = SynthSpec { class: Label::Real, seed }.generate();
            let grid = audio::stft(&clip).unwrap();
            let mut mag = vec![0.0; grid.bins];
            for frame in grid.data.chunks_exact(grid.bins) {
                for (m, c) in mag.iter_mut().zip(frame) {
                    *m += c.norm();
                }
            }
            // six largest local maxima of the frame-averaged magnitude
            let mut peaks: Vec<usize> = (1..mag.len() - 1)
                .filter(|&i| mag[i] > mag[i - 1] && mag[i] >= mag[i + 1])
                .collect();
            peaks.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
            let bin_hz = SAMPLE_RATE as f64 / audio::N_FFT as f64;
            let hits = peaks[..6]
                .iter()
                .filter(|&&p| {
                    let k = (p as f64 * bin_hz / sk.f0).round().max(1.0);
                    (p as f64 - k * sk.f0 / bin_hz).abs() <= 1.0
                })
                .count();
            assert!(hits >= 5, "seed {seed}: {hits} harmonic peaks");
        }
    }

    #[test]
    fn fakes_are_flatter_and_brighter_than_their_pairs() {
        let mut flatter = 0;
        for seed in 0..100 {
            let (real, fake) = pair(seed);
            if spectral_flatness(&fake).unwrap() > spectral_flatness(&real).unwrap() {
                flatter += 1;
            }
            assert!(
                band_power_above(&fake, 4000.0).unwrap() > band_power_above(&real, 4000.0).unwrap()
            );
        }
        assert!(flatter >= 95, "{flatter}/100");
    }

    #[test]
    fn corpus_examples() {
        let dir = tempfile::tempdir().unwrap();
        let empty = build_corpus(0, 0, dir.path().join("e"), 1).unwrap();
        assert_eq!(fs::read(&empty).unwrap(), b"");
        assert_eq!(fs::read_dir(dir.path().join("e")).unwrap().count(), 1);

        let a = build_corpus(10, 10, dir.path().join("a"), 42).unwrap();
        let b = build_corpus(10, 10, dir.path().join("b"), 42).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let m = Manifest::read(&a).unwrap();
        assert_eq!(m.entries.len(), 20);
        assert_eq!(m.select(Some(Split::Train), Some(Label::Real)).len(), 7);
        for e in &m.entries {
            let wa = fs::read(e.resolve(&m.base_dir)).unwrap();
            let wb = fs::read(dir.path().join("b").join(&e.path)).unwrap();
            assert_eq!(wa, wb);
        }

        // re-read samples within one PCM16 step of the generated ones
        let first = &m.entries[0];
        let idx: usize = first.path[5..10].parse().unwrap();
        let clip = SynthSpec {
            class: first.label,
            seed: clip_seed(42, idx),
        }
        .generate();
        let back = audio::read_wav(first.resolve(&m.base_dir)).unwrap();
        let lsb = 1.0 / 32768.0;
        for (x, y) in clip.samples.iter().zip(&back.samples) {
            assert!((x - y).abs() <= lsb);
        }
    }

    #[test]
    fn flatness_alone_separates_imperfectly() {
        use crate::eval::{compute_eer, ScoreRecord};
        let records: Vec<ScoreRecord> = (0..60)
            .flat_map(|i| {
                [Label::Real, Label::Fake].map(|class| {
                    let clip = SynthSpec { class, seed: clip_seed(7, i) }.generate();
                    ScoreRecord {
                        id: format!("{}{i}", class.as_str()),
                        label: class,
                        score: -spectral_flatness(&clip).unwrap(),
                    }
                })
            })
            .collect();
        let eer = compute_eer(&records).unwrap().eer;
        assert!(eer > 0.0 && eer <= 0.25, "flatness EER {eer}");
    }
}
