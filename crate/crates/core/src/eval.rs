//! Scoring of manifests, equal error rate, ROC staircase and threshold
//! calibration. Convention: a higher score means more real; a clip is
//! accepted as real when `score >= threshold`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};
use crate::manifest::{Label, Manifest, Split};
use crate::model::{ModelError, MusicDetModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one real and one fake record (got {n_real} real, {n_fake} fake)")]
    SingleLabel { n_real: usize, n_fake: usize },
    #[error("no clips selected for scoring")]
    Empty,
    #[error("non-finite score for {0}")]
    NonFinite(String),
    #[error("duplicate clip id {0}")]
    DuplicateId(String),
    #[error("model has no attached standardizer")]
    NoStandardizer,
    #[error("{path}: {source}")]
    Clip { path: PathBuf, source: AudioError },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed score file {path} line {line}")]
    MalformedScores { path: PathBuf, line: usize },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub n_fake: usize,
    pub n_real: usize,
    /// `(FAR, FRR)` pairs in order of increasing threshold.
    pub roc: Vec<(f64, f64)>,
    pub threshold_at_eer: f64,
}

/// Eval-mode feature tensor `[1, C, T', F']` of a 16 kHz clip.
pub fn clip_feature(model: &MusicDetModel, clip: &AudioClip) -> Result<Tensor> {
    let st = model.standardizer.as_ref().ok_or(EvalError::NoStandardizer)?;
    let spec = st.apply(&audio::eval_log_power(clip)?)?;
    let x = audio::to_feature(&spec)?.into_tensor();
    let shape: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
    Ok(x.reshape(&shape).expect("same size"))
}

/// Per-dimension log-likelihood of one clip under the real prior.
pub fn score_clip(model: &MusicDetModel, clip: &AudioClip) -> Result<f64> {
    let x = clip_feature(model, clip)?;
    Ok(model.score(&x)?[0])
}

pub fn score_file(model: &MusicDetModel, path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let clip = audio::load_clip(path).map_err(|source| EvalError::Clip {
        path: path.to_path_buf(),
        source,
    })?;
    score_clip(model, &clip)
}

/// Scores of the manifest entries in `split` (all entries when `None`), in
/// manifest order, plus the number of unreadable clips skipped. With
/// `strict`, the first unreadable clip aborts instead.
pub fn score_dataset(
    model: &MusicDetModel,
    manifest: &Manifest,
    split: Option<Split>,
    strict: bool,
) -> Result<(Vec<ScoreRecord>, usize)> {
    let entries = manifest.select(split, None);
    if entries.is_empty() {
        return Err(EvalError::Empty);
    }
    let results: Vec<Result<f64>> = entries
        .par_iter()
        .map(|e| score_file(model, e.resolve(&manifest.base_dir)))
        .collect();
    let mut records = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(score) => records.push(ScoreRecord {
                id: e.path.clone(),
                label: e.label,
                score,
            }),
            Err(err @ EvalError::Clip { .. }) if !strict => {
                warn!("skipping: {err}");
                skipped += 1;
            }
            Err(err) => return Err(err),
        }
    }
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok((records, skipped))
}

fn counts(records: &[ScoreRecord]) -> Result<(usize, usize)> {
    let n_real = records.iter().filter(|r| r.label == Label::Real).count();
    let n_fake = records.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        return Err(EvalError::SingleLabel { n_real, n_fake });
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(EvalError::NonFinite(r.id.clone()));
    }
    Ok((n_real, n_fake))
}

/// Candidate thresholds (every distinct score and one just above the
/// largest) with FAR and FRR at each.
fn sweep(records: &[ScoreRecord], n_real: usize, n_fake: usize) -> Vec<(f64, f64, f64)> {
    let mut sorted: Vec<(f64, Label)> = records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max = sorted.last().expect("nonempty").0;
    let beyond = max + 1e-6 * max.abs().max(1.0);
    // reals strictly below / fakes at or above the current threshold
    let (mut real_below, mut fake_below) = (0usize, 0usize);
    let mut out = Vec::with_capacity(sorted.len() + 1);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        out.push((
            tau,
            (n_fake - fake_below) as f64 / n_fake as f64,
            real_below as f64 / n_real as f64,
        ));
        while i < sorted.len() && sorted[i].0 == tau {
            match sorted[i].1 {
                Label::Real => real_below += 1,
                Label::Fake => fake_below += 1,
            }
            i += 1;
        }
    }
    out.push((beyond, 0.0, 1.0));
    out
}

/// EER and its threshold from a threshold sweep `(tau, far, frr)`.
fn crossing(points: &[(f64, f64, f64)]) -> (f64, f64) {
    let d = |p: &(f64, f64, f64)| p.1 - p.2;
    if let Some(a) = points.iter().position(|p| d(p) == 0.0) {
        // every threshold in (previous, last of the zero run] is equivalent
        let b = a + points[a..].iter().take_while(|p| d(p) == 0.0).count() - 1;
        let lo = if a > 0 { points[a - 1].0 } else { points[a].0 };
        return (points[a].1, 0.5 * (lo + points[b].0));
    }
    let i = points
        .windows(2)
        .position(|w| d(&w[0]) > 0.0 && d(&w[1]) < 0.0)
        .expect("FAR - FRR goes from 1 to -1");
    let (p, q) = (points[i], points[i + 1]);
    let alpha = d(&p) / (d(&p) - d(&q));
    (p.1 + alpha * (q.1 - p.1), p.0 + alpha * (q.0 - p.0))
}

pub fn compute_eer(records: &[ScoreRecord]) -> Result<EvalReport> {
    let (n_real, n_fake) = counts(records)?;
    let points = sweep(records, n_real, n_fake);
    let (eer, threshold_at_eer) = crossing(&points);
    Ok(EvalReport {
        eer,
        n_fake,
        n_real,
        roc: staircase(&points),
        threshold_at_eer,
    })
}

fn staircase(points: &[(f64, f64, f64)]) -> Vec<(f64, f64)> {
    let mut roc: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &(_, far, frr) in points {
        if roc.last() != Some(&(far, frr)) {
            roc.push((far, frr));
        }
    }
    roc
}

/// `(FAR, FRR)` at every candidate threshold in increasing order, from
/// `(1, 0)` to `(0, 1)`, without repeated points.
pub fn roc_curve(records: &[ScoreRecord]) -> Result<Vec<(f64, f64)>> {
    let (n_real, n_fake) = counts(records)?;
    Ok(staircase(&sweep(records, n_real, n_fake)))
}

/// Decision threshold at the equal-error operating point.
pub fn calibrate_threshold(records: &[ScoreRecord]) -> Result<f64> {
    Ok(compute_eer(records)?.threshold_at_eer)
}

/// Formats like C's `%.9g`.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    } else {
        trim(format!("{x:.*}", (8 - exp) as usize))
    }
}

pub fn scores_csv(records: &[ScoreRecord]) -> Result<String> {
    let mut seen = HashSet::new();
    let mut out = String::from("id,label,score\n");
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(EvalError::DuplicateId(r.id.clone()));
        }
        if !r.score.is_finite() {
            return Err(EvalError::NonFinite(r.id.clone()));
        }
        writeln!(out, "{},{},{}", r.id, r.label.as_str(), format_score(r.score)).unwrap();
    }
    Ok(out)
}

pub fn write_scores_csv(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scores_csv(records)?).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line| EvalError::MalformedScores {
        path: path.to_path_buf(),
        line,
    };
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some("id,label,score") {
        return Err(bad(1));
    }
    lines
        .map(|(i, line)| {
            let mut it = line.rsplitn(3, ',');
            let (score, label, id) = (it.next(), it.next(), it.next());
            match (id, label.and_then(|l| l.parse().ok()), score.and_then(|s| s.parse().ok())) {
                (Some(id), Some(label), Some(score)) => Ok(ScoreRecord {
                    id: id.to_string(),
                    label,
                    score,
                }),
                _ => Err(bad(i + 1)),
            }
        })
        .collect()
}

/// Canonical JSON: sorted keys, shortest round-trip floats, trailing newline.
pub fn report_json(report: &EvalReport) -> String {
    let value = serde_json::to_value(report).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_report_json(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_json(report)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn records(real: &[f64], fake: &[f64]) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (i, &s) in real.iter().enumerate() {
            out.push(ScoreRecord {
                id: format!("r{i}"),
                label: Label::Real,
                score: s,
            });
        }
        for (i, &s) in fake.iter().enumerate() {
            out.push(ScoreRecord {
                id: format!("f{i}"),
                label: Label::Fake,
                score: s,
            });
        }
        out
    }

    /// Direct counting at every distinct score and beyond the maximum, then
    /// the first sign change of FAR - FRR.
    fn brute_force_eer(real: &[f64], fake: &[f64]) -> f64 {
        let mut taus: Vec<f64> = real.iter().chain(fake).copied().collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let max = *taus.last().unwrap();
        taus.push(max + 1e-6 * max.abs().max(1.0));
        let rates: Vec<(f64, f64)> = taus
            .iter()
            .map(|&t| {
                let far = fake.iter().filter(|&&s| s >= t).count() as f64 / fake.len() as f64;
                let frr = real.iter().filter(|&&s| s < t).count() as f64 / real.len() as f64;
                (far, frr)
            })
            .collect();
        for (i, &(far, frr)) in rates.iter().enumerate() {
            if far == frr {
                return far;
            }
            let (far2, frr2) = rates[i + 1];
            if far > frr && far2 < frr2 {
                let (d1, d2) = (far - frr, far2 - frr2);
                let a = d1 / (d1 - d2);
                return far + a * (far2 - far);
            }
        }
        unreachable!()
    }

    #[test]
    fn eer_examples() {
        let r = compute_eer(&records(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.75])).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.threshold_at_eer - 0.725).abs() < 1e-12);
        assert!((calibrate_threshold(&records(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.75])).unwrap() - 0.72).abs() < 0.01);

        let r = compute_eer(&records(&[3.0, 4.0], &[1.0, 2.0])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.threshold_at_eer, 2.5);

        let r = compute_eer(&records(&[1.0, 1.0], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!((r.n_real, r.n_fake), (2, 3));

        assert!(matches!(
            compute_eer(&records(&[1.0], &[])),
            Err(EvalError::SingleLabel { n_real: 1, n_fake: 0 })
        ));
    }

    #[test]
    fn roc_examples() {
        let roc = roc_curve(&records(&[2.0], &[1.0])).unwrap();
        assert_eq!(roc, vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]);
        let recs = records(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.75]);
        let roc = roc_curve(&recs).unwrap();
        assert_eq!(roc.first(), Some(&(1.0, 0.0)));
        assert_eq!(roc.last(), Some(&(0.0, 1.0)));
        // EER point lies on a segment of the staircase
        let eer = compute_eer(&recs).unwrap().eer;
        let on_curve = roc.windows(2).any(|w| {
            let ((a1, b1), (a2, b2)) = (w[0], w[1]);
            let t = if a1 != a2 { (eer - a1) / (a2 - a1) } else { (eer - b1) / (b2 - b1) };
            (0.0..=1.0).contains(&t)
                && (a1 + t * (a2 - a1) - eer).abs() < 1e-12
                && (b1 + t * (b2 - b1) - eer).abs() < 1e-12
        });
        assert!(on_curve);
    }

    #[test]
    fn roc_mirrors_under_label_swap_and_negation() {
        let recs = records(&[0.3, 1.2, 2.5, 0.9], &[0.1, 1.0, 0.4]);
        let swapped: Vec<ScoreRecord> = recs
            .iter()
            .map(|r| ScoreRecord {
                id: r.id.clone(),
                label: if r.label == Label::Real { Label::Fake } else { Label::Real },
                score: -r.score,
            })
            .collect();
        let a = roc_curve(&recs).unwrap();
        let mut b: Vec<(f64, f64)> = roc_curve(&swapped)
            .unwrap()
            .into_iter()
            .map(|(far, frr)| (frr, far))
            .collect();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = crate::rng::seeded(11);
        for case in 0..1000 {
            let nr = rng.random_range(1..=200);
            let nf = rng.random_range(1..=200);
            // coarse grids force ties
            let grid = if case % 3 == 0 { 10.0 } else { 1e6 };
            let mut draw = |n: usize, shift: f64| -> Vec<f64> {
                (0..n)
                    .map(|_| ((rng.random::<f64>() + shift) * grid).round() / grid)
                    .collect()
            };
            let real = draw(nr, 0.3);
            let fake = draw(nf, 0.0);
            let got = compute_eer(&records(&real, &fake)).unwrap().eer;
            let want = brute_force_eer(&real, &fake);
            assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn eer_invariant_under_increasing_maps(
            real in prop::collection::vec(-5.0f64..5.0, 1..40),
            fake in prop::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let base = compute_eer(&records(&real, &fake)).unwrap().eer;
            let affine = |v: &[f64]| v.iter().map(|x| 3.0 * x - 7.0).collect::<Vec<_>>();
            let cubic = |v: &[f64]| v.iter().map(|x| x * x * x + x).collect::<Vec<_>>();
            let a = compute_eer(&records(&affine(&real), &affine(&fake))).unwrap().eer;
            let c = compute_eer(&records(&cubic(&real), &cubic(&fake))).unwrap().eer;
            prop_assert!((a - base).abs() < 1e-12);
            prop_assert!((c - base).abs() < 1e-12);
            let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            let swapped = compute_eer(&records(&neg(&fake), &neg(&real))).unwrap().eer;
            prop_assert!((swapped - base).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn roc_is_monotone(
            real in prop::collection::vec(-5.0f64..5.0, 1..40),
            fake in prop::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let roc = roc_curve(&records(&real, &fake)).unwrap();
            for w in roc.windows(2) {
                prop_assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(-13.923456789123), "-13.9234568");
        assert_eq!(format_score(0.5), "0.5");
        assert_eq!(format_score(-0.000012345678912), "-1.23456789e-05");
        assert_eq!(format_score(1234567891.0), "1.23456789e+09");
        assert_eq!(format_score(0.0), "0");
        assert_eq!(format_score(100.0), "100");
    }

    #[test]
    fn csv_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let recs = records(&[-1.25, 0.5], &[-3.0]);
        write_scores_csv(&recs, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,label,score\nr0,real,-1.25\n"));
        assert_eq!(read_scores_csv(&path).unwrap(), recs);
        let mut dup = recs.clone();
        dup[1].id = "r0".into();
        assert!(matches!(scores_csv(&dup), Err(EvalError::DuplicateId(_))));
    }

    #[test]
    fn report_json_is_canonical() {
        let r = compute_eer(&records(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.75])).unwrap();
        let s = report_json(&r);
        let keys: Vec<&str> = s
            .lines()
            .filter(|l| l.starts_with("  \""))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        assert_eq!(keys, ["eer", "n_fake", "n_real", "roc", "threshold_at_eer"]);
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
