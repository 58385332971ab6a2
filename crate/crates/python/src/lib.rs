use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use musicdet::audio::AudioClip;
use musicdet::checkpoint::Checkpoint;
use musicdet::eval::{self, ScoreRecord};
use musicdet::manifest::{Label, Manifest, Split};
use musicdet::model::{self, Verdict};
use musicdet::train::{TrainConfig, TrainMode};
use musicdet::{rng, synth};

create_exception!(musicdet_py, MusicDetError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    MusicDetError::new_err(e.to_string())
}

fn records(scores: Vec<f64>, labels: Vec<String>) -> PyResult<Vec<ScoreRecord>> {
    if scores.len() != labels.len() {
        return Err(err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    scores
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (score, label))| {
            Ok(ScoreRecord {
                id: i.to_string(),
                label: label.parse::<Label>().map_err(err)?,
                score,
            })
        })
        .collect()
}

/// A trained detector loaded from or saved to a checkpoint file.
#[pyclass(frozen, module = "musicdet_py")]
struct Model {
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let ckpt = py.detach(|| Checkpoint::load(&path)).map_err(err)?;
        Ok(Model { ckpt })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(err)
    }

    /// Log-likelihood score of a WAV file. Higher means more likely real.
    fn score_wav(&self, py: Python<'_>, path: PathBuf) -> PyResult<f64> {
        py.detach(|| eval::score_file(&self.ckpt.model, &path))
            .map_err(err)
    }

    fn score_samples(&self, py: Python<'_>, samples: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
        let clip = AudioClip::new(samples, sample_rate);
        py.detach(|| eval::score_clip(&self.ckpt.model, &clip))
            .map_err(err)
    }

    /// Scores one split of a manifest. Returns a dict with the EER, the
    /// threshold at the EER, class counts and per-clip `(id, label, score)`.
    #[pyo3(signature = (manifest, split = "test", strict = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        split: &str,
        strict: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let split: Split = split.parse().map_err(err)?;
        let (recs, skipped, report) = py
            .detach(|| -> Result<_, String> {
                let manifest = Manifest::read(&manifest).map_err(|e| e.to_string())?;
                let (recs, skipped) =
                    eval::score_dataset(&self.ckpt.model, &manifest, Some(split), strict)
                        .map_err(|e| e.to_string())?;
                let report = eval::compute_eer(&recs).map_err(|e| e.to_string())?;
                Ok((recs, skipped, report))
            })
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("eer", report.eer)?;
        out.set_item("threshold", report.threshold_at_eer)?;
        out.set_item("n_real", report.n_real)?;
        out.set_item("n_fake", report.n_fake)?;
        out.set_item("skipped", skipped)?;
        let scores: Vec<(String, &str, f64)> = recs
            .iter()
            .map(|r| (r.id.clone(), r.label.as_str(), r.score))
            .collect();
        out.set_item("scores", scores)?;
        Ok(out)
    }

    /// Training configuration as a JSON string.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.ckpt.config).map_err(err)
    }

    #[getter]
    fn model_config(&self) -> PyResult<String> {
        serde_json::to_string(self.ckpt.model.config()).map_err(err)
    }

    /// Mean training loss per epoch.
    #[getter]
    fn log(&self) -> Vec<f64> {
        self.ckpt.log.clone()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.ckpt
            .model
            .params()
            .entries()
            .iter()
            .map(|e| e.value.numel())
            .sum()
    }

    fn __repr__(&self) -> String {
        let mode = match self.ckpt.config.mode {
            TrainMode::OneClass => "one-class",
            TrainMode::ClassConditional => "class-conditional",
        };
        format!(
            "Model(mode={mode}, dim={}, epochs={})",
            self.ckpt.model.dim(),
            self.ckpt.log.len()
        )
    }
}

/// Writes a synthetic corpus and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_real = 200, n_fake = 200, seed = rng::DEFAULT_SEED))]
fn build_corpus(py: Python<'_>, out_dir: PathBuf, n_real: usize, n_fake: usize, seed: u64) -> PyResult<PathBuf> {
    py.detach(|| synth::build_corpus(n_real, n_fake, &out_dir, seed))
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (
    manifest,
    mode = "one-class",
    epochs = 10,
    batch_size = 64,
    learning_rate = 5e-4,
    seed = rng::DEFAULT_SEED,
    mu_real = 5.0,
    mu_fake = -5.0,
    hidden = 32,
    band_steps = 2,
    global_steps = 2,
    n_bands = 2,
    augment = true,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    mode: &str,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    mu_real: f64,
    mu_fake: f64,
    hidden: usize,
    band_steps: usize,
    global_steps: usize,
    n_bands: usize,
    augment: bool,
) -> PyResult<Model> {
    let config = TrainConfig {
        mode: mode.parse::<TrainMode>().map_err(err)?,
        epochs,
        batch_size,
        learning_rate,
        seed,
        mu_real,
        mu_fake: Some(mu_fake),
        hidden,
        band_steps,
        global_steps,
        n_bands,
        augment,
        ..TrainConfig::default()
    };
    let ckpt = py
        .detach(|| -> Result<_, String> {
            let manifest = Manifest::read(&manifest).map_err(|e| e.to_string())?;
            musicdet::train::train(&manifest, &config).map_err(|e| e.to_string())
        })
        .map_err(err)?;
    Ok(Model { ckpt })
}

/// `(eer, threshold)` for scores where higher means real.
#[pyfunction]
fn compute_eer(scores: Vec<f64>, labels: Vec<String>) -> PyResult<(f64, f64)> {
    let r = eval::compute_eer(&records(scores, labels)?).map_err(err)?;
    Ok((r.eer, r.threshold_at_eer))
}

/// `(far, frr)` pairs from `(1, 0)` to `(0, 1)`.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<String>) -> PyResult<Vec<(f64, f64)>> {
    eval::roc_curve(&records(scores, labels)?).map_err(err)
}

#[pyfunction]
fn detect(score: f64, threshold: f64) -> &'static str {
    match model::detect(score, threshold) {
        Verdict::Real => "real",
        Verdict::Fake => "fake",
    }
}

/// One synthetic clip as `(samples, sample_rate)`.
#[pyfunction]
fn synth_clip(label: &str, seed: u64) -> PyResult<(Vec<f64>, u32)> {
    let mut r = rng::seeded(seed);
    let clip = match label.parse::<Label>().map_err(err)? {
        Label::Real => synth::gen_real_clip(&mut r),
        Label::Fake => synth::gen_fake_clip(&mut r),
    };
    Ok((clip.samples, clip.sample_rate))
}

#[pyfunction]
fn spectral_flatness(samples: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    synth::spectral_flatness(&AudioClip::new(samples, sample_rate)).map_err(err)
}

#[pymodule]
fn musicdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MusicDetError", m.py().get_type::<MusicDetError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_flatness, m)?)?;
    Ok(())
}
