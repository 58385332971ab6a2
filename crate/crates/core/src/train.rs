//! Maximum-likelihood training of the flow with Adam.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, Mode, Standardizer};
use crate::checkpoint::Checkpoint;
use crate::manifest::{Label, Manifest, Split};
use crate::model::{ModelConfig, ModelError, MusicDetModel};
use crate::rng::{self, DetRng};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training clips selected")]
    NoTrainingData,
    #[error("class-conditional training needs at least one fake training clip")]
    NoFakeTrainingData,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    LabelMismatch(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Clip { path: PathBuf, source: AudioError },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    OneClass,
    ClassConditional,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "one-class" => Ok(TrainMode::OneClass),
            "class-conditional" => Ok(TrainMode::ClassConditional),
            other => Err(format!("unknown training mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub mu_real: f64,
    pub mu_fake: Option<f64>,
    /// Flow steps per band.
    pub band_steps: usize,
    pub n_bands: usize,
    pub global_steps: usize,
    pub hidden: usize,
    pub augment: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: rng::DEFAULT_SEED,
            mode: TrainMode::OneClass,
            mu_real: 5.0,
            mu_fake: Some(-5.0),
            band_steps: 2,
            n_bands: 2,
            global_steps: 2,
            hidden: 32,
            augment: true,
            clip_norm: Some(100.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.mode == TrainMode::ClassConditional && self.mu_fake.is_none() {
            return bad("class-conditional mode requires a fake prior mean");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// Model of the default feature shape with this config's flow layout.
    /// The fake prior is kept only in class-conditional mode.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_bands: self.n_bands,
            band_steps: self.band_steps,
            global_steps: self.global_steps,
            hidden: self.hidden,
            mu_real: self.mu_real,
            mu_fake: match self.mode {
                TrainMode::OneClass => None,
                TrainMode::ClassConditional => self.mu_fake,
            },
            ..ModelConfig::default()
        }
    }

    fn prior_means(&self, n: usize, labels: Option<&[Label]>) -> Result<Vec<f64>> {
        match (self.mode, labels) {
            (TrainMode::OneClass, None) => Ok(vec![self.mu_real; n]),
            (TrainMode::OneClass, Some(_)) => Err(TrainError::LabelMismatch(
                "one-class training takes no labels".into(),
            )),
            (TrainMode::ClassConditional, None) => Err(TrainError::LabelMismatch(
                "class-conditional training needs a label per sample".into(),
            )),
            (TrainMode::ClassConditional, Some(l)) if l.len() != n => {
                Err(TrainError::LabelMismatch(format!(
                    "{} labels for {n} samples",
                    l.len()
                )))
            }
            (TrainMode::ClassConditional, Some(l)) => {
                let fake = self.mu_fake.ok_or_else(|| {
                    TrainError::Config("class-conditional mode requires a fake prior mean".into())
                })?;
                Ok(l.iter()
                    .map(|l| match l {
                        Label::Real => self.mu_real,
                        Label::Fake => fake,
                    })
                    .collect())
            }
        }
    }
}

/// Mean over the `[B, C, T', F']` batch of the negative per-dimension
/// log-likelihood, each sample under its own class prior in
/// class-conditional mode.
pub fn nll_loss(
    model: &MusicDetModel,
    batch: &Tensor,
    labels: Option<&[Label]>,
    config: &TrainConfig,
) -> Result<f64> {
    let mu = config.prior_means(batch.shape().first().copied().unwrap_or(0), labels)?;
    let tape = Tape::inference();
    let p = model.bind(&tape);
    Ok(model.nll_var(&tape.constant(batch.clone()), &p, &mu)?.value().item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        let m = state.m.get(index).map(Tensor::shape);
        if p.shape() != g.shape() || m != Some(p.shape()) {
            return Err(TrainError::ShapeMismatch {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch {
            index: params.len().min(grads.len()),
            param: vec![params.len()],
            grad: vec![grads.len()],
        });
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Optimizes `model` over `n` samples produced on demand by `features`.
///
/// `features(i, rng)` returns sample `i` as a `[1, C, T', F']` tensor; `rng`
/// is `Some` for training draws (cropping and augmentation) and `None` for
/// the deterministic view used by ActNorm initialization. Returns the mean
/// loss of every epoch.
pub fn fit<F>(
    model: &mut MusicDetModel,
    n: usize,
    labels: Option<&[Label]>,
    config: &TrainConfig,
    mut features: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, Option<&mut DetRng>) -> Result<Tensor>,
{
    config.validate()?;
    if n == 0 {
        return Err(TrainError::NoTrainingData);
    }
    let mu = config.prior_means(n, labels)?;
    let mut shuffle_rng = rng::stream(config.seed, 2);
    let mut draw_rng = rng::stream(config.seed, 3);
    let trainable: Vec<usize> = model
        .params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, _)| i)
        .collect();
    let mut adam: Option<AdamState> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = batch_no + 1;
            if !model.is_initialized() {
                let clean: Vec<Tensor> = chunk
                    .iter()
                    .map(|&i| features(i, None))
                    .collect::<Result<_>>()?;
                model.data_init(&clean)?;
            }
            let xs: Vec<Tensor> = chunk
                .iter()
                .map(|&i| features(i, Some(&mut draw_rng)))
                .collect::<Result<_>>()?;
            let model_ref = &*model;
            let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = xs
                .par_iter()
                .zip(chunk.par_iter())
                .map(|(x, &i)| {
                    let tape = Tape::new();
                    let p = model_ref.bind(&tape);
                    let loss = model_ref.nll_var(&tape.constant(x.clone()), &p, &mu[i..=i])?;
                    let grads = tape.backward(&loss)?;
                    let all = p.gradients(&grads);
                    let g = trainable.iter().map(|&k| all[k].clone()).collect();
                    Ok((loss.value().item(), g))
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut sum: Option<Vec<Tensor>> = None;
            for r in per_sample {
                let (loss, g) = r.map_err(|e| match e {
                    TrainError::Model(m) if is_non_finite(&m) => TrainError::NonFinite { epoch, batch },
                    other => other,
                })?;
                batch_loss += loss;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Tensor> = sum
                .expect("nonempty batch")
                .into_iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !batch_loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            if let Some(max) = config.clip_norm.filter(|&max| norm > max) {
                let s = max / norm;
                grads.iter_mut().for_each(|g| *g = g.map(|v| v * s));
            }
            let mut values: Vec<Tensor> = trainable
                .iter()
                .map(|&k| model.params().entries()[k].value.clone())
                .collect();
            let state = adam.get_or_insert_with(|| AdamState::new(&values));
            adam_step(&mut values, &grads, state, config)?;
            let entries = model.params_mut().entries_mut();
            for (&k, v) in trainable.iter().zip(values) {
                entries[k].value = v;
            }
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / n as f64;
        info!("epoch {epoch}: mean loss {mean:.6} nats/dim");
        log.push(mean);
    }
    Ok(log)
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Flow(crate::flow::FlowError::Tensor(
            crate::tensor::TensorError::NonFinite { .. }
        ))
    )
}

fn load(manifest: &Manifest, path: &str) -> Result<AudioClip> {
    let full = manifest.base_dir.join(path);
    audio::load_clip(&full).map_err(|source| TrainError::Clip { path: full, source })
}

/// Standardized `[1, C, T', F']` feature of a 16 kHz clip; with `rng`, a
/// training draw (random crop, then SpecAugment when `augment`).
pub fn clip_feature(
    clip: &AudioClip,
    standardizer: &Standardizer,
    rng: Option<&mut DetRng>,
    augment: bool,
) -> Result<Tensor> {
    let spec = match rng {
        None => standardizer.apply(&audio::eval_log_power(clip)?)?,
        Some(rng) => {
            let s = audio::standardized_spectrogram(clip, Mode::Train, rng, standardizer)?;
            if augment {
                audio::spec_augment(&s, rng)
            } else {
                s
            }
        }
    };
    let x = audio::to_feature(&spec)?.into_tensor();
    let shape: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
    Ok(x.reshape(&shape)?)
}

/// Trains on the `train` split of `manifest`. One-class mode opens only the
/// real entries; class-conditional mode uses both labels. The standardizer
/// is fitted on the real training clips.
pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let reals = manifest.select(Some(Split::Train), Some(Label::Real));
    if reals.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    for e in &reals {
        clips.push(load(manifest, &e.path)?);
        labels.push(Label::Real);
    }
    let n_real = clips.len();
    if config.mode == TrainMode::ClassConditional {
        let fakes = manifest.select(Some(Split::Train), Some(Label::Fake));
        if fakes.is_empty() {
            return Err(TrainError::NoFakeTrainingData);
        }
        for e in fakes {
            clips.push(load(manifest, &e.path)?);
            labels.push(Label::Fake);
        }
    }
    info!("training on {} clips ({n_real} real)", clips.len());

    let spectra: Vec<_> = clips[..n_real]
        .iter()
        .map(audio::eval_log_power)
        .collect::<std::result::Result<_, _>>()?;
    let standardizer = Standardizer::fit(&spectra)?;
    drop(spectra);

    let mut model = MusicDetModel::new(config.model_config(), &mut rng::stream(config.seed, 1))?;
    let labels = (config.mode == TrainMode::ClassConditional).then_some(labels.as_slice());
    let log = fit(&mut model, clips.len(), labels, config, |i, rng| {
        clip_feature(&clips[i], &standardizer, rng, config.augment)
    })?;
    model.standardizer = Some(standardizer);
    Ok(Checkpoint {
        config: config.clone(),
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Class;
    use crate::tensor::finite_diff_check;
    use crate::params::Bound;
    use rand_distr::{Distribution, StandardNormal};

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 2,
            frames: 2,
            bins: 2,
            n_bands: 2,
            band_steps: 1,
            global_steps: 1,
            hidden: 4,
            mu_real: 5.0,
            mu_fake: Some(-5.0),
        }
    }

    fn gaussian(shape: &[usize], rng: &mut DetRng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_model_losses() {
        let cfg = small_config();
        let model = MusicDetModel::identity(cfg.clone()).unwrap();
        let at = |mu: f64| Tensor::full(&[1, 2, 2, 2], mu);
        let one_class = TrainConfig::default();
        let loss = nll_loss(&model, &at(5.0), None, &one_class).unwrap();
        assert!((loss - 0.918_938_533_204_672_7).abs() < 1e-12);

        let cond = TrainConfig {
            mode: TrainMode::ClassConditional,
            ..TrainConfig::default()
        };
        let batch = Tensor::concat(&[&at(5.0), &at(-5.0)], 0).unwrap();
        let loss = nll_loss(&model, &batch, Some(&[Label::Real, Label::Fake]), &cond).unwrap();
        assert!((loss - 0.918_938_533_204_672_7).abs() < 1e-12);

        assert!(matches!(
            nll_loss(&model, &at(5.0), Some(&[Label::Real]), &one_class),
            Err(TrainError::LabelMismatch(_))
        ));
        assert!(matches!(
            nll_loss(&model, &at(5.0), None, &cond),
            Err(TrainError::LabelMismatch(_))
        ));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut theta = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&theta);
        adam_step(&mut theta, &[Tensor::scalar(2.0)], &mut state, &cfg).unwrap();
        assert!((theta[0].item() - 0.9).abs() < 1e-6);
        assert_eq!(state.t, 1);

        let before = theta.clone();
        let mut fresh = AdamState::new(&theta);
        adam_step(&mut theta, &[Tensor::scalar(0.0)], &mut fresh, &cfg).unwrap();
        assert_eq!(theta, before);
        assert_eq!(fresh.t, 1);

        assert!(matches!(
            adam_step(&mut theta, &[Tensor::zeros(&[2])], &mut state, &cfg),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig {
                mode: TrainMode::ClassConditional,
                mu_fake: None,
                ..TrainConfig::default()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        }
        assert_eq!(TrainConfig::default().model_config().mu_fake, None);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = rng::seeded(3);
        let mut model = MusicDetModel::new(small_config(), &mut r).unwrap();
        let batch: Vec<Tensor> = (0..4).map(|_| gaussian(&[1, 2, 2, 2], &mut r)).collect();
        model.data_init(&batch).unwrap();
        // move every group away from its initial value, zero-init layers included
        for e in model.params_mut().entries_mut().iter_mut().filter(|e| e.trainable) {
            let noise = gaussian(e.value.shape(), &mut r);
            e.value = e.value.zip_map(&noise, |a, b| a + 0.3 * b);
        }
        let x = Tensor::concat(&[&batch[0], &batch[1]], 0).unwrap();
        let check = finite_diff_check(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                model
                    .nll_var(&tape.constant(x.clone()), &p, &[5.0, -5.0])
                    .map_err(|e| match e {
                        ModelError::Flow(crate::flow::FlowError::Tensor(t)) => t,
                        other => panic!("{other}"),
                    })
            },
            &model.params().values(),
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    fn toy_features(n: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| gaussian(&[1, 2, 2, 2], &mut r).map(|v| 0.5 * v + 1.0)).collect()
    }

    fn fit_small(labels: Option<&[Label]>, config: &TrainConfig, model_cfg: ModelConfig) -> (MusicDetModel, Vec<f64>) {
        let xs = toy_features(10, 9);
        let mut model = MusicDetModel::new(model_cfg, &mut rng::stream(config.seed, 1)).unwrap();
        let log = fit(&mut model, xs.len(), labels, config, |i, _| Ok(xs[i].clone())).unwrap();
        (model, log)
    }

    #[test]
    fn fit_is_deterministic_and_reduces_loss() {
        let config = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (a, log_a) = fit_small(None, &config, small_config());
        let (b, log_b) = fit_small(None, &config, small_config());
        assert_eq!(a.params(), b.params());
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 30);
        assert!(log_a.last().unwrap() < &log_a[0]);
        assert!(a.is_initialized());
    }

    #[test]
    fn label_and_prior_swap_mirrors_scores() {
        let labels: Vec<Label> = (0..10)
            .map(|i| if i % 3 == 0 { Label::Fake } else { Label::Real })
            .collect();
        let swapped: Vec<Label> = labels
            .iter()
            .map(|l| if *l == Label::Real { Label::Fake } else { Label::Real })
            .collect();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            mode: TrainMode::ClassConditional,
            ..TrainConfig::default()
        };
        let swapped_config = TrainConfig {
            mu_real: -5.0,
            mu_fake: Some(5.0),
            ..config.clone()
        };
        let mut mirrored_cfg = small_config();
        mirrored_cfg.mu_real = -5.0;
        mirrored_cfg.mu_fake = Some(5.0);
        let (a, _) = fit_small(Some(&labels), &config, small_config());
        let (b, _) = fit_small(Some(&swapped), &swapped_config, mirrored_cfg);
        for x in toy_features(5, 77) {
            let fake_ll = a.log_likelihood(&x, Class::Fake).unwrap()[0].per_dim;
            assert_eq!(b.score(&x).unwrap()[0], fake_ll);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_position() {
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut model = MusicDetModel::new(small_config(), &mut rng::seeded(1)).unwrap();
        let xs = toy_features(8, 2);
        let r = fit(&mut model, 8, None, &config, |i, rng| {
            Ok(if rng.is_some() && i == 5 {
                xs[i].map(|_| f64::NAN)
            } else {
                xs[i].clone()
            })
        });
        assert!(matches!(r, Err(TrainError::NonFinite { epoch: 1, .. })));
        let r = fit(&mut model, 0, None, &config, |i, _| Ok(xs[i].clone()));
        assert!(matches!(r, Err(TrainError::NoTrainingData)));
    }
}
