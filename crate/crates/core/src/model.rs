//! Band-wise flows followed by a global flow, with Gaussian latent priors.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Standardizer;
use crate::flow::{Direction, FlowError, FlowStep};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{n_bands} bands requested but only {bins} frequency bins")]
    TooManyBands { n_bands: usize, bins: usize },
    #[error("input shape {actual:?} does not match model feature shape {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("fake-class likelihood requested on a model without a fake prior")]
    NoFakePrior,
    #[error("invalid model config: {0}")]
    Config(String),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Flow(FlowError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub n_bands: usize,
    pub band_steps: usize,
    pub global_steps: usize,
    pub hidden: usize,
    pub mu_real: f64,
    pub mu_fake: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 4,
            frames: 200,
            bins: 128,
            n_bands: 2,
            band_steps: 2,
            global_steps: 2,
            hidden: 32,
            mu_real: 5.0,
            mu_fake: None,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.channels * self.frames * self.bins
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.channels, self.frames, self.bins]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(ModelError::Flow(FlowError::TooFewChannels(self.channels)));
        }
        if self.frames == 0 || self.bins == 0 || self.n_bands == 0 || self.hidden == 0 {
            return Err(ModelError::Config(
                "frames, bins, bands and hidden width must be positive".into(),
            ));
        }
        if self.n_bands > self.bins {
            return Err(ModelError::TooManyBands {
                n_bands: self.n_bands,
                bins: self.bins,
            });
        }
        if !self.mu_real.is_finite() || self.mu_fake.is_some_and(|m| !m.is_finite()) {
            return Err(ModelError::Config("prior means must be finite".into()));
        }
        Ok(())
    }
}

/// Contiguous near-equal widths; earlier bands take the remainder.
pub fn band_widths(bins: usize, n_bands: usize) -> Result<Vec<usize>> {
    if n_bands == 0 || n_bands > bins {
        return Err(ModelError::TooManyBands { n_bands, bins });
    }
    let base = bins / n_bands;
    let extra = bins % n_bands;
    Ok((0..n_bands).map(|i| base + usize::from(i < extra)).collect())
}

pub fn band_split(x: &Tensor, n_bands: usize) -> Result<Vec<Tensor>> {
    let axis = x.rank() - 1;
    let widths = band_widths(x.shape()[axis], n_bands)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(n_bands);
    for w in widths {
        out.push(x.narrow(axis, start, w)?);
        start += w;
    }
    Ok(out)
}

pub fn band_concat(bands: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = bands.iter().collect();
    let axis = bands.first().map_or(0, |b| b.rank() - 1);
    Ok(Tensor::concat(&refs, axis)?)
}

/// `-(d/2) ln(2 pi) - 0.5 ||z - mu||^2` over all entries of `z`.
pub fn gaussian_logprob(z: &[f64], mu: f64) -> f64 {
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|v| (v - mu) * (v - mu)).sum();
    -0.5 * d * (2.0 * PI).ln() - 0.5 * sq
}

/// Per-sample Gaussian log-density of a `[B, ...]` latent; `mu` has one entry
/// per sample.
pub fn gaussian_logprob_var<'t>(z: &Var<'t>, mu: &[f64]) -> Result<Var<'t>> {
    let shape = z.shape().to_vec();
    let b = shape[0];
    if mu.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_logprob",
            lhs: shape,
            rhs: vec![mu.len()],
        }
        .into());
    }
    let d: usize = shape[1..].iter().product();
    let mut mu_shape = vec![1; shape.len()];
    mu_shape[0] = b;
    let mu = z.tape().constant(Tensor::new(&mu_shape, mu.to_vec())?);
    let diff = z.sub(&mu)?;
    let axes: Vec<usize> = (1..shape.len()).collect();
    let sq = diff.mul(&diff)?.sum_axes(&axes)?;
    Ok(sq.scale(-0.5)?.shift(-0.5 * d as f64 * (2.0 * PI).ln())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Real,
    Fake,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodBreakdown {
    pub prior_logprob: f64,
    pub logdet_total: f64,
    pub total_loglik: f64,
    pub per_dim: f64,
}

impl LikelihoodBreakdown {
    pub fn new(prior_logprob: f64, logdet_total: f64, dim: usize) -> Self {
        let total_loglik = prior_logprob + logdet_total;
        LikelihoodBreakdown {
            prior_logprob,
            logdet_total,
            total_loglik,
            per_dim: total_loglik / dim as f64,
        }
    }

    /// The structural identity `total == prior + logdet`, bit for bit.
    pub fn is_consistent(&self) -> bool {
        self.total_loglik.to_bits() == (self.prior_logprob + self.logdet_total).to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Real,
    Fake,
}

/// Real iff `score >= threshold`.
pub fn detect(score: f64, threshold: f64) -> Verdict {
    if score >= threshold {
        Verdict::Real
    } else {
        Verdict::Fake
    }
}

/// Forward pass on a tape: latent, per-sample total logdet, and the
/// per-step logdets in application order.
pub struct ForwardTrace<'t> {
    pub z: Var<'t>,
    pub logdet: Var<'t>,
    pub steps: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct MusicDetModel {
    config: ModelConfig,
    params: ParamSet,
    bands: Vec<Vec<FlowStep>>,
    global: Vec<FlowStep>,
    pub standardizer: Option<Standardizer>,
}

impl MusicDetModel {
    /// Random rotations in every mixing layer; ActNorm layers await
    /// [`MusicDetModel::data_init`].
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, rng, false)
    }

    /// Every step is the identity map.
    pub fn identity(config: ModelConfig) -> Result<Self> {
        Self::build(config, &mut rng::seeded(rng::DEFAULT_SEED), true)
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R, identity: bool) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut params = ParamSet::new();
        let mut make = |params: &mut ParamSet, prefix: String| {
            if identity {
                FlowStep::identity(params, &prefix, c, config.hidden, rng)
            } else {
                FlowStep::new(params, &prefix, c, config.hidden, rng)
            }
        };
        let mut bands = Vec::with_capacity(config.n_bands);
        for b in 0..config.n_bands {
            let mut steps = Vec::with_capacity(config.band_steps);
            for k in 0..config.band_steps {
                steps.push(make(&mut params, format!("band{b}.step{k}"))?);
            }
            bands.push(steps);
        }
        let mut global = Vec::with_capacity(config.global_steps);
        for k in 0..config.global_steps {
            global.push(make(&mut params, format!("global.step{k}"))?);
        }
        Ok(MusicDetModel {
            config,
            params,
            bands,
            global,
            standardizer: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.bands.iter().flatten().chain(self.global.iter())
    }

    fn steps_mut(&mut self) -> impl Iterator<Item = &mut FlowStep> {
        self.bands.iter_mut().flatten().chain(self.global.iter_mut())
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.initialized)
    }

    /// Marks every ActNorm as initialized, e.g. after loading parameters.
    pub fn set_initialized(&mut self, initialized: bool) {
        for s in self.steps_mut() {
            s.actnorm.initialized = initialized;
        }
    }

    pub fn prior_mean(&self, class: Class) -> Result<f64> {
        match class {
            Class::Real | Class::Unconditional => Ok(self.config.mu_real),
            Class::Fake => self.config.mu_fake.ok_or(ModelError::NoFakePrior),
        }
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let [c, t, f] = self.config.feature_shape();
        if shape.len() != 4 || shape[1..] != [c, t, f] {
            return Err(ModelError::ShapeMismatch {
                expected: vec![c, t, f],
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Layer-wise ActNorm initialization: each step is initialized on the
    /// outputs of the already-initialized steps before it. `batch` holds
    /// `[B, C, T', F']` tensors.
    pub fn data_init(&mut self, batch: &[Tensor]) -> Result<()> {
        for x in batch {
            self.check_shape(x.shape())?;
        }
        let n_bands = self.config.n_bands;
        let mut band_outs: Vec<Vec<Tensor>> = Vec::with_capacity(n_bands);
        let split: Vec<Vec<Tensor>> = batch
            .iter()
            .map(|x| band_split(x, n_bands))
            .collect::<Result<_>>()?;
        for (b, steps) in self.bands.iter_mut().enumerate() {
            let mut h: Vec<Tensor> = split.iter().map(|s| s[b].clone()).collect();
            for step in steps.iter_mut() {
                h = step.init_forward(&mut self.params, &h)?;
            }
            band_outs.push(h);
        }
        let mut h: Vec<Tensor> = (0..batch.len())
            .map(|i| {
                let parts: Vec<Tensor> = band_outs.iter().map(|o| o[i].clone()).collect();
                band_concat(&parts)
            })
            .collect::<Result<_>>()?;
        for step in self.global.iter_mut() {
            h = step.init_forward(&mut self.params, &h)?;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape)
    }

    pub fn forward_var<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<ForwardTrace<'t>> {
        self.check_shape(x.shape())?;
        let tape = x.tape();
        let widths = band_widths(self.config.bins, self.config.n_bands)?;
        let mut logdet = tape.constant(Tensor::zeros(&[x.shape()[0]]));
        let mut trace = Vec::new();
        let mut outs = Vec::with_capacity(widths.len());
        let mut start = 0;
        for (steps, w) in self.bands.iter().zip(widths) {
            let mut h = x.narrow(3, start, w)?;
            start += w;
            for step in steps {
                let (y, ld) = step.apply(&h, p, &self.params, Direction::Forward)?;
                logdet = logdet.add(&ld)?;
                trace.push(ld);
                h = y;
            }
            outs.push(h);
        }
        let mut h = Var::concat(&outs, 3)?;
        for step in &self.global {
            let (y, ld) = step.apply(&h, p, &self.params, Direction::Forward)?;
            logdet = logdet.add(&ld)?;
            trace.push(ld);
            h = y;
        }
        Ok(ForwardTrace {
            z: h,
            logdet,
            steps: trace,
        })
    }

    pub fn inverse_var<'t>(&self, z: &Var<'t>, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_shape(z.shape())?;
        let tape = z.tape();
        let mut logdet = tape.constant(Tensor::zeros(&[z.shape()[0]]));
        let mut h = z.clone();
        for step in self.global.iter().rev() {
            let (y, ld) = step.apply(&h, p, &self.params, Direction::Inverse)?;
            logdet = logdet.add(&ld)?;
            h = y;
        }
        let widths = band_widths(self.config.bins, self.config.n_bands)?;
        let mut outs = Vec::with_capacity(widths.len());
        let mut start = 0;
        for (steps, w) in self.bands.iter().zip(widths) {
            let mut b = h.narrow(3, start, w)?;
            start += w;
            for step in steps.iter().rev() {
                let (y, ld) = step.apply(&b, p, &self.params, Direction::Inverse)?;
                logdet = logdet.add(&ld)?;
                b = y;
            }
            outs.push(b);
        }
        Ok((Var::concat(&outs, 3)?, logdet))
    }

    /// Latent and per-sample logdet for a `[B, C, T', F']` batch.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::inference();
        let p = self.bind(&tape);
        let trace = self.forward_var(&tape.constant(x.clone()), &p)?;
        Ok((trace.z.value().clone(), trace.logdet.value().data().to_vec()))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.bind(&tape);
        let (x, _) = self.inverse_var(&tape.constant(z.clone()), &p)?;
        Ok(x.value().clone())
    }

    /// One breakdown per sample of the batch.
    pub fn log_likelihood(&self, x: &Tensor, class: Class) -> Result<Vec<LikelihoodBreakdown>> {
        let mu = self.prior_mean(class)?;
        let (z, logdet) = self.forward(x)?;
        let d = self.dim();
        Ok(z.data()
            .chunks_exact(d)
            .zip(logdet)
            .map(|(zi, ld)| {
                let b = LikelihoodBreakdown::new(gaussian_logprob(zi, mu), ld, d);
                assert!(b.is_consistent(), "likelihood breakdown out of balance");
                b
            })
            .collect())
    }

    /// Per-dimension log-likelihood under the real prior; higher is more real.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .log_likelihood(x, Class::Unconditional)?
            .into_iter()
            .map(|b| b.per_dim)
            .collect())
    }

    /// Mean over the batch of the negative per-dimension log-likelihood, with
    /// one prior mean per sample.
    pub fn nll_var<'t>(&self, x: &Var<'t>, p: &Bound<'t>, mu: &[f64]) -> Result<Var<'t>> {
        let trace = self.forward_var(x, p)?;
        let prior = gaussian_logprob_var(&trace.z, mu)?;
        let total = prior.add(&trace.logdet)?;
        Ok(total.mean()?.scale(-1.0 / self.dim() as f64)?)
    }
}
