//! Glow-style flow step: ActNorm, PLU-parameterized invertible 1x1 channel
//! mixing, and an affine coupling layer with a small convolutional subnet.
//!
//! Every layer maps `B x C x H x W` to the same shape and returns its log
//! Jacobian determinant: shape `[1]` when it does not depend on the input
//! (ActNorm, mixing) and `[B]` otherwise (coupling).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ActNorm layer used before data-dependent initialization")]
    Uninitialized,
    #[error("ActNorm layer is already initialized")]
    AlreadyInitialized,
    #[error("degenerate initialization batch: channel {channel} has std {std:e}")]
    DegenerateBatch { channel: usize, std: f64 },
    #[error("initialization batch is empty")]
    EmptyBatch,
    #[error("coupling needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

fn spatial(x: &Var<'_>) -> f64 {
    let s = x.shape();
    (s[2] * s[3]) as f64
}

/// Per-channel affine layer `y = exp(logscale) * x + bias`.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub logscale: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        ActNorm {
            logscale: params.add(
                format!("{prefix}.actnorm.logscale"),
                Tensor::zeros(&[channels]),
                true,
            ),
            bias: params.add(
                format!("{prefix}.actnorm.bias"),
                Tensor::zeros(&[channels]),
                true,
            ),
            channels,
            initialized: false,
        }
    }

    /// Sets scale and bias so the layer output has zero mean and unit
    /// (population) variance per channel over `batch`.
    pub fn data_init(&mut self, params: &mut ParamSet, batch: &[Tensor]) -> Result<()> {
        if self.initialized {
            return Err(FlowError::AlreadyInitialized);
        }
        let c = self.channels;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for x in batch {
            let s = x.shape();
            let hw = s[2] * s[3];
            for (i, chunk) in x.data().chunks_exact(hw).enumerate() {
                sum[i % c] += chunk.iter().sum::<f64>();
            }
            count += s[0] * hw;
        }
        if count == 0 {
            return Err(FlowError::EmptyBatch);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for x in batch {
            let s = x.shape();
            let hw = s[2] * s[3];
            for (i, chunk) in x.data().chunks_exact(hw).enumerate() {
                let m = mean[i % c];
                sq[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let mut logscale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let std = (sq[ch] / count as f64).sqrt();
            if std < 1e-6 {
                return Err(FlowError::DegenerateBatch { channel: ch, std });
            }
            logscale[ch] = -std.ln();
            bias[ch] = -mean[ch] / std;
        }
        *params.get_mut(self.logscale) = Tensor::from_vec(logscale);
        *params.get_mut(self.bias) = Tensor::from_vec(bias);
        self.initialized = true;
        Ok(())
    }

    pub fn apply<'t>(
        &self,
        x: &Var<'t>,
        p: &Bound<'t>,
        dir: Direction,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if !self.initialized {
            return Err(FlowError::Uninitialized);
        }
        let c = self.channels;
        let ls = p[self.logscale].reshape(&[1, c, 1, 1])?;
        let bias = p[self.bias].reshape(&[1, c, 1, 1])?;
        let hw = spatial(x);
        match dir {
            Direction::Forward => {
                let y = x.mul(&ls.exp()?)?.add(&bias)?;
                let logdet = p[self.logscale].sum()?.scale(hw)?;
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let y = x.sub(&bias)?.mul(&ls.neg()?.exp()?)?;
                let logdet = p[self.logscale].sum()?.scale(-hw)?;
                Ok((y, logdet))
            }
        }
    }
}

/// Invertible 1x1 convolution `W = P L (U + diag(sign * exp(log_s)))`.
#[derive(Debug, Clone)]
pub struct InvertibleMix {
    pub perm: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
    pub sign: ParamId,
    pub log_s: ParamId,
    pub channels: usize,
    lower_mask: Tensor,
    upper_mask: Tensor,
}

impl InvertibleMix {
    fn with_factors(
        params: &mut ParamSet,
        prefix: &str,
        perm: Tensor,
        lower: Tensor,
        upper: Tensor,
        sign: Tensor,
        log_s: Tensor,
    ) -> Self {
        let c = sign.numel();
        let mut lower_mask = Tensor::zeros(&[c, c]);
        let mut upper_mask = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    lower_mask.data_mut()[i * c + j] = 1.0;
                } else if j > i {
                    upper_mask.data_mut()[i * c + j] = 1.0;
                }
            }
        }
        InvertibleMix {
            perm: params.add(format!("{prefix}.mix.perm"), perm, false),
            lower: params.add(format!("{prefix}.mix.lower"), lower, true),
            upper: params.add(format!("{prefix}.mix.upper"), upper, true),
            sign: params.add(format!("{prefix}.mix.sign"), sign, false),
            log_s: params.add(format!("{prefix}.mix.log_s"), log_s, true),
            channels: c,
            lower_mask,
            upper_mask,
        }
    }

    pub fn identity(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        let c = channels;
        Self::with_factors(
            params,
            prefix,
            Tensor::eye(c),
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c, c]),
            Tensor::ones(&[c]),
            Tensor::zeros(&[c]),
        )
    }

    /// PLU factors of a random rotation, so the initial log-determinant is 0.
    pub fn random<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let gauss = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
        let q = gauss.qr().q();
        let (p, l, u) = q.lu().unpack();
        // q = P^-1 L U
        let mut pm = DMatrix::<f64>::identity(c, c);
        p.inv_permute_rows(&mut pm);
        let mut perm = Tensor::zeros(&[c, c]);
        let mut lower = Tensor::zeros(&[c, c]);
        let mut upper = Tensor::zeros(&[c, c]);
        let mut sign = Tensor::zeros(&[c]);
        let mut log_s = Tensor::zeros(&[c]);
        for i in 0..c {
            for j in 0..c {
                perm.data_mut()[i * c + j] = pm[(i, j)];
                if j < i {
                    lower.data_mut()[i * c + j] = l[(i, j)];
                } else if j > i {
                    upper.data_mut()[i * c + j] = u[(i, j)];
                }
            }
            let d = u[(i, i)];
            sign.data_mut()[i] = d.signum();
            log_s.data_mut()[i] = d.abs().ln();
        }
        Self::with_factors(params, prefix, perm, lower, upper, sign, log_s)
    }

    /// Assembles the `C x C` mixing matrix on the tape.
    pub fn weight<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        let tape = p[self.lower].tape();
        let c = self.channels;
        let eye = tape.constant(Tensor::eye(c));
        let l = p[self.lower]
            .mul(&tape.constant(self.lower_mask.clone()))?
            .add(&eye)?;
        let s = p[self.sign].mul(&p[self.log_s].exp()?)?;
        let u = p[self.upper]
            .mul(&tape.constant(self.upper_mask.clone()))?
            .add(&eye.mul(&s.reshape(&[1, c])?)?)?;
        Ok(p[self.perm].matmul(&l.matmul(&u)?)?)
    }

    /// `W^-1 = U'^-1 L^-1 P^T` from the factor values, by triangular solves.
    pub fn inverse_weight(&self, params: &ParamSet) -> Tensor {
        let c = self.channels;
        let perm = params.get(self.perm).data();
        let lower = params.get(self.lower).data();
        let upper = params.get(self.upper).data();
        let sign = params.get(self.sign).data();
        let log_s = params.get(self.log_s).data();
        let mut inv = Tensor::zeros(&[c, c]);
        for col in 0..c {
            // v = P^T e_col
            let mut v: Vec<f64> = (0..c).map(|i| perm[col * c + i]).collect();
            for i in 0..c {
                for j in 0..i {
                    v[i] -= lower[i * c + j] * v[j];
                }
            }
            for i in (0..c).rev() {
                for j in i + 1..c {
                    v[i] -= upper[i * c + j] * v[j];
                }
                v[i] /= sign[i] * log_s[i].exp();
            }
            for i in 0..c {
                inv.data_mut()[i * c + col] = v[i];
            }
        }
        inv
    }

    pub fn apply<'t>(
        &self,
        x: &Var<'t>,
        p: &Bound<'t>,
        params: &ParamSet,
        dir: Direction,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.channels;
        let tape = x.tape();
        let zero_bias = tape.constant(Tensor::zeros(&[c]));
        let hw = spatial(x);
        match dir {
            Direction::Forward => {
                let w = self.weight(p)?.reshape(&[c, c, 1, 1])?;
                let y = x.conv2d(&w, &zero_bias)?;
                let logdet = p[self.log_s].sum()?.scale(hw)?;
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let w = tape.constant(self.inverse_weight(params).reshape(&[c, c, 1, 1])?);
                let y = x.conv2d(&w, &zero_bias)?;
                let logdet = p[self.log_s].sum()?.scale(-hw)?;
                Ok((y, logdet))
            }
        }
    }
}

/// Affine coupling: the first `ceil(C/2)` channels predict a bounded log-scale
/// `2 tanh(raw)` and a shift for the remaining channels.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub conv3: (ParamId, ParamId),
    pub channels: usize,
    pub hidden: usize,
}

impl AffineCoupling {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(FlowError::TooFewChannels(channels));
        }
        let ca = channels.div_ceil(2);
        let cb = channels - ca;
        let mut normal = |shape: &[usize]| {
            let fan_in: usize = shape[1..].iter().product();
            let std = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(shape, data).expect("shape")
        };
        let w1 = normal(&[hidden, ca, 3, 3]);
        let w2 = normal(&[hidden, hidden, 1, 1]);
        let mut add = |name: &str, w: Tensor, out: usize| {
            (
                params.add(format!("{prefix}.coupling.{name}.weight"), w, true),
                params.add(
                    format!("{prefix}.coupling.{name}.bias"),
                    Tensor::zeros(&[out]),
                    true,
                ),
            )
        };
        let conv1 = add("conv1", w1, hidden);
        let conv2 = add("conv2", w2, hidden);
        let conv3 = add("conv3", Tensor::zeros(&[2 * cb, hidden, 3, 3]), 2 * cb);
        Ok(AffineCoupling {
            conv1,
            conv2,
            conv3,
            channels,
            hidden,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        let ca = self.channels.div_ceil(2);
        (ca, self.channels - ca)
    }

    /// Subnet output split into (log-scale, shift) for the second half.
    pub fn scale_shift<'t>(&self, xa: &Var<'t>, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (_, cb) = self.split();
        let h = xa.conv2d(&p[self.conv1.0], &p[self.conv1.1])?.relu()?;
        let h = h.conv2d(&p[self.conv2.0], &p[self.conv2.1])?.relu()?;
        let out = h.conv2d(&p[self.conv3.0], &p[self.conv3.1])?;
        let raw = out.narrow(1, 0, cb)?;
        let shift = out.narrow(1, cb, cb)?;
        let log_scale = raw.tanh()?.scale(2.0)?;
        Ok((log_scale, shift))
    }

    pub fn apply<'t>(
        &self,
        x: &Var<'t>,
        p: &Bound<'t>,
        dir: Direction,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if x.shape()[1] != self.channels {
            return Err(FlowError::Tensor(TensorError::ShapeMismatch {
                op: "coupling",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels],
            }));
        }
        let (ca, cb) = self.split();
        let xa = x.narrow(1, 0, ca)?;
        let xb = x.narrow(1, ca, cb)?;
        let (log_scale, shift) = self.scale_shift(&xa, p)?;
        let per_sample = log_scale.sum_axes(&[1, 2, 3])?;
        let (yb, logdet) = match dir {
            Direction::Forward => (xb.mul(&log_scale.exp()?)?.add(&shift)?, per_sample),
            Direction::Inverse => (
                xb.sub(&shift)?.mul(&log_scale.neg()?.exp()?)?,
                per_sample.neg()?,
            ),
        };
        Ok((Var::concat(&[xa, yb], 1)?, logdet))
    }
}

/// ActNorm, then mixing, then coupling.
#[derive(Debug, Clone)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub mix: InvertibleMix,
    pub coupling: AffineCoupling,
}

impl FlowStep {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FlowStep {
            actnorm: ActNorm::new(params, prefix, channels),
            mix: InvertibleMix::random(params, prefix, channels, rng),
            coupling: AffineCoupling::new(params, prefix, channels, hidden, rng)?,
        })
    }

    /// A step that is exactly the identity (initialized ActNorm at zero,
    /// identity mixing, zero coupling subnet output).
    pub fn identity<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut actnorm = ActNorm::new(params, prefix, channels);
        actnorm.initialized = true;
        Ok(FlowStep {
            actnorm,
            mix: InvertibleMix::identity(params, prefix, channels),
            coupling: AffineCoupling::new(params, prefix, channels, hidden, rng)?,
        })
    }

    /// Returns the output and the three component log-determinants in
    /// application order.
    pub fn apply_parts<'t>(
        &self,
        x: &Var<'t>,
        p: &Bound<'t>,
        params: &ParamSet,
        dir: Direction,
    ) -> Result<(Var<'t>, [Var<'t>; 3])> {
        match dir {
            Direction::Forward => {
                let (h, a) = self.actnorm.apply(x, p, dir)?;
                let (h, m) = self.mix.apply(&h, p, params, dir)?;
                let (y, c) = self.coupling.apply(&h, p, dir)?;
                Ok((y, [a, m, c]))
            }
            Direction::Inverse => {
                let (h, c) = self.coupling.apply(x, p, dir)?;
                let (h, m) = self.mix.apply(&h, p, params, dir)?;
                let (y, a) = self.actnorm.apply(&h, p, dir)?;
                Ok((y, [c, m, a]))
            }
        }
    }

    pub fn apply<'t>(
        &self,
        x: &Var<'t>,
        p: &Bound<'t>,
        params: &ParamSet,
        dir: Direction,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (y, [a, b, c]) = self.apply_parts(x, p, params, dir)?;
        Ok((y, a.add(&b)?.add(&c)?))
    }

    /// Initializes the ActNorm from `batch`, then pushes the batch through the
    /// step and returns the outputs.
    pub fn init_forward(&mut self, params: &mut ParamSet, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        self.actnorm.data_init(params, batch)?;
        batch
            .iter()
            .map(|x| {
                let tape = Tape::inference();
                let p = params.bind(&tape);
                let (y, _) = self.apply(&tape.constant(x.clone()), &p, params, Direction::Forward)?;
                Ok(y.value().clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap()
    }

    fn perturb_all(params: &mut ParamSet, rng: &mut rng::DetRng, scale: f64) {
        for e in params.entries_mut() {
            if e.trainable {
                for v in e.value.data_mut() {
                    *v += scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    fn run<'t>(
        tape: &'t Tape,
        params: &ParamSet,
        f: impl Fn(&Var<'t>, &Bound<'t>) -> Result<(Var<'t>, Var<'t>)>,
        x: &Tensor,
    ) -> (Tensor, Tensor) {
        let p = params.bind(tape);
        let (y, ld) = f(&tape.constant(x.clone()), &p).unwrap();
        (y.value().clone(), ld.value().clone())
    }

    #[test]
    fn actnorm_data_init_examples() {
        let mut params = ParamSet::new();
        let mut an = ActNorm::new(&mut params, "a", 1);
        let batch = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        an.data_init(&mut params, std::slice::from_ref(&batch)).unwrap();
        assert_eq!(params.get(an.logscale).data(), &[0.0]);
        assert_eq!(params.get(an.bias).data(), &[-2.0]);
        assert_eq!(
            an.data_init(&mut params, &[batch]),
            Err(FlowError::AlreadyInitialized)
        );

        let mut params = ParamSet::new();
        let mut an = ActNorm::new(&mut params, "a", 1);
        let unit = Tensor::new(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        an.data_init(&mut params, &[unit]).unwrap();
        assert_eq!(params.get(an.logscale).data(), &[0.0]);
        assert_eq!(params.get(an.bias).data(), &[0.0]);

        let mut params = ParamSet::new();
        let mut an = ActNorm::new(&mut params, "a", 2);
        let constant = Tensor::full(&[3, 2, 2, 2], 4.0);
        assert!(matches!(
            an.data_init(&mut params, &[constant]),
            Err(FlowError::DegenerateBatch { .. })
        ));
    }

    #[test]
    fn actnorm_init_normalizes_batch() {
        let mut r = rng::seeded(9);
        let mut params = ParamSet::new();
        let mut an = ActNorm::new(&mut params, "a", 3);
        let batch: Vec<Tensor> = (0..4)
            .map(|_| random_tensor(&mut r, &[2, 3, 5, 4], 3.0).map(|v| v + 7.0))
            .collect();
        an.data_init(&mut params, &batch).unwrap();
        let tape = Tape::inference();
        let outs: Vec<Tensor> = batch
            .iter()
            .map(|x| run(&tape, &params, |x, p| an.apply(x, p, Direction::Forward), x).0)
            .collect();
        for ch in 0..3 {
            let vals: Vec<f64> = outs
                .iter()
                .flat_map(|o| {
                    (0..2).flat_map(move |b| o.data()[(b * 3 + ch) * 20..(b * 3 + ch + 1) * 20].to_vec())
                })
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-10, "{m}");
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn actnorm_apply_examples() {
        let mut params = ParamSet::new();
        let mut an = ActNorm::new(&mut params, "a", 1);
        let tape = Tape::inference();
        let x = Tensor::full(&[1, 1, 3, 4], 3.0);
        assert_eq!(
            an.apply(&tape.constant(x.clone()), &params.bind(&tape), Direction::Forward)
                .unwrap_err(),
            FlowError::Uninitialized
        );
        an.initialized = true;
        let (y, ld) = run(&tape, &params, |x, p| an.apply(x, p, Direction::Forward), &x);
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0]);

        *params.get_mut(an.logscale) = Tensor::scalar(2f64.ln());
        *params.get_mut(an.bias) = Tensor::scalar(1.0);
        let (y, ld) = run(&tape, &params, |x, p| an.apply(x, p, Direction::Forward), &x);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!((ld.item() - 12.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld.item() - 8.3178).abs() < 1e-4);

        let mut r = rng::seeded(1);
        let x = random_tensor(&mut r, &[2, 1, 3, 4], 1.0);
        let (y, _) = run(&tape, &params, |x, p| an.apply(x, p, Direction::Forward), &x);
        let (back, ld_inv) = run(&tape, &params, |x, p| an.apply(x, p, Direction::Inverse), &y);
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!((ld_inv.item() + 12.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_mix_reconstructs_a_rotation() {
        let mut r = rng::seeded(5);
        let mut params = ParamSet::new();
        let mix = InvertibleMix::random(&mut params, "m", 4, &mut r);
        let tape = Tape::inference();
        let w = mix.weight(&params.bind(&tape)).unwrap().value().clone();
        // W W^T = I for a rotation
        let wm = DMatrix::from_row_slice(4, 4, w.data());
        let prod = &wm * wm.transpose();
        assert!((prod - DMatrix::identity(4, 4)).abs().max() < 1e-12);
        assert!(params.get(mix.log_s).sum_all().abs() < 1e-12);
        let inv = DMatrix::from_row_slice(4, 4, mix.inverse_weight(&params).data());
        assert!((&wm * inv - DMatrix::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn mix_examples() {
        let tape = Tape::inference();
        let mut r = rng::seeded(2);
        let mut params = ParamSet::new();
        let mix = InvertibleMix::identity(&mut params, "m", 2);
        let x = random_tensor(&mut r, &[1, 2, 3, 4], 1.0);
        let (y, ld) = run(&tape, &params, |x, p| mix.apply(x, p, &params, Direction::Forward), &x);
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0]);

        // W = 2 I via log|s| = ln 2
        *params.get_mut(mix.log_s) = Tensor::from_vec(vec![2f64.ln(); 2]);
        let (y, ld) = run(&tape, &params, |x, p| mix.apply(x, p, &params, Direction::Forward), &x);
        assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-12);
        assert!((ld.item() - 12.0 * 4f64.ln()).abs() < 1e-12);
        assert!((ld.item() - 16.6355).abs() < 1e-4);
    }

    #[test]
    fn coupling_examples() {
        let tape = Tape::inference();
        let mut r = rng::seeded(3);
        let mut params = ParamSet::new();
        let cp = AffineCoupling::new(&mut params, "c", 4, 8, &mut r).unwrap();
        let x = random_tensor(&mut r, &[2, 4, 3, 5], 1.0);
        let (y, ld) = run(&tape, &params, |x, p| cp.apply(x, p, Direction::Forward), &x);
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0, 0.0]);

        // raw scale 0 and shift 1 through the final bias
        *params.get_mut(cp.conv3.1) = Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let (y, ld) = run(&tape, &params, |x, p| cp.apply(x, p, Direction::Forward), &x);
        let xb = x.narrow(1, 2, 2).unwrap();
        assert!(y.narrow(1, 2, 2).unwrap().max_abs_diff(&xb.map(|v| v + 1.0)) < 1e-15);
        assert_eq!(y.narrow(1, 0, 2).unwrap(), x.narrow(1, 0, 2).unwrap());
        assert_eq!(ld.data(), &[0.0, 0.0]);

        let mut params = ParamSet::new();
        assert!(matches!(
            AffineCoupling::new(&mut params, "c", 1, 8, &mut r),
            Err(FlowError::TooFewChannels(1))
        ));
    }

    #[test]
    fn coupling_round_trip_and_scale_bounds() {
        let tape = Tape::inference();
        let mut r = rng::seeded(4);
        let mut params = ParamSet::new();
        let cp = AffineCoupling::new(&mut params, "c", 3, 6, &mut r).unwrap();
        perturb_all(&mut params, &mut r, 1.0);
        for _ in 0..20 {
            let x = random_tensor(&mut r, &[1, 3, 4, 4], 3.0);
            let (y, ld) = run(&tape, &params, |x, p| cp.apply(x, p, Direction::Forward), &x);
            let (back, ld_inv) = run(&tape, &params, |x, p| cp.apply(x, p, Direction::Inverse), &y);
            assert!(back.max_abs_diff(&x) < 1e-10);
            assert!((ld.item() + ld_inv.item()).abs() < 1e-10);
            let p = params.bind(&tape);
            let xa = tape.constant(x.narrow(1, 0, 2).unwrap());
            let (log_scale, _) = cp.scale_shift(&xa, &p).unwrap();
            for &s in log_scale.value().data() {
                let scale = s.exp();
                assert!((-2f64).exp() <= scale && scale <= 2f64.exp());
            }
        }
    }

    #[test]
    fn step_logdet_is_sum_of_parts_and_round_trips() {
        let mut r = rng::seeded(6);
        let mut params = ParamSet::new();
        let mut step = FlowStep::new(&mut params, "s", 4, 8, &mut r).unwrap();
        let batch = vec![random_tensor(&mut r, &[3, 4, 4, 6], 2.0)];
        step.init_forward(&mut params, &batch).unwrap();
        perturb_all(&mut params, &mut r, 0.3);
        let tape = Tape::inference();
        for _ in 0..100 {
            let x = random_tensor(&mut r, &[1, 4, 4, 6], 1.5);
            let p = params.bind(&tape);
            let xv = tape.constant(x.clone());
            let (y, [a, m, c]) = step.apply_parts(&xv, &p, &params, Direction::Forward).unwrap();
            let (y2, ld) = step.apply(&xv, &p, &params, Direction::Forward).unwrap();
            assert_eq!(y.value(), y2.value());
            let parts = a.value().item() + m.value().item() + c.value().item();
            assert_eq!(ld.value().item(), parts);
            let (back, ld_inv) = step.apply(&y, &p, &params, Direction::Inverse).unwrap();
            assert!(back.value().max_abs_diff(&x) < 1e-9);
            assert!((ld.value().item() + ld_inv.value().item()).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_step_is_identity() {
        let mut r = rng::seeded(8);
        let mut params = ParamSet::new();
        let step = FlowStep::identity(&mut params, "s", 2, 4, &mut r).unwrap();
        let tape = Tape::inference();
        let x = random_tensor(&mut r, &[2, 2, 3, 3], 1.0);
        let (y, ld) = run(&tape, &params, |x, p| step.apply(x, p, &params, Direction::Forward), &x);
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }
}
