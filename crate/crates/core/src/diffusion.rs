//! Forward diffusion, the small time-conditioned noise predictor, and the
//! ancestral reverse sampler over latents.
//!
//! The schedule stores the cumulative retention product, so one-shot noising
//! is `x_t = sqrt(a_t) x + sqrt(1 - a_t) eps` with `a_t` taken straight from
//! the table.

use crate::autograd::NodeId;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_conv2d, init_linear, sinusoidal_embedding, GraphCtx, Init, Params};
use crate::rng::derive_rng;
use ndarray::{Array4, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Cumulative noise schedule: `alphas[t-1]` is the retention product after
/// `t` steps, in `(0, 1]` and non-increasing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Validates and wraps a raw cumulative-alpha sequence.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        for (i, a) in alphas.iter().enumerate() {
            if !(*a > 0.0 && *a <= 1.0) {
                return Err(Error::Parameter(format!(
                    "alpha[{i}] = {a} outside (0, 1]"
                )));
            }
            if i > 0 && *a > alphas[i - 1] {
                return Err(Error::Parameter(format!(
                    "alpha sequence must be non-increasing (index {i})"
                )));
            }
        }
        Ok(Self {
            steps: alphas.len(),
            alphas,
        })
    }

    /// Linear-beta schedule: per-step retention `1 - beta_t` with `beta_t`
    /// interpolated from `beta_min` to `beta_max`, accumulated into the
    /// cumulative product.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Parameter("steps must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
            )));
        }
        let mut alphas = Vec::with_capacity(steps);
        let mut product = 1.0;
        for t in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            let beta = beta_min + (beta_max - beta_min) * frac;
            product *= 1.0 - beta;
            alphas.push(product);
        }
        Self::from_alphas(alphas)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Cumulative alpha at 1-based step `t`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.steps {
            return Err(Error::Parameter(format!(
                "step {t} outside schedule range 1..={}",
                self.steps
            )));
        }
        Ok(self.alphas[t - 1])
    }

    /// Cumulative alpha before step `t` (1 for `t = 1`).
    fn alpha_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alphas[t - 2]
        }
    }
}

/// One-shot forward noising `sqrt(a_t) x + sqrt(1 - a_t) eps`.
pub fn forward_noise(
    x: &Array4<f64>,
    t: usize,
    eps: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    if x.dim() != eps.dim() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?}", x.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    let alpha = schedule.alpha(t)?;
    Ok(x * alpha.sqrt() + eps * (1.0 - alpha).sqrt())
}

/// Installs the noise-prediction network (`denoiser.` group): three conv
/// layers on the latent with a learned per-channel time embedding added
/// after the first.
pub fn init_denoiser(params: &mut Params, seed: u64, config: &ModelConfig) {
    let cz = config.latent_channels;
    let d = config.denoiser_channels;
    init_conv2d(params, seed, "denoiser.c1", cz, d, 3, Init::He, 0.0);
    init_linear(params, seed, "denoiser.temb", config.time_embed_dim, d);
    init_conv2d(params, seed, "denoiser.c2", d, d, 3, Init::He, 0.0);
    init_conv2d(params, seed, "denoiser.c3", d, cz, 3, Init::He, 0.0);
}

/// Noise-prediction graph over a batch of latents with per-sample steps.
pub fn denoiser_graph(
    ctx: &mut GraphCtx,
    x_t: NodeId,
    steps: &[usize],
    time_embed_dim: usize,
) -> NodeId {
    let emb: Array2<f64> = sinusoidal_embedding(steps, time_embed_dim);
    let emb = ctx.input(emb.into_dyn());
    let temb = ctx.linear(emb, "denoiser.temb");
    let h = ctx.conv2d(x_t, "denoiser.c1", 1, 1);
    let h = ctx.graph.sample_channel_bias(h, temb);
    let h = ctx.graph.relu(h);
    let h = ctx.conv2d(h, "denoiser.c2", 1, 1);
    let h = ctx.graph.relu(h);
    ctx.conv2d(h, "denoiser.c3", 1, 1)
}

/// Predicts the noise in `x_t` at step `t`; output has the input's shape.
pub fn predict_noise(
    x_t: &Array4<f64>,
    t: usize,
    params: &Params,
    config: &ModelConfig,
) -> Result<Array4<f64>> {
    let expect = params.expect("denoiser.c1.weight").shape()[1];
    if x_t.dim().1 != expect {
        return Err(Error::shape(
            "predict_noise",
            format!("{expect} channels"),
            x_t.dim().1,
        ));
    }
    let steps = vec![t; x_t.dim().0];
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(x_t.clone().into_dyn());
    let out = denoiser_graph(&mut ctx, input, &steps, config.time_embed_dim);
    Ok(ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("eps 4-d"))
}

/// Ancestral reverse process from `x_t` at 1-based step `t_start` down to a
/// clean sample, with an arbitrary noise predictor. Deterministic given the
/// seed (which drives only the posterior noise draws).
pub fn denoise_from<F>(
    x_start: Array4<f64>,
    t_start: usize,
    schedule: &NoiseSchedule,
    predictor: F,
    seed: u64,
) -> Result<Array4<f64>>
where
    F: Fn(&Array4<f64>, usize) -> Result<Array4<f64>>,
{
    if t_start < 1 || t_start > schedule.steps() {
        return Err(Error::Parameter(format!(
            "t_start {t_start} outside schedule range 1..={}",
            schedule.steps()
        )));
    }
    let mut rng = derive_rng(seed, "ancestral-noise");
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        let a_t = schedule.alpha(t)?;
        let a_prev = schedule.alpha_prev(t);
        let eps_hat = predictor(&x, t)?;
        if eps_hat.dim() != x.dim() {
            return Err(Error::shape(
                "denoise_from predictor",
                format!("{:?}", x.dim()),
                format!("{:?}", eps_hat.dim()),
            ));
        }
        if (1.0 - a_t).abs() < f64::EPSILON {
            // No noise at this level; nothing to remove.
            continue;
        }
        let x0 = (&x - &(eps_hat * (1.0 - a_t).sqrt())) / a_t.sqrt();
        let retention = a_t / a_prev;
        let beta = 1.0 - retention;
        let coeff_x0 = a_prev.sqrt() * beta / (1.0 - a_t);
        let coeff_xt = retention.sqrt() * (1.0 - a_prev) / (1.0 - a_t);
        let mean = &(x0 * coeff_x0) + &(x * coeff_xt);
        if t > 1 {
            let var = beta * (1.0 - a_prev) / (1.0 - a_t);
            let std = var.max(0.0).sqrt();
            let noise = Array4::from_shape_fn(mean.raw_dim(), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z
            });
            x = mean + noise * std;
        } else {
            x = mean;
        }
    }
    Ok(x)
}

/// Full sampling run: draw `x_T` from a standard normal and denoise to a
/// clean latent with the trained predictor.
pub fn sample(
    shape: (usize, usize, usize, usize),
    schedule: &NoiseSchedule,
    params: &Params,
    config: &ModelConfig,
    seed: u64,
) -> Result<Array4<f64>> {
    let mut rng = derive_rng(seed, "sample-init");
    let x_t = Array4::from_shape_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z
    });
    denoise_from(
        x_t,
        schedule.steps(),
        schedule,
        |x, t| predict_noise(x, t, params, config),
        seed,
    )
}
