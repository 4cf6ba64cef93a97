//! Forward noising, one-step inversion, the base denoising objective and
//! ancestral sampling over pluggable backbones.

pub mod backbone;
pub mod checkpoint;
pub mod desk;
mod schedule;

pub use backbone::{Backbone, LatentAutoencoder, NoisePredictor, TextEncoder};
pub use desk::{desk_backbone, BackboneConfig};
pub use schedule::{make_schedule, ScheduleKind, ScheduleParams, VarianceSchedule};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A batch of noised latents with one timestep per sample.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: Vec<usize>,
}

/// Fails with the tensor's name if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, name: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// `(B, 1, …, 1)` column of per-sample coefficients matching `like`'s rank.
fn per_sample(coeffs: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![coeffs.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_vec(coeffs, shape, like.device())?.to_dtype(like.dtype())?)
}

fn check_batch(x: &Tensor, t: &[usize], schedule: &VarianceSchedule) -> Result<()> {
    if x.rank() < 1 || x.dim(0)? != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "latent batch {:?} with {} timesteps",
            x.dims(),
            t.len()
        )));
    }
    t.iter().try_for_each(|&s| schedule.check_t(s))
}

/// z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε, per sample.
pub fn forward_noise(x0: &Tensor, t: &[usize], noise: &Tensor, schedule: &VarianceSchedule) -> Result<LatentState> {
    if x0.dims() != noise.dims() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs latent {:?}",
            noise.dims(),
            x0.dims()
        )));
    }
    check_batch(x0, t, schedule)?;
    let signal = per_sample(t.iter().map(|&s| schedule.alpha_bar(s).sqrt()).collect(), x0)?;
    let spread = per_sample(t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt()).collect(), x0)?;
    let z = (x0.broadcast_mul(&signal)? + noise.broadcast_mul(&spread)?)?;
    Ok(LatentState { z, t: t.to_vec() })
}

/// (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t, the one-step clean estimate.
pub fn predict_x0(state: &LatentState, predicted_noise: &Tensor, schedule: &VarianceSchedule) -> Result<Tensor> {
    if state.z.dims() != predicted_noise.dims() {
        return Err(Error::ShapeMismatch(format!(
            "predicted noise {:?} vs latent {:?}",
            predicted_noise.dims(),
            state.z.dims()
        )));
    }
    check_batch(&state.z, &state.t, schedule)?;
    if let Some(&t) = state.t.iter().find(|&&t| schedule.alpha_bar(t) <= 0.0) {
        return Err(Error::Singularity(format!("alpha_bar is zero at t={t}")));
    }
    let spread = per_sample(
        state.t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt()).collect(),
        &state.z,
    )?;
    let inv_signal = per_sample(
        state.t.iter().map(|&s| 1.0 / schedule.alpha_bar(s).sqrt()).collect(),
        &state.z,
    )?;
    let x0 = (&state.z - predicted_noise.broadcast_mul(&spread)?)?.broadcast_mul(&inv_signal)?;
    Ok(x0)
}

/// Per-sample squared error ‖ε − ε̂‖² summed over latent dimensions, with
/// the noised state and prediction kept for downstream terms.
#[derive(Debug, Clone)]
pub struct BaseLoss {
    pub per_sample: Tensor,
    pub noised: LatentState,
    pub predicted_noise: Tensor,
}

impl BaseLoss {
    /// Unweighted batch mean.
    pub fn mean(&self) -> Result<Tensor> {
        Ok(self.per_sample.mean_all()?)
    }

    /// Batch mean of per-sample losses scaled by `weights`.
    pub fn weighted_mean(&self, weights: &[f64]) -> Result<Tensor> {
        let w =
            Tensor::from_slice(weights, weights.len(), self.per_sample.device())?.to_dtype(self.per_sample.dtype())?;
        Ok((&self.per_sample * w)?.mean_all()?)
    }
}

pub fn base_loss(
    z0: &Tensor,
    embedding: &Tensor,
    t: &[usize],
    noise: &Tensor,
    predictor: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
) -> Result<BaseLoss> {
    let noised = forward_noise(z0, t, noise, schedule)?;
    ensure_finite(&noised.z, "noised latent")?;
    let predicted_noise = predictor.predict(&noised.z, t, embedding)?;
    if predicted_noise.dims() != noise.dims() {
        return Err(Error::ShapeMismatch(format!(
            "noise predictor returned {:?} for latent {:?}",
            predicted_noise.dims(),
            noise.dims()
        )));
    }
    ensure_finite(&predicted_noise, "predicted noise")?;
    let per_sample = (noise - &predicted_noise)?.sqr()?.flatten_from(1)?.sum(1)?;
    Ok(BaseLoss {
        per_sample,
        noised,
        predicted_noise,
    })
}

/// Timesteps visited by a `steps`-step sampler, descending from T.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidParameter(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    let mut ts: Vec<usize> = (0..steps).map(|k| (k + 1) * total / steps).collect();
    ts.reverse();
    Ok(ts)
}

/// Standard-normal tensor of `shape` drawn from `rng`.
pub fn gaussian<R: rand::Rng>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Ancestral sampling from z_T ~ N(0, I), μ_θ from the predicted noise and
/// variance σ² = β (the effective β when striding), no noise on the final
/// step; decoded and clamped to `[0, 1]`. `embedding` is `(B, D)`.
pub fn reverse_sample(
    embedding: &Tensor,
    backbone: &Backbone,
    schedule: &VarianceSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let z0 = sample_latent(
        embedding,
        backbone.noise_predictor.as_ref(),
        &backbone.latent_shape(),
        schedule,
        steps,
        seed,
    )?;
    let images = backbone.autoencoder.decode(&z0)?;
    ensure_finite(&images, "decoded image")?;
    Ok(images.clamp(0.0, 1.0)?)
}

/// The latent half of [`reverse_sample`].
pub fn sample_latent(
    embedding: &Tensor,
    predictor: &dyn NoisePredictor,
    latent_shape: &[usize],
    schedule: &VarianceSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let b = embedding.dim(0)?;
    let dtype = embedding.dtype();
    let device = embedding.device();
    let mut shape = vec![b];
    shape.extend_from_slice(latent_shape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = gaussian(&mut rng, &shape, dtype, device)?;
    let ts = sampling_timesteps(schedule.timesteps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let beta = if prev + 1 == t {
            schedule.beta(t)
        } else {
            1.0 - ab / schedule.alpha_bar(prev)
        };
        let eps = predictor.predict(&z, &vec![t; b], embedding)?.detach();
        ensure_finite(&eps, "predicted noise")?;
        let mean = ((&z - (eps * (beta / (1.0 - ab).sqrt()))?)? * (1.0 / (1.0 - beta).sqrt()))?;
        z = if prev > 0 {
            let xi = gaussian(&mut rng, &shape, dtype, device)?;
            (mean + (xi * beta.sqrt())?)?
        } else {
            mean
        };
    }
    Ok(z)
}
