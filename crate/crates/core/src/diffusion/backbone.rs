//! Pluggable backbone parts: latent autoencoder, text encoder and noise
//! predictor.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Image ↔ latent mapping. Images are `(B, 3, H, W)` in `[0, 1]`.
pub trait LatentAutoencoder: Send + Sync {
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
    /// Per-sample latent shape for a per-sample image shape.
    fn latent_shape(&self, image_shape: &[usize]) -> Vec<usize>;
    fn trainable(&self) -> bool {
        false
    }
}

/// Text → pooled embedding `(B, D)`.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, prompts: &[&str]) -> Result<Tensor>;
    fn dim(&self) -> usize;
    fn vars(&self) -> Vec<(String, Var)>;
}

/// ε_θ(z_t, t, w); output has the shape of `z_t`.
pub trait NoisePredictor: Send + Sync {
    fn predict(&self, z_t: &Tensor, t: &[usize], w: &Tensor) -> Result<Tensor>;
    fn vars(&self) -> Vec<(String, Var)>;
}

pub struct Backbone {
    pub autoencoder: Box<dyn LatentAutoencoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub noise_predictor: Box<dyn NoisePredictor>,
    /// Per-sample image shape `(3, H, W)`.
    pub image_shape: Vec<usize>,
}

impl Backbone {
    pub fn latent_shape(&self) -> Vec<usize> {
        self.autoencoder.latent_shape(&self.image_shape)
    }

    /// Trainable parameters keyed `text_encoder.*` / `noise_predictor.*`.
    pub fn trainable_vars(&self) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        for (k, v) in self.text_encoder.vars() {
            out.insert(format!("text_encoder.{k}"), v);
        }
        for (k, v) in self.noise_predictor.vars() {
            out.insert(format!("noise_predictor.{k}"), v);
        }
        out
    }

    /// Detached copies of every trainable parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.trainable_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameters in place; every trainable parameter must be present
    /// with a matching shape.
    pub fn load_params(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.trainable_vars() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Gaussian-initialized parameter.
pub fn randn_var<R: Rng>(rng: &mut R, shape: &[usize], std: f64, dtype: DType, device: &Device) -> Result<Var> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    let t = Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

pub fn zeros_var(shape: &[usize], dtype: DType, device: &Device) -> Result<Var> {
    Ok(Var::zeros(shape, dtype, device)?)
}
