//! Tiny trainable backbone: pixel-space "autoencoder", hashed bag-of-tokens
//! text encoder and a two-level convolutional noise predictor with timestep
//! embedding and prompt modulation.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{randn_var, zeros_var, Backbone, LatentAutoencoder, NoisePredictor, TextEncoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub resolution: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub time_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            channels: 16,
            text_dim: 32,
            vocab_size: 512,
            time_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || self.resolution % 2 != 0 {
            return Err(Error::Config(format!(
                "resolution must be even and >= 4, got {}",
                self.resolution
            )));
        }
        if self.channels == 0 || self.text_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        Ok(())
    }
}

/// Builds the desk backbone with weights drawn from `seed`.
pub fn desk_backbone(config: &BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_encoder = HashedTextEncoder::new(&mut rng, config.vocab_size, config.text_dim, dtype, device)?;
    let noise_predictor = ToyUnet::new(
        &mut rng,
        3,
        config.channels,
        config.time_dim,
        config.text_dim,
        dtype,
        device,
    )?;
    Ok(Backbone {
        autoencoder: Box::new(IdentityAutoencoder),
        text_encoder: Box::new(text_encoder),
        noise_predictor: Box::new(noise_predictor),
        image_shape: vec![3, config.resolution, config.resolution],
    })
}

/// Latent space is pixel space rescaled to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAutoencoder;

impl LatentAutoencoder for IdentityAutoencoder {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.affine(2.0, -1.0)?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.affine(0.5, 0.5)?)
    }

    fn latent_shape(&self, image_shape: &[usize]) -> Vec<usize> {
        image_shape.to_vec()
    }
}

/// Lowercased ASCII alphanumeric runs, plus every other alphabetic
/// character as its own token (so CJK text tokenizes per character).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            cur.push(c.to_ascii_lowercase());
            continue;
        }
        if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        if c.is_alphanumeric() {
            tokens.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mean of hashed token embeddings followed by a tanh projection.
pub struct HashedTextEncoder {
    vocab: usize,
    dim: usize,
    table: Var,
    proj_w: Var,
    proj_b: Var,
}

impl HashedTextEncoder {
    pub fn new<R: rand::Rng>(rng: &mut R, vocab: usize, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            vocab,
            dim,
            table: randn_var(rng, &[vocab, dim], 1.0, dtype, device)?,
            proj_w: randn_var(rng, &[dim, dim], (1.0 / dim as f64).sqrt(), dtype, device)?,
            proj_b: zeros_var(&[dim], dtype, device)?,
        })
    }

    /// `(B, V)` rows of token frequencies, each row summing to 1 (or 0 for
    /// token-free prompts).
    fn bag(&self, prompts: &[&str]) -> Result<Tensor> {
        let mut data = vec![0f64; prompts.len() * self.vocab];
        for (i, p) in prompts.iter().enumerate() {
            let tokens = tokenize(p);
            let share = 1.0 / tokens.len().max(1) as f64;
            for tok in tokens {
                let bucket = (fnv1a(tok.as_bytes()) % self.vocab as u64) as usize;
                data[i * self.vocab + bucket] += share;
            }
        }
        let dev = self.table.device();
        Ok(Tensor::from_vec(data, (prompts.len(), self.vocab), dev)?.to_dtype(self.table.dtype())?)
    }
}

impl TextEncoder for HashedTextEncoder {
    fn encode(&self, prompts: &[&str]) -> Result<Tensor> {
        let pooled = self.bag(prompts)?.matmul(self.table.as_tensor())?;
        let projected = pooled
            .matmul(self.proj_w.as_tensor())?
            .broadcast_add(self.proj_b.as_tensor())?;
        Ok(projected.tanh()?)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn vars(&self) -> Vec<(String, Var)> {
        vec![
            ("table".into(), self.table.clone()),
            ("proj.weight".into(), self.proj_w.clone()),
            ("proj.bias".into(), self.proj_b.clone()),
        ]
    }
}

/// Sinusoidal timestep features `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

struct Conv {
    w: Var,
    b: Var,
}

impl Conv {
    fn new<R: rand::Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        gain: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let std = gain * (2.0 / (c_in * 9) as f64).sqrt();
        Ok(Self {
            w: randn_var(rng, &[c_out, c_in, 3, 3], std, dtype, device)?,
            b: zeros_var(&[c_out], dtype, device)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.b.dims()[0];
        let y = crate::ops::conv2d_same(x, self.w.as_tensor())?;
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn new<R: rand::Rng>(rng: &mut R, d_in: usize, d_out: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            w: randn_var(rng, &[d_in, d_out], (1.0 / d_in as f64).sqrt(), dtype, device)?,
            b: zeros_var(&[d_out], dtype, device)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?)
    }
}

/// Full-resolution block, one pooled level, and a merge back to full
/// resolution. Timestep features are added and the prompt embedding scales
/// and shifts the first block's channels.
pub struct ToyUnet {
    channels: usize,
    time_dim: usize,
    conv_in: Conv,
    time: Linear,
    cond: Linear,
    down: Conv,
    mid: Conv,
    out: Conv,
}

impl ToyUnet {
    pub fn new<R: rand::Rng>(
        rng: &mut R,
        latent_channels: usize,
        channels: usize,
        time_dim: usize,
        text_dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            time_dim,
            conv_in: Conv::new(rng, latent_channels, channels, 1.0, dtype, device)?,
            time: Linear::new(rng, time_dim, channels, dtype, device)?,
            cond: Linear::new(rng, text_dim, 2 * channels, dtype, device)?,
            down: Conv::new(rng, channels, channels, 1.0, dtype, device)?,
            mid: Conv::new(rng, 2 * channels, channels, 1.0, dtype, device)?,
            out: Conv::new(rng, channels, latent_channels, 0.1, dtype, device)?,
        })
    }
}

impl NoisePredictor for ToyUnet {
    fn predict(&self, z_t: &Tensor, t: &[usize], w: &Tensor) -> Result<Tensor> {
        let (b, _, h, wd) = z_t.dims4()?;
        if t.len() != b || w.dim(0)? != b {
            return Err(Error::ShapeMismatch(format!(
                "batch of {b} latents with {} timesteps and {} embeddings",
                t.len(),
                w.dim(0)?
            )));
        }
        let c = self.channels;
        let temb = timestep_embedding(t, self.time_dim, z_t.dtype(), z_t.device())?;
        let temb = self.time.forward(&temb)?.silu()?.reshape((b, c, 1, 1))?;
        let cond = self.cond.forward(w)?;
        let scale = cond.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
        let shift = cond.narrow(1, c, c)?.reshape((b, c, 1, 1))?;

        let h0 = self.conv_in.forward(z_t)?;
        let h1 = h0
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?
            .broadcast_add(&temb)?
            .silu()?;
        let d = self.down.forward(&h1.avg_pool2d(2)?)?.silu()?;
        let u = if 2 * d.dim(2)? == h && 2 * d.dim(3)? == wd {
            crate::ops::upsample2(&d)?
        } else {
            d.upsample_nearest2d(h, wd)?
        };
        let h2 = self.mid.forward(&Tensor::cat(&[&h1, &u], 1)?)?.silu()?;
        self.out.forward(&h2)
    }

    fn vars(&self) -> Vec<(String, Var)> {
        let mut v = Vec::new();
        for (name, conv) in [
            ("conv_in", &self.conv_in),
            ("down", &self.down),
            ("mid", &self.mid),
            ("out", &self.out),
        ] {
            v.push((format!("{name}.weight"), conv.w.clone()));
            v.push((format!("{name}.bias"), conv.b.clone()));
        }
        for (name, lin) in [("time", &self.time), ("cond", &self.cond)] {
            v.push((format!("{name}.weight"), lin.w.clone()));
            v.push((format!("{name}.bias"), lin.b.clone()));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_ascii_runs_and_cjk_chars() {
        assert_eq!(tokenize("Red Square，青花"), vec!["red", "square", "青", "花"]);
        assert!(tokenize(" ,. ").is_empty());
    }

    #[test]
    fn desk_backbone_shapes() {
        let cfg = BackboneConfig::default();
        let bb = desk_backbone(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let w = bb.text_encoder.encode(&["red square", "", "blue circle"]).unwrap();
        assert_eq!(w.dims(), &[3, cfg.text_dim]);
        let z = Tensor::zeros((3, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let eps = bb.noise_predictor.predict(&z, &[1, 10, 50], &w).unwrap();
        assert_eq!(eps.dims(), z.dims());
        let img = bb.autoencoder.decode(&bb.autoencoder.encode(&z).unwrap()).unwrap();
        assert_eq!(img.dims(), z.dims());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig::default();
        let a = desk_backbone(&cfg, 3, DType::F32, &Device::Cpu)
            .unwrap()
            .snapshot()
            .unwrap();
        let b = desk_backbone(&cfg, 3, DType::F32, &Device::Cpu)
            .unwrap()
            .snapshot()
            .unwrap();
        for (k, t) in &a {
            let diff = (t - &b[k])
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(diff, 0.0, "{k}");
        }
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let bb = desk_backbone(&BackboneConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let w = bb.text_encoder.encode(&["a"]).unwrap();
        let z = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(bb.noise_predictor.predict(&z, &[1, 2], &w).is_err());
    }
}
