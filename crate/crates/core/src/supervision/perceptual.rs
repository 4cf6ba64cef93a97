//! Frozen feature encoders and the perceptual loss.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frozen image encoder over `(B, 3, H, W)` batches in `[0, 1]`.
pub trait FeatureEncoder: Send + Sync {
    fn id(&self) -> &str;
    /// Pooled feature vectors `(B, F)`.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
    /// Intermediate maps `(B, C, H, W)` for layer-wise distances.
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
    fn feature_dim(&self) -> usize;
}

fn encoder_err(id: &str, e: impl std::fmt::Display) -> Error {
    Error::Encoder {
        id: id.to_string(),
        message: e.to_string(),
    }
}

fn seeded_normal(seed: u64, shape: &[usize], std: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// φ(x) = x flattened.
pub struct IdentityEncoder {
    dim: usize,
}

impl IdentityEncoder {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            dim: channels * height * width,
        }
    }
}

impl FeatureEncoder for IdentityEncoder {
    fn id(&self) -> &str {
        "identity"
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let f = images.flatten_from(1)?;
        if f.dim(1)? != self.dim {
            return Err(encoder_err(
                self.id(),
                format!("expected {} inputs, got {}", self.dim, f.dim(1)?),
            ));
        }
        Ok(f)
    }

    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }
}

/// φ(x) = W x with a fixed seeded matrix.
pub struct ToyLinearEncoder {
    weight: Tensor,
}

impl ToyLinearEncoder {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            weight: seeded_normal(seed, &[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt())?,
        })
    }

    pub fn from_weight(weight: Tensor) -> Result<Self> {
        weight.dims2()?;
        Ok(Self { weight })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl FeatureEncoder for ToyLinearEncoder {
    fn id(&self) -> &str {
        "toy-linear"
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.flatten_from(1)?;
        let w = self.weight.to_dtype(x.dtype())?;
        x.matmul(&w.t()?).map_err(|e| encoder_err(self.id(), e))
    }

    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let f = self.features(images)?;
        let (b, d) = f.dims2()?;
        Ok(vec![f.reshape((b, d, 1, 1))?])
    }

    fn feature_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Two 3x3 conv layers with ReLU, pooled to a 4x4 grid.
pub struct SmallConvEncoder {
    id: String,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
}

pub const SMALL_CONV_KEYS: [&str; 4] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];
const POOLED_GRID: usize = 4;

impl SmallConvEncoder {
    pub fn seeded(seed: u64) -> Result<Self> {
        let (c1, c2) = (8, 16);
        Self::from_tensors(
            "small-conv",
            seeded_normal(seed, &[c1, 3, 3, 3], (2.0 / 27.0f64).sqrt())?,
            Tensor::zeros(c1, DType::F64, &Device::Cpu)?,
            seeded_normal(seed.wrapping_add(1), &[c2, c1, 3, 3], (2.0 / (9 * c1) as f64).sqrt())?,
            Tensor::zeros(c2, DType::F64, &Device::Cpu)?,
        )
    }

    pub fn from_tensors(id: &str, conv1_w: Tensor, conv1_b: Tensor, conv2_w: Tensor, conv2_b: Tensor) -> Result<Self> {
        let (c1, cin, k1, k1b) = conv1_w.dims4()?;
        let (c2, c1b, k2, k2b) = conv2_w.dims4()?;
        if cin != 3
            || c1b != c1
            || (k1, k1b, k2, k2b) != (3, 3, 3, 3)
            || conv1_b.dims() != [c1]
            || conv2_b.dims() != [c2]
        {
            return Err(encoder_err(
                id,
                format!(
                    "inconsistent weights: conv1 {:?}/{:?}, conv2 {:?}/{:?}",
                    conv1_w.dims(),
                    conv1_b.dims(),
                    conv2_w.dims(),
                    conv2_b.dims()
                ),
            ));
        }
        let f64_cpu = |t: Tensor| t.to_dtype(DType::F64)?.to_device(&Device::Cpu);
        Ok(Self {
            id: id.to_string(),
            conv1_w: f64_cpu(conv1_w)?,
            conv1_b: f64_cpu(conv1_b)?,
            conv2_w: f64_cpu(conv2_w)?,
            conv2_b: f64_cpu(conv2_b)?,
        })
    }

    /// Loads `conv1.*`/`conv2.*` tensors from a safetensors file.
    pub fn load(path: &Path) -> Result<Self> {
        let id = "external";
        let mut t = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| encoder_err(id, format!("{}: {e}", path.display())))?;
        let mut take = |k: &str| {
            t.remove(k)
                .ok_or_else(|| encoder_err(id, format!("{} lacks tensor {k}", path.display())))
        };
        let (a, b, c, d) = (
            take(SMALL_CONV_KEYS[0])?,
            take(SMALL_CONV_KEYS[1])?,
            take(SMALL_CONV_KEYS[2])?,
            take(SMALL_CONV_KEYS[3])?,
        );
        Self::from_tensors(id, a, b, c, d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = SMALL_CONV_KEYS
            .iter()
            .zip([&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b])
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        Ok(candle_core::safetensors::save(&map, path)?)
    }

    fn conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let w = w.to_dtype(x.dtype())?;
        let b = b.to_dtype(x.dtype())?.reshape((1, (), 1, 1))?;
        Ok(crate::ops::conv2d_same(x, &w)?.broadcast_add(&b)?.relu()?)
    }

    fn layers(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % (2 * POOLED_GRID) != 0 || w % (2 * POOLED_GRID) != 0 {
            return Err(encoder_err(
                &self.id,
                format!(
                    "input {:?} must be 3-channel with sides divisible by {}",
                    images.dims(),
                    2 * POOLED_GRID
                ),
            ));
        }
        let x = ((images - 0.5)? * 2.0)?;
        let a = Self::conv(&x, &self.conv1_w, &self.conv1_b)?;
        let b = Self::conv(&a.avg_pool2d(2)?, &self.conv2_w, &self.conv2_b)?;
        Ok((a, b))
    }
}

impl FeatureEncoder for SmallConvEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, b) = self.layers(images)?;
        let side = b.dim(2)? / POOLED_GRID;
        Ok(b.avg_pool2d(side)?.flatten_from(1)?)
    }

    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (a, b) = self.layers(images)?;
        Ok(vec![a, b])
    }

    fn feature_dim(&self) -> usize {
        self.conv2_w.dims()[0] * POOLED_GRID * POOLED_GRID
    }
}

/// Registry entry selecting a feature encoder by identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// One of `identity`, `toy-linear`, `small-conv`, `external`.
    pub id: String,
    pub seed: u64,
    /// Output width of `toy-linear`.
    pub out_dim: usize,
    /// Weights file for `external`.
    pub weights: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            id: "small-conv".into(),
            seed: 1234,
            out_dim: 64,
            weights: None,
        }
    }
}

pub const ENCODER_IDS: [&str; 4] = ["identity", "toy-linear", "small-conv", "external"];

/// Builds the encoder for images of shape `(3, height, width)`.
pub fn build_encoder(spec: &EncoderSpec, height: usize, width: usize) -> Result<Arc<dyn FeatureEncoder>> {
    Ok(match spec.id.as_str() {
        "identity" => Arc::new(IdentityEncoder::new(3, height, width)),
        "toy-linear" => Arc::new(ToyLinearEncoder::new(3 * height * width, spec.out_dim, spec.seed)?),
        "small-conv" => Arc::new(SmallConvEncoder::seeded(spec.seed)?),
        "external" => {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| encoder_err("external", "no weights path configured"))?;
            Arc::new(SmallConvEncoder::load(path)?)
        }
        other => {
            return Err(encoder_err(
                other,
                format!("unknown encoder, expected one of {}", ENCODER_IDS.join(", ")),
            ))
        }
    })
}

/// Mean squared feature distance; the real features are constants.
pub fn perceptual_loss(real: &Tensor, generated: &Tensor, encoder: &dyn FeatureEncoder) -> Result<Tensor> {
    if real.dims() != generated.dims() {
        return Err(Error::ShapeMismatch(format!(
            "perceptual loss inputs {:?} vs {:?}",
            real.dims(),
            generated.dims()
        )));
    }
    let wrap = |e: Error| match e {
        Error::Encoder { .. } => e,
        other => encoder_err(encoder.id(), other),
    };
    let target = encoder.features(&real.detach()).map_err(wrap)?.detach();
    let pred = encoder.features(generated).map_err(wrap)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_batch(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn toy_linear_matches_closed_form() {
        let enc = ToyLinearEncoder::new(48, 5, 3).unwrap();
        let a = rand_batch(1, &[1, 3, 4, 4]);
        let b = rand_batch(2, &[1, 3, 4, 4]);
        let got = value(&perceptual_loss(&a, &b, &enc).unwrap());
        let w = enc.weight().to_vec2::<f64>().unwrap();
        let d: Vec<f64> = a
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .zip(b.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .map(|(x, y)| x - y)
            .collect();
        let expected: f64 = w
            .iter()
            .map(|row| row.iter().zip(&d).map(|(wi, di)| wi * di).sum::<f64>().powi(2))
            .sum::<f64>()
            / 5.0;
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn loss_is_zero_on_identical_and_symmetric() {
        let enc = SmallConvEncoder::seeded(7).unwrap();
        let a = rand_batch(3, &[2, 3, 8, 8]);
        let b = rand_batch(4, &[2, 3, 8, 8]);
        assert_eq!(value(&perceptual_loss(&a, &a, &enc).unwrap()), 0.0);
        let ab = value(&perceptual_loss(&a, &b, &enc).unwrap());
        let ba = value(&perceptual_loss(&b, &a, &enc).unwrap());
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn small_conv_feature_dim_and_bad_input() {
        let enc = SmallConvEncoder::seeded(0).unwrap();
        let f = enc.features(&rand_batch(0, &[1, 3, 16, 16])).unwrap();
        assert_eq!(f.dims(), [1, enc.feature_dim()]);
        let err = enc.features(&rand_batch(0, &[1, 3, 6, 6])).unwrap_err();
        assert_eq!(err.kind(), "encoder");
    }

    #[test]
    fn external_weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let seeded = SmallConvEncoder::seeded(5).unwrap();
        seeded.save(&path).unwrap();
        let spec = EncoderSpec {
            id: "external".into(),
            weights: Some(path),
            ..Default::default()
        };
        let loaded = build_encoder(&spec, 8, 8).unwrap();
        let x = rand_batch(9, &[1, 3, 8, 8]);
        let a = seeded
            .features(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = loaded
            .features(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_or_unconfigured_encoders_fail() {
        let spec = EncoderSpec {
            id: "vit".into(),
            ..Default::default()
        };
        assert!(build_encoder(&spec, 8, 8).is_err());
        let spec = EncoderSpec {
            id: "external".into(),
            ..Default::default()
        };
        assert!(build_encoder(&spec, 8, 8).is_err());
    }
}
