//! Image similarity metrics: encoder cosine, windowed SSIM and a
//! normalized-feature distance.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};
use crate::supervision::FeatureEncoder;

const NORM_EPS: f64 = 1e-10;

fn batch_of_one(image: &Image) -> Result<Tensor> {
    Ok(image.to_tensor(DType::F64, &Device::Cpu)?.unsqueeze(0)?)
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Raw cosine similarity of encoder features.
pub fn clip_visual_similarity(a: &Image, b: &Image, encoder: &dyn FeatureEncoder) -> Result<f64> {
    check_shapes(a, b)?;
    let fa = encoder.features(&batch_of_one(a)?)?.flatten_all()?.to_vec1::<f64>()?;
    let fb = encoder.features(&batch_of_one(b)?)?.flatten_all()?.to_vec1::<f64>()?;
    let na = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Encoder {
            id: encoder.id().to_string(),
            message: "zero-norm feature vector".into(),
        });
    }
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 2D Gaussian window, row-major.
    pub fn window_weights(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / s).collect();
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    }
}

/// Mean of the local SSIM map over every full window position.
pub fn ssim_gray(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let k = params.window;
    if k == 0 || a.height < k || a.width < k {
        return Err(Error::InvalidParameter(format!(
            "image {}x{} is smaller than the {k}x{k} window",
            a.height, a.width
        )));
    }
    let w = params.window_weights();
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (rows, cols) = (a.height - k + 1, a.width - k + 1);
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..k {
                for dj in 0..k {
                    let wt = w[di * k + dj];
                    let x = a.at(i + di, j + dj);
                    let y = b.at(i + di, j + dj);
                    mx += wt * x;
                    my += wt * y;
                    xx += wt * x * x;
                    yy += wt * y * y;
                    xy += wt * x * y;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// SSIM on luminance.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    ssim_gray(&a.to_gray(), &b.to_gray(), params)
}

/// Sum over layers of the spatial mean of channel-summed squared differences
/// between channel-normalized feature maps.
pub fn lpips(a: &Image, b: &Image, net: &dyn FeatureEncoder) -> Result<f64> {
    check_shapes(a, b)?;
    let ma = net.feature_maps(&batch_of_one(a)?)?;
    let mb = net.feature_maps(&batch_of_one(b)?)?;
    if ma.len() != mb.len() || ma.is_empty() {
        return Err(Error::Encoder {
            id: net.id().to_string(),
            message: "no comparable feature maps".into(),
        });
    }
    let mut total = 0.0;
    for (x, y) in ma.iter().zip(&mb) {
        let unit = |t: &Tensor| -> Result<Tensor> {
            let n = (t.sqr()?.sum_keepdim(1)?.sqrt()? + NORM_EPS)?;
            Ok(t.broadcast_div(&n)?)
        };
        let d = (unit(x)? - unit(y)?)?.sqr()?.sum(1)?;
        total += d.flatten_from(1)?.mean(D::Minus1)?.mean_all()?.to_scalar::<f64>()?;
    }
    Ok(total)
}
