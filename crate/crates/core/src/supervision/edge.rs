//! Canny edge maps (exact, for evaluation) and a smooth surrogate for training.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image, LUMA_WEIGHTS};
use crate::ops::{conv2d_valid, replicate_pad};

const TAN_22_5: f64 = 0.414_213_562_373_095_03;
const TAN_67_5: f64 = 2.414_213_562_373_095;
const NMS_TOLERANCE: f64 = 1e-9;
const MAG_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeParams {
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
    pub sobel_kernel: usize,
    pub low_threshold: f64,
    /// Sigmoid slope of the differentiable surrogate.
    pub slope: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            gaussian_kernel: 3,
            gaussian_sigma: 1.0,
            sobel_kernel: 3,
            low_threshold: 0.15,
            slope: 50.0,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_kernel == 0 || self.gaussian_kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "gaussian kernel size must be odd, got {}",
                self.gaussian_kernel
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidParameter("gaussian sigma must be > 0".into()));
        }
        if self.sobel_kernel != 3 {
            return Err(Error::InvalidParameter(format!(
                "only a 3x3 Sobel kernel is supported, got {}",
                self.sobel_kernel
            )));
        }
        if !(0.0..=1.0).contains(&self.low_threshold) {
            return Err(Error::InvalidParameter("low threshold must lie in [0, 1]".into()));
        }
        if !(self.slope > 0.0) || !self.slope.is_finite() {
            return Err(Error::InvalidParameter("sigmoid slope must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian taps.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let r = (self.gaussian_kernel / 2) as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|x| (-((x * x) as f64) / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    ExactCanny,
    Differentiable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub params: EdgeParams,
}

impl EdgeMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Sobel kernels (x then y), scaled by 1/8.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const SOBEL_SCALE: f64 = 0.125;

fn blur(gray: &GrayImage, taps: &[f64]) -> GrayImage {
    let r = (taps.len() / 2) as isize;
    let (h, w) = (gray.height, gray.width);
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            rows[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * gray.at_clamped(i as isize, j as isize + k as isize - r))
                .sum();
        }
    }
    let tmp = GrayImage {
        height: h,
        width: w,
        data: rows,
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp.at_clamped(i as isize + k as isize - r, j as isize))
                .sum();
        }
    }
    GrayImage {
        height: h,
        width: w,
        data: out,
    }
}

fn sobel(gray: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (gray.height, gray.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (di, (kx, ky)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for dj in 0..3 {
                    let v = gray.at_clamped(i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    sx += kx[dj] * v;
                    sy += ky[dj] * v;
                }
            }
            gx[i * w + j] = sx * SOBEL_SCALE;
            gy[i * w + j] = sy * SOBEL_SCALE;
        }
    }
    (gx, gy)
}

/// Blurred Sobel gradients `(gx, gy)` in row-major order.
pub fn sobel_gradients(gray: &GrayImage, params: &EdgeParams) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    Ok(sobel(&blur(gray, &params.gaussian_taps())))
}

pub fn sobel_magnitude(gray: &GrayImage, params: &EdgeParams) -> Result<Vec<f64>> {
    let (gx, gy) = sobel_gradients(gray, params)?;
    Ok(gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect())
}

/// Neighbor offsets `(negative, positive)` along the quantized gradient direction.
fn nms_neighbors(gx: f64, gy: f64) -> ((isize, isize), (isize, isize)) {
    let (ax, ay) = (gx.abs(), gy.abs());
    if ay <= TAN_22_5 * ax {
        ((0, -1), (0, 1))
    } else if ay > TAN_67_5 * ax {
        ((-1, 0), (1, 0))
    } else if gx * gy > 0.0 {
        ((-1, -1), (1, 1))
    } else {
        ((1, -1), (-1, 1))
    }
}

/// Blur, Sobel, non-maximum suppression and a single hard threshold.
pub fn exact_canny(gray: &GrayImage, params: &EdgeParams) -> Result<Vec<f64>> {
    let (gx, gy) = sobel_gradients(gray, params)?;
    let (h, w) = (gray.height, gray.width);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let get = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag[i as usize * w + j as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let m = mag[k];
            if m <= params.low_threshold {
                continue;
            }
            let ((ni, nj), (pi, pj)) = nms_neighbors(gx[k], gy[k]);
            let neg = get(i as isize + ni, j as isize + nj);
            let pos = get(i as isize + pi, j as isize + pj);
            if m >= neg - NMS_TOLERANCE && m > pos + NMS_TOLERANCE {
                out[k] = 1.0;
            }
        }
    }
    Ok(out)
}

fn check_unit_range(image: &Image) -> Result<()> {
    if image.in_unit_range() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "edge map input has pixels outside [0, 1]".into(),
        ))
    }
}

pub fn edge_map(image: &Image, params: &EdgeParams, mode: EdgeMode) -> Result<EdgeMap> {
    check_unit_range(image)?;
    params.validate()?;
    let values = match mode {
        EdgeMode::ExactCanny => exact_canny(&image.to_gray(), params)?,
        EdgeMode::Differentiable => {
            let t = image.to_tensor(DType::F64, &Device::Cpu)?.unsqueeze(0)?;
            soft_edge_map(&t, params)?.flatten_all()?.to_vec1::<f64>()?
        }
    };
    Ok(EdgeMap {
        height: image.height(),
        width: image.width(),
        values,
        params: *params,
    })
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Luminance of a `(B, 3, H, W)` batch as `(B, 1, H, W)`.
pub fn luminance(images: &Tensor) -> Result<Tensor> {
    let w = Tensor::from_vec(LUMA_WEIGHTS.to_vec(), (1, 3, 1, 1), images.device())?.to_dtype(images.dtype())?;
    Ok(images.broadcast_mul(&w)?.sum_keepdim(1)?)
}

/// Smooth edge map of a `(B, 3, H, W)` batch, returned as `(B, 1, H, W)`.
pub fn soft_edge_map(images: &Tensor, params: &EdgeParams) -> Result<Tensor> {
    params.validate()?;
    let (_, c, _, _) = images.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let (dtype, dev) = (images.dtype(), images.device());
    let gray = luminance(images)?;
    let taps = params.gaussian_taps();
    let k = taps.len();
    let g2: Vec<f64> = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect();
    let gk = Tensor::from_vec(g2, (1, 1, k, k), dev)?.to_dtype(dtype)?;
    let blurred = conv2d_valid(&replicate_pad(&gray, k / 2)?, &gk)?;
    let sk: Vec<f64> = SOBEL_X
        .iter()
        .chain(&SOBEL_Y)
        .flat_map(|row| row.iter().map(|v| v * SOBEL_SCALE))
        .collect();
    let sk = Tensor::from_vec(sk, (2, 1, 3, 3), dev)?.to_dtype(dtype)?;
    let grads = conv2d_valid(&replicate_pad(&blurred, 1)?, &sk)?;
    let mag = ((grads.sqr()?.sum_keepdim(1)? + MAG_EPS * MAG_EPS)?.sqrt()? - MAG_EPS)?;
    sigmoid(&((mag - params.low_threshold)? * params.slope)?)
}

/// Mean squared difference of smooth edge maps; the real map is a constant.
pub fn edge_loss(real: &Tensor, generated: &Tensor, params: &EdgeParams) -> Result<Tensor> {
    if real.dims() != generated.dims() {
        return Err(Error::ShapeMismatch(format!(
            "edge loss inputs {:?} vs {:?}",
            real.dims(),
            generated.dims()
        )));
    }
    let target = soft_edge_map(&real.detach(), params)?.detach();
    let pred = soft_edge_map(generated, params)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}
