//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use artisynth::image::GrayImage;
use artisynth::prompt::ExpertAttributes;
use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reply of the mock chat endpoint: HTTP status and body.
pub type Reply = (u16, String);

/// Minimal HTTP/1.1 chat-completion stub on a loopback port.
pub struct MockLlm {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl MockLlm {
    /// `respond(n, body)` answers the n-th request (0-based).
    pub fn start<F>(respond: F) -> Self
    where
        F: Fn(usize, &str) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = respond(n, &String::from_utf8_lossy(&body));
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        Self {
            url: format!("http://{addr}/v1/chat/completions"),
            hits,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Chat-completion JSON carrying `content`.
pub fn chat_reply(content: &str) -> String {
    serde_json::json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": content } }] })
        .to_string()
}

/// The yuhuchun vase attributes and their assembled prompt.
pub fn vase_attributes() -> ExpertAttributes {
    ExpertAttributes {
        name: "Yuhuchun vase in cobalt blue glaze".into(),
        material: "Porcelain".into(),
        time_period: "Qing Dynasty, Yongzheng reign, 1723-1735 AD".into(),
        artifact_type: "Yuhuchun vase".into(),
        type_definition: "Also known as \"narrow-necked vase,\" yuhuchun vase is a practical commemorative ceramic widely popular in the northern regions. The vase consists of five parts: neck, shoulders, body, foot, and mouth. The neck is long and slender, the body is plump, and the foot can be a short circular footring or a horseshoe-shaped foot. Yuhuchun vases are created using various clay recipes and glaze techniques, resulting in distinct colors and surface effects for each piece".into(),
        shape: "Flared mouth, slender neck, sloping shoulders, pear-shaped ample body, and a circular footring".into(),
        pattern: "The body of the vase is adorned with a cobalt blue glaze, which shines with a bright indigo color. The interior and the base of the vessel are covered in white glaze. The footring reveals the white body of the vase".into(),
        size: "Height of 30.3 cm, mouth diameter of 8.5 cm, base diameter of 12.0 cm".into(),
    }
}

pub const VASE_PROMPT: &str = "Yuhuchun vase in cobalt blue glaze，Porcelain，Qing Dynasty, Yongzheng reign, 1723-1735 AD，Yuhuchun vase，Also known as \"narrow-necked vase,\" yuhuchun vase is a practical commemorative ceramic widely popular in the northern regions. The vase consists of five parts: neck, shoulders, body, foot, and mouth. The neck is long and slender, the body is plump, and the foot can be a short circular footring or a horseshoe-shaped foot. Yuhuchun vases are created using various clay recipes and glaze techniques, resulting in distinct colors and surface effects for each piece，Flared mouth, slender neck, sloping shoulders, pear-shaped ample body, and a circular footring，The body of the vase is adorned with a cobalt blue glaze, which shines with a bright indigo color. The interior and the base of the vessel are covered in white glaze. The footring reveals the white body of the vase，Height of 30.3 cm, mouth diameter of 8.5 cm, base diameter of 12.0 cm";

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `(B, C, H, W)` f64 tensor of uniform values in `[lo, hi)`.
pub fn uniform_tensor(seed: u64, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = uniform(seed, n).into_iter().map(|u| lo + (hi - lo) * u).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Analytic gradient of `f` at `x` against central differences, as the
/// norm of the difference relative to the norm of the numeric gradient.
pub fn gradient_gap<F>(x: &Tensor, h: f64, f: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = Var::from_tensor(x).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eval = |v: Vec<f64>| -> f64 {
        let t = Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let mut num = 0.0;
    let mut diff = 0.0;
    for i in 0..base.len() {
        let mut up = base.clone();
        let mut down = base.clone();
        up[i] += h;
        down[i] -= h;
        let g = (eval(up) - eval(down)) / (2.0 * h);
        num += g * g;
        diff += (g - analytic[i]).powi(2);
    }
    if num == 0.0 {
        diff.sqrt()
    } else {
        (diff / num).sqrt()
    }
}

/// Straightforward Canny reference: 2D Gaussian and Sobel kernels applied
/// pixel by pixel with clamped borders, direction bins from `atan2`,
/// suppression, then the single threshold.
pub fn reference_canny(gray: &GrayImage, kernel: usize, sigma: f64, threshold: f64) -> Vec<f64> {
    let (h, w) = (gray.height as isize, gray.width as isize);
    let at = |img: &[f64], i: isize, j: isize| img[(i.clamp(0, h - 1) * w + j.clamp(0, w - 1)) as usize];
    let r = (kernel / 2) as isize;
    let g1: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let mut blurred = vec![0.0; (h * w) as usize];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    acc += g1[(di + r) as usize] / s * g1[(dj + r) as usize] / s * at(&gray.data, i + di, j + dj);
                }
            }
            blurred[(i * w + j) as usize] = acc;
        }
    }
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut gx = vec![0.0; blurred.len()];
    let mut gy = vec![0.0; blurred.len()];
    for i in 0..h {
        for j in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for a in 0..3isize {
                for b in 0..3isize {
                    let v = at(&blurred, i + a - 1, j + b - 1);
                    sx += kx[a as usize][b as usize] * v;
                    sy += kx[b as usize][a as usize] * v;
                }
            }
            gx[(i * w + j) as usize] = sx / 8.0;
            gy[(i * w + j) as usize] = sy / 8.0;
        }
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let m = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h || j >= w {
            0.0
        } else {
            mag[(i * w + j) as usize]
        }
    };
    let mut out = vec![0.0; mag.len()];
    for i in 0..h {
        for j in 0..w {
            let k = (i * w + j) as usize;
            if mag[k] <= threshold {
                continue;
            }
            let mut angle = gy[k].atan2(gx[k]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // first neighbour is the one that may tie
            let (first, second) = if !(22.5..157.5).contains(&angle) {
                ((i, j - 1), (i, j + 1))
            } else if angle < 67.5 {
                ((i - 1, j - 1), (i + 1, j + 1))
            } else if angle < 112.5 {
                ((i - 1, j), (i + 1, j))
            } else {
                ((i + 1, j - 1), (i - 1, j + 1))
            };
            if mag[k] >= m(first.0, first.1) - 1e-9 && mag[k] > m(second.0, second.1) + 1e-9 {
                out[k] = 1.0;
            }
        }
    }
    out
}

/// Five 8×8 gray fixtures: vertical, horizontal and diagonal steps, a
/// bright square and a seeded random field.
pub fn canny_fixtures() -> Vec<(&'static str, GrayImage)> {
    let n = 8;
    let make =
        |f: &dyn Fn(usize, usize) -> f64| GrayImage::new(n, n, (0..n * n).map(|k| f(k / n, k % n)).collect()).unwrap();
    vec![
        ("vertical step", make(&|_, c| if c >= 4 { 1.0 } else { 0.0 })),
        ("horizontal step", make(&|r, _| if r >= 4 { 0.8 } else { 0.1 })),
        ("diagonal step", make(&|r, c| if r + c >= 8 { 1.0 } else { 0.0 })),
        (
            "square",
            make(&|r, c| {
                if (2..6).contains(&r) && (2..6).contains(&c) {
                    0.9
                } else {
                    0.05
                }
            }),
        ),
        ("random", GrayImage::new(n, n, uniform(11, n * n)).unwrap()),
    ]
}

/// Brute-force windowed SSIM at a single window position: two-pass
/// weighted moments over the whole `k×k` image.
pub fn reference_ssim_single_window(a: &[f64], b: &[f64], k: usize, sigma: f64) -> f64 {
    let r = (k / 2) as f64;
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (y, x) = (i as f64 - r, j as f64 - r);
            w[i * k + j] = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let mx: f64 = w.iter().zip(a).map(|(w, x)| w * x).sum();
    let my: f64 = w.iter().zip(b).map(|(w, y)| w * y).sum();
    let vx: f64 = w.iter().zip(a).map(|(w, x)| w * (x - mx).powi(2)).sum();
    let vy: f64 = w.iter().zip(b).map(|(w, y)| w * (y - my).powi(2)).sum();
    let cov: f64 = w
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * (x - mx) * (y - my))
        .sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}
