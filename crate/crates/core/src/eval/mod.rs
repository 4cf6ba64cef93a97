//! Evaluation: per-sample metrics against ground truth, aggregate reports
//! and human rating summaries.

mod metrics;
mod ratings;

pub use metrics::{clip_visual_similarity, lpips, ssim, ssim_gray, SsimParams};
pub use ratings::{
    aggregate_ratings, parse_rating_csv, read_rating_csv, RatedSample, RatingSheet, RatingSummary, ASPECTS,
    ASPECT_TITLES, MAX_SCORE,
};

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, TrainingSample};
use crate::diffusion::checkpoint::load_checkpoint;
use crate::diffusion::{desk_backbone, reverse_sample, Backbone, VarianceSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::supervision::{build_encoder, EncoderSpec, FeatureEncoder};

pub const CLIP_VS_SCALE: &str = "raw_cosine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub record_id: String,
    pub clip_vs: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricRow {
    pub fn is_null(&self) -> bool {
        self.clip_vs.is_none() || self.ssim.is_none() || self.lpips.is_none()
    }

    fn failed(record_id: &str, e: &Error) -> Self {
        Self {
            record_id: record_id.to_string(),
            clip_vs: None,
            ssim: None,
            lpips: None,
            error: Some(format!("{}: {e}", e.kind())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clip_vs: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub split: String,
    pub seed: u64,
    pub clip_vs_scale: String,
    pub encoder: String,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
    pub aggregates: Option<Aggregates>,
}

impl MetricReport {
    /// Aggregates are means over non-null rows; null rows are counted as failures.
    pub fn from_rows(mut meta: ReportMeta, rows: Vec<MetricRow>) -> Self {
        let ok: Vec<&MetricRow> = rows.iter().filter(|r| !r.is_null()).collect();
        meta.failures = rows.len() - ok.len();
        let aggregates = (!ok.is_empty()).then(|| {
            let n = ok.len() as f64;
            Aggregates {
                clip_vs: ok.iter().filter_map(|r| r.clip_vs).sum::<f64>() / n,
                ssim: ok.iter().filter_map(|r| r.ssim).sum::<f64>() / n,
                lpips: ok.iter().filter_map(|r| r.lpips).sum::<f64>() / n,
                count: ok.len(),
            }
        });
        Self { meta, rows, aggregates }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Frozen networks used for scoring.
#[derive(Clone)]
pub struct EvalEncoders {
    pub clip: Arc<dyn FeatureEncoder>,
    pub lpips: Arc<dyn FeatureEncoder>,
    pub ssim: SsimParams,
}

impl EvalEncoders {
    pub fn from_spec(spec: &EncoderSpec, resolution: usize) -> Result<Self> {
        let enc = build_encoder(spec, resolution, resolution)?;
        Ok(Self {
            clip: enc.clone(),
            lpips: enc,
            ssim: SsimParams::default(),
        })
    }
}

pub fn score_pair(id: &str, generated: &Image, truth: &Image, encoders: &EvalEncoders) -> MetricRow {
    let scored = (|| -> Result<MetricRow> {
        Ok(MetricRow {
            record_id: id.to_string(),
            clip_vs: Some(clip_visual_similarity(generated, truth, encoders.clip.as_ref())?),
            ssim: Some(ssim(generated, truth, &encoders.ssim)?),
            lpips: Some(lpips(generated, truth, encoders.lpips.as_ref())?),
            error: None,
        })
    })();
    scored.unwrap_or_else(|e| MetricRow::failed(id, &e))
}

/// Scores `(id, generated-or-error, ground truth)` triples.
pub fn evaluate_pairs(
    meta: ReportMeta,
    pairs: &[(String, Result<Image>, &Image)],
    encoders: &EvalEncoders,
) -> MetricReport {
    let rows = pairs
        .iter()
        .map(|(id, generated, truth)| match generated {
            Ok(g) => score_pair(id, g, truth, encoders),
            Err(e) => MetricRow::failed(id, e),
        })
        .collect();
    MetricReport::from_rows(meta, rows)
}

/// A trained model restored from a checkpoint directory.
pub struct LoadedModel {
    pub backbone: Backbone,
    pub schedule: VarianceSchedule,
    pub step: u64,
}

pub fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint(checkpoint)?;
    let backbone = desk_backbone(&ck.meta.backbone, 0, DType::F32, &Device::Cpu)?;
    backbone.load_params(&ck.params)?;
    Ok(LoadedModel {
        backbone,
        schedule: ck.meta.schedule.build()?,
        step: ck.meta.step,
    })
}

/// One image for `prompt`, starting from noise drawn with `seed`.
pub fn generate(model: &LoadedModel, prompt: &str, seed: u64, steps: usize) -> Result<Image> {
    let embedding = model.backbone.text_encoder.encode(&[prompt])?.detach();
    let images = reverse_sample(&embedding, &model.backbone, &model.schedule, steps, seed)?;
    Image::from_tensor(&images)
}

/// Generates one image per sample (same seed for every prompt) and scores it
/// against the sample's ground truth.
pub fn evaluate_split(
    model: &LoadedModel,
    model_id: &str,
    split: &str,
    samples: &[TrainingSample],
    encoders: &EvalEncoders,
    seed: u64,
    steps: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "split {split} has no evaluable samples"
        )));
    }
    let pairs: Vec<(String, Result<Image>, &Image)> = samples
        .iter()
        .map(|s| (s.record_id.clone(), generate(model, &s.prompt, seed, steps), &s.image))
        .collect();
    let meta = ReportMeta {
        model: model_id.to_string(),
        split: split.to_string(),
        seed,
        clip_vs_scale: CLIP_VS_SCALE.into(),
        encoder: encoders.clip.id().to_string(),
        failures: 0,
        timestamp_unix: None,
    };
    Ok(evaluate_pairs(meta, &pairs, encoders))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Text table with one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut s = String::from("| Model | CLIP-VS ↑ | SSIM ↑ | LPIPS ↓ |\n|---|---|---|---|\n");
    for r in reports {
        let a = r.aggregates;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.meta.model,
            fmt_metric(a.map(|a| a.clip_vs)),
            fmt_metric(a.map(|a| a.ssim)),
            fmt_metric(a.map(|a| a.lpips)),
        );
    }
    s
}

pub fn render_ratings_table(label: &str, summary: &RatingSummary) -> String {
    let mut s = String::from("| Model |");
    for t in ASPECT_TITLES {
        let _ = write!(s, " {t} |");
    }
    s.push_str(" total avg. |\n|---|---|---|---|---|---|---|\n");
    let _ = write!(s, "| {label} |");
    for m in summary.aspect_means {
        let _ = write!(s, " {m:.2} |");
    }
    let _ = writeln!(s, " {:.2} |", summary.total_avg);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ReportMeta {
        ReportMeta {
            model: "m".into(),
            split: "test".into(),
            seed: 0,
            clip_vs_scale: CLIP_VS_SCALE.into(),
            encoder: "identity".into(),
            failures: 0,
            timestamp_unix: None,
        }
    }

    fn row(id: &str, v: Option<(f64, f64, f64)>) -> MetricRow {
        MetricRow {
            record_id: id.into(),
            clip_vs: v.map(|x| x.0),
            ssim: v.map(|x| x.1),
            lpips: v.map(|x| x.2),
            error: None,
        }
    }

    #[test]
    fn aggregates_skip_null_rows() {
        let r = MetricReport::from_rows(
            meta(),
            vec![
                row("a", Some((0.9, 0.5, 0.1))),
                row("b", None),
                row("c", Some((0.7, 0.3, 0.3))),
            ],
        );
        let a = r.aggregates.unwrap();
        assert_eq!(a.count, 2);
        assert_eq!(r.meta.failures, 1);
        assert!((a.clip_vs - 0.8).abs() < 1e-12);
        assert!((a.ssim - 0.4).abs() < 1e-12);
        assert!((a.lpips - 0.2).abs() < 1e-12);
    }

    #[test]
    fn table_has_reference_column_order() {
        let r = MetricReport::from_rows(meta(), vec![row("a", Some((0.9, 0.5, 0.1)))]);
        let t = render_table(&[r]);
        assert!(t.starts_with("| Model | CLIP-VS ↑ | SSIM ↑ | LPIPS ↓ |"));
        assert!(t.contains("| m | 0.900 | 0.500 | 0.100 |"));
    }
}
