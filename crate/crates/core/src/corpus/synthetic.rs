//! Desk-scale synthetic corpus: small colored squares, circles and triangles
//! on a pale ground, each with templated museum-style text and ready-made
//! expert attributes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    entry_from_attributes, normalize_period, save_manifest, write_jsonl, ArtifactRecord, EnhancedEntry, TrainingSample,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{assemble_prompt, ExpertAttributes, DEFAULT_SEP};

/// File the pre-filled enhancement entries are written to.
pub const PROMPTS_FILE: &str = "prompts.jsonl";

const BACKGROUND: [f32; 3] = [0.95, 0.93, 0.88];

const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.15, 0.6, 0.25]),
    ("blue", [0.12, 0.25, 0.8]),
    ("black", [0.08, 0.08, 0.08]),
];

const PERIODS: [&str; 6] = [
    "Shang Dynasty, 1600-1046 BC",
    "Zhou Dynasty, 1046-256 BC",
    "Han Dynasty, 206 BC-220 AD",
    "Tang Dynasty, 618-907 AD",
    "Song Dynasty, 960-1279 AD",
    "Ming Dynasty, 1368-1644 AD",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn label(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn definition(self) -> &'static str {
        match self {
            ShapeKind::Square => "a flat tablet with four equal straight sides",
            ShapeKind::Circle => "a round disc with a continuous curved rim",
            ShapeKind::Triangle => "a pointed plaque with three straight sides",
        }
    }

    fn covers(self, dy: f32, dx: f32, half: f32) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            // apex up, base at +half
            ShapeKind::Triangle => dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0,
        }
    }
}

/// One drawn artifact before it is written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub record: ArtifactRecord,
    pub attributes: ExpertAttributes,
    pub image: Image,
}

/// Draws one shape. `half` is the half-extent in pixels; offsets shift the
/// center from the image center.
pub fn draw_shape(resolution: usize, kind: ShapeKind, rgb: [f32; 3], half: f32, offset: (i32, i32)) -> Image {
    let mut img = Image::filled(resolution, resolution, BACKGROUND);
    let cy = (resolution as f32 - 1.0) / 2.0 + offset.0 as f32;
    let cx = (resolution as f32 - 1.0) / 2.0 + offset.1 as f32;
    for r in 0..resolution {
        for c in 0..resolution {
            if kind.covers(r as f32 - cy, c as f32 - cx, half) {
                img.set_pixel(r, c, rgb);
            }
        }
    }
    img
}

fn offset_words(offset: (i32, i32)) -> String {
    let vertical = match offset.0.signum() {
        -1 => "raised",
        1 => "lowered",
        _ => "level",
    };
    let horizontal = match offset.1.signum() {
        -1 => "left",
        1 => "right",
        _ => "center",
    };
    format!("{vertical} {horizontal}")
}

/// Generates `count` items deterministically from `seed`.
pub fn generate_items(count: usize, resolution: usize, seed: u64) -> Vec<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_half = (resolution as f32 / 2.0 - 3.0).max(2.0);
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            let (color, rgb) = COLORS[rng.random_range(0..COLORS.len())];
            let large = rng.random_bool(0.5);
            let half = if large { max_half } else { (max_half - 2.0).max(2.0) };
            let offset = (rng.random_range(-1..=1) * 2, rng.random_range(-1..=1) * 2);
            let kind_idx = ShapeKind::ALL.iter().position(|k| *k == kind).unwrap();
            let color_idx = COLORS.iter().position(|c| c.0 == color).unwrap();
            let period = PERIODS[(kind_idx * COLORS.len() + color_idx) % PERIODS.len()];
            let size_word = if large { "large" } else { "small" };
            let placement = offset_words(offset);
            let id = format!("syn-{i:05}");
            let name = format!("{color} {} {size_word}", kind.label());
            let size_text = format!("{size_word}, width {} px", (2.0 * half + 1.0) as usize);
            let record = ArtifactRecord {
                id: id.clone(),
                name: name.clone(),
                time_period: period.to_string(),
                description: format!(
                    "A {size_word} {color} {} placed {placement} on a pale ground",
                    kind.label()
                ),
                size_text: size_text.clone(),
                image: Some(format!("images/{id}.png")),
            };
            let attributes = ExpertAttributes {
                name,
                material: format!("{color} glazed ceramic"),
                time_period: period.to_string(),
                artifact_type: kind.label().to_string(),
                type_definition: kind.definition().to_string(),
                shape: format!("{} {}", kind.label(), placement),
                pattern: format!("solid {color}"),
                size: size_text,
            };
            let image = draw_shape(resolution, kind, rgb, half, offset);
            SyntheticItem {
                record,
                attributes,
                image,
            }
        })
        .collect()
}

/// Writes images, `manifest.jsonl` and `prompts.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, items: &[SyntheticItem]) -> Result<Vec<EnhancedEntry>> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(items.len());
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let rel = item.record.image.as_ref().expect("synthetic items carry images");
        item.image.save_png(&dir.join(rel))?;
        records.push(item.record.clone());
        entries.push(entry_from_attributes(&item.record.id, item.attributes.clone())?);
    }
    save_manifest(&records, &dir.join(MANIFEST_FILE))?;
    write_jsonl(&dir.join(PROMPTS_FILE), &entries)?;
    Ok(entries)
}

/// Training samples built in memory, with enhanced prompts.
pub fn to_samples(items: &[SyntheticItem]) -> Result<Vec<TrainingSample>> {
    items
        .iter()
        .map(|item| {
            Ok(TrainingSample {
                record_id: item.record.id.clone(),
                prompt: assemble_prompt(&item.attributes, DEFAULT_SEP)?,
                name: item.record.name.clone(),
                description: item.attributes.description_text(DEFAULT_SEP),
                image: item.image.clone(),
                period_key: normalize_period(&item.record.time_period),
            })
        })
        .collect()
}
