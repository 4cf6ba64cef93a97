//! Artifact records: manifest ingestion, validation, deterministic splits and
//! training samples.

pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{assemble_prompt, ExpertAttributes, DEFAULT_SEP};

/// Manifest file name used when a directory is given instead of a file.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub const UNKNOWN_PERIOD: &str = "UNKNOWN_PERIOD";

/// One museum catalog entry. `image` is the manifest's reference, relative to
/// the manifest's directory unless absolute; `None` marks a text-only record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub id: String,
    pub name: String,
    pub time_period: String,
    pub description: String,
    pub size_text: String,
    pub image: Option<String>,
}

impl ArtifactRecord {
    /// Only records with an image can enter training.
    pub fn is_trainable(&self) -> bool {
        self.image.is_some()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.name.trim().is_empty() {
            return Err("empty name".into());
        }
        if self.description.trim().is_empty() {
            return Err("empty description".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based manifest line.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub base_dir: PathBuf,
    pub records: Vec<ArtifactRecord>,
    pub rejects: Vec<Reject>,
}

impl Corpus {
    pub fn image_path(&self, record: &ArtifactRecord) -> Option<PathBuf> {
        record.image.as_ref().map(|p| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn get(&self, id: &str) -> Option<&ArtifactRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn text_only_count(&self) -> usize {
        self.records.iter().filter(|r| !r.is_trainable()).count()
    }
}

/// Reads a JSON-lines manifest (or `<dir>/manifest.jsonl`). Rows that fail
/// validation land in `rejects` with a reason.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base_dir = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ArtifactRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject {
                    line: lineno,
                    id: None,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let mut reject = |reason: String| {
            rejects.push(Reject {
                line: lineno,
                id: Some(record.id.clone()),
                reason,
            })
        };
        if let Err(reason) = record.validate() {
            reject(reason);
            continue;
        }
        if seen.contains(&record.id) {
            reject("duplicate id".into());
            continue;
        }
        if let Some(img) = &record.image {
            let p = if Path::new(img).is_absolute() {
                PathBuf::from(img)
            } else {
                base_dir.join(img)
            };
            if let Err(e) = probe_image(&p) {
                reject(format!("image not decodable: {e}"));
                continue;
            }
        }
        seen.insert(record.id.clone());
        records.push(record);
    }
    Ok(Corpus {
        base_dir,
        records,
        rejects,
    })
}

fn probe_image(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Serializes records as a JSON-lines manifest; field order is fixed so the
/// output is byte-stable.
pub fn manifest_bytes(records: &[ArtifactRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn save_manifest(records: &[ArtifactRecord], path: &Path) -> Result<()> {
    let bytes = manifest_bytes(records)?;
    write_atomic(path, &bytes)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

impl CorpusSplit {
    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Split sizes for `n` records: 10% validation and 10% test (floored), the
/// rounding residue goes to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// 80/10/10 split of the trainable records, shuffled by `seed` only.
pub fn split_corpus(records: &[ArtifactRecord], seed: u64) -> Result<CorpusSplit> {
    let mut ids: Vec<String> = records
        .iter()
        .filter(|r| r.is_trainable())
        .map(|r| r.id.clone())
        .collect();
    if ids.len() < 10 {
        return Err(Error::CorpusTooSmall(ids.len()));
    }
    // input order must not matter
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(ids.len());
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(CorpusSplit {
        seed,
        train: ids,
        val,
        test,
    })
}

fn is_period_delimiter(c: char) -> bool {
    matches!(c, ',' | '，' | '(' | ')' | '（' | '）') || c.is_ascii_digit() || ('０'..='９').contains(&c)
}

/// Leading era token of a period string: text up to the first comma,
/// parenthesis or digit, trimmed.
pub fn normalize_period(time_period: &str) -> String {
    let end = time_period.find(is_period_delimiter).unwrap_or(time_period.len());
    let key = time_period[..end].trim();
    if key.is_empty() {
        UNKNOWN_PERIOD.to_string()
    } else {
        key.to_string()
    }
}

/// One enhancement result per record id, as written by the enhancement stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedEntry {
    pub id: String,
    pub attributes: ExpertAttributes,
    pub prompt: String,
}

/// How training prompts are built from records.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// The museum description as-is.
    Raw,
    /// LLM-enhanced attribute sequences keyed by record id.
    Enhanced(BTreeMap<String, EnhancedEntry>),
}

impl PromptSource {
    pub fn from_entries(entries: Vec<EnhancedEntry>) -> Self {
        PromptSource::Enhanced(entries.into_iter().map(|e| (e.id.clone(), e)).collect())
    }

    /// `(prompt, contrastive description)` for a record, or `None` when the
    /// record has no usable enhancement.
    pub fn texts_for(&self, record: &ArtifactRecord) -> Option<(String, String)> {
        match self {
            PromptSource::Raw => Some((record.description.clone(), record.description.clone())),
            PromptSource::Enhanced(map) => {
                let entry = map.get(&record.id)?;
                if !entry.attributes.is_complete() {
                    return None;
                }
                let description = entry.attributes.description_text(DEFAULT_SEP);
                Some((entry.prompt.clone(), description))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub record_id: String,
    pub prompt: String,
    pub name: String,
    /// Anchor text for the contrastive term.
    pub description: String,
    pub image: Image,
    pub period_key: String,
}

/// Builds samples for `ids` in the given order. Records without an image or
/// a usable prompt are skipped and reported by id.
pub fn build_samples(
    corpus: &Corpus,
    ids: &[String],
    prompts: &PromptSource,
    resolution: usize,
) -> Result<(Vec<TrainingSample>, Vec<String>)> {
    let mut samples = Vec::with_capacity(ids.len());
    let mut skipped = Vec::new();
    for id in ids {
        let Some(record) = corpus.get(id) else {
            skipped.push(id.clone());
            continue;
        };
        let (Some(path), Some((prompt, description))) = (corpus.image_path(record), prompts.texts_for(record)) else {
            skipped.push(id.clone());
            continue;
        };
        let image = Image::load_square(&path, resolution)?;
        samples.push(TrainingSample {
            record_id: record.id.clone(),
            prompt,
            name: record.name.clone(),
            description,
            image,
            period_key: normalize_period(&record.time_period),
        });
    }
    Ok((samples, skipped))
}

/// Convenience for callers holding attributes directly.
pub fn entry_from_attributes(id: &str, attributes: ExpertAttributes) -> Result<EnhancedEntry> {
    let prompt = assemble_prompt(&attributes, DEFAULT_SEP)?;
    Ok(EnhancedEntry {
        id: id.to_string(),
        attributes,
        prompt,
    })
}
