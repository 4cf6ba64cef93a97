//! Human rating sheets over five aspects, scored 0 to 5.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ASPECTS: [&str; 5] = ["material", "shape", "pattern_color", "size_ratio", "dynasty"];
pub const ASPECT_TITLES: [&str; 5] = ["Material", "Shape", "Pattern & Color", "Size ratio", "Dynasty"];
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatedSample {
    pub sample_id: String,
    /// Scores in [`ASPECTS`] order.
    pub scores: [u8; 5],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSheet {
    pub rater_id: String,
    pub samples: Vec<RatedSample>,
}

impl RatingSheet {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRating {
            rater_id: self.rater_id.clone(),
            reason,
        };
        if self.rater_id.trim().is_empty() {
            return Err(bad("empty rater id".into()));
        }
        if self.samples.is_empty() {
            return Err(bad("no rated samples".into()));
        }
        for s in &self.samples {
            if let Some((i, v)) = s.scores.iter().enumerate().find(|(_, v)| **v > MAX_SCORE) {
                return Err(bad(format!(
                    "{} score {v} for {} is outside 0..=5",
                    ASPECTS[i], s.sample_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    /// Per-aspect means in [`ASPECTS`] order.
    pub aspect_means: [f64; 5],
    pub total_avg: f64,
    pub ratings: usize,
}

/// Per-aspect mean over every (rater, sample) score; the total is the mean
/// of the aspect means.
pub fn aggregate_ratings(sheets: &[RatingSheet]) -> Result<RatingSummary> {
    if sheets.is_empty() {
        return Err(Error::InvalidParameter("no rating sheets".into()));
    }
    let mut sums = [0u64; 5];
    let mut n = 0usize;
    for sheet in sheets {
        sheet.validate()?;
        for s in &sheet.samples {
            for (acc, v) in sums.iter_mut().zip(s.scores) {
                *acc += v as u64;
            }
            n += 1;
        }
    }
    let aspect_means = sums.map(|s| s as f64 / n as f64);
    Ok(RatingSummary {
        aspect_means,
        total_avg: aspect_means.iter().sum::<f64>() / 5.0,
        ratings: n,
    })
}

/// Reads a CSV with columns `rater_id, sample_id` and the five aspects,
/// grouping rows into one sheet per rater.
pub fn read_rating_csv(path: &Path) -> Result<Vec<RatingSheet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rating_csv(file)
}

pub fn parse_rating_csv<R: std::io::Read>(reader: R) -> Result<Vec<RatingSheet>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidParameter(format!("rating csv header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidParameter(format!("rating csv lacks column {name}")))
    };
    let rater_col = col("rater_id")?;
    let sample_col = col("sample_id")?;
    let aspect_cols = ASPECTS.iter().map(|a| col(a)).collect::<Result<Vec<_>>>()?;

    let mut sheets: BTreeMap<String, Vec<RatedSample>> = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::InvalidParameter(format!("rating csv row {}: {e}", line + 2)))?;
        let rater_id = row.get(rater_col).unwrap_or("").to_string();
        let bad = |reason: String| Error::InvalidRating {
            rater_id: rater_id.clone(),
            reason,
        };
        let sample_id = row.get(sample_col).unwrap_or("").to_string();
        if sample_id.is_empty() {
            return Err(bad(format!("row {} has no sample id", line + 2)));
        }
        let mut scores = [0u8; 5];
        for (k, &c) in aspect_cols.iter().enumerate() {
            let cell = row.get(c).unwrap_or("");
            if cell.is_empty() {
                return Err(bad(format!("{sample_id} is missing {}", ASPECTS[k])));
            }
            scores[k] = cell
                .parse::<u8>()
                .ok()
                .filter(|v| *v <= MAX_SCORE)
                .ok_or_else(|| bad(format!("{sample_id} has invalid {} score {cell:?}", ASPECTS[k])))?;
        }
        sheets
            .entry(rater_id.clone())
            .or_default()
            .push(RatedSample { sample_id, scores });
    }
    let sheets: Vec<RatingSheet> = sheets
        .into_iter()
        .map(|(rater_id, samples)| RatingSheet { rater_id, samples })
        .collect();
    for s in &sheets {
        s.validate()?;
    }
    Ok(sheets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sheet(rater: &str, score: u8, n: usize) -> RatingSheet {
        RatingSheet {
            rater_id: rater.into(),
            samples: (0..n)
                .map(|i| RatedSample {
                    sample_id: format!("s{i}"),
                    scores: [score; 5],
                })
                .collect(),
        }
    }

    #[test]
    fn constant_and_two_rater_cases() {
        let s = aggregate_ratings(&[sheet("a", 3, 4)]).unwrap();
        assert_eq!(s.aspect_means, [3.0; 5]);
        assert_eq!(s.total_avg, 3.0);
        let s = aggregate_ratings(&[sheet("a", 2, 3), sheet("b", 4, 3)]).unwrap();
        assert_eq!(s.aspect_means, [3.0; 5]);
    }

    #[test]
    fn csv_parses_and_rejects_bad_scores() {
        let ok = "rater_id,sample_id,material,shape,pattern_color,size_ratio,dynasty\nr1,a,5,4,3,2,1\nr2,a,0,1,2,3,4\n";
        let sheets = parse_rating_csv(ok.as_bytes()).unwrap();
        assert_eq!(sheets.len(), 2);
        assert_eq!(aggregate_ratings(&sheets).unwrap().aspect_means, [2.5; 5]);

        let bad = "rater_id,sample_id,material,shape,pattern_color,size_ratio,dynasty\nr9,a,6,4,3,2,1\n";
        match parse_rating_csv(bad.as_bytes()) {
            Err(Error::InvalidRating { rater_id, .. }) => assert_eq!(rater_id, "r9"),
            other => panic!("{other:?}"),
        }
        let missing = "rater_id,sample_id,material,shape,pattern_color,size_ratio,dynasty\nr3,a,1,2,,2,1\n";
        assert!(matches!(
            parse_rating_csv(missing.as_bytes()),
            Err(Error::InvalidRating { .. })
        ));
    }
}
