//! LLM-enhanced prompt construction: the eight expert attributes, the
//! three-part query template, response parsing and SEP-joined assembly.

mod client;
mod template;

pub use client::{ChatTransport, EnhanceStatus, Enhancer, HttpTransport, LlmClientConfig, ResponseCache, API_KEY_ENV};
pub use template::{QueryTemplate, TemplateExample, QUERY_SEPARATOR};

use serde::{Deserialize, Serialize};

use crate::corpus::ArtifactRecord;
use crate::error::{Error, Result};

/// Fullwidth comma, the default attribute delimiter.
pub const DEFAULT_SEP: &str = "，";

/// Attribute labels in assembly order.
pub const ATTRIBUTE_LABELS: [&str; 8] = [
    "Name",
    "Material",
    "Time Period",
    "Type",
    "Type Definition",
    "Shape",
    "Pattern",
    "Size",
];

/// Labels the model fills in; the other three come from the museum record.
pub const MODEL_FILLED_LABELS: [&str; 5] = ["Material", "Type", "Type Definition", "Shape", "Pattern"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAttributes {
    pub name: String,
    pub material: String,
    pub time_period: String,
    #[serde(rename = "type")]
    pub artifact_type: String,
    pub type_definition: String,
    pub shape: String,
    pub pattern: String,
    pub size: String,
}

impl ExpertAttributes {
    /// Museum-provided fields copied verbatim; model fields left empty.
    pub fn from_record(record: &ArtifactRecord) -> Self {
        Self {
            name: record.name.clone(),
            time_period: record.time_period.clone(),
            size: record.size_text.clone(),
            ..Default::default()
        }
    }

    /// Values in assembly order.
    pub fn values(&self) -> [&str; 8] {
        [
            &self.name,
            &self.material,
            &self.time_period,
            &self.artifact_type,
            &self.type_definition,
            &self.shape,
            &self.pattern,
            &self.size,
        ]
    }

    pub fn from_values(values: [String; 8]) -> Self {
        let [name, material, time_period, artifact_type, type_definition, shape, pattern, size] = values;
        Self {
            name,
            material,
            time_period,
            artifact_type,
            type_definition,
            shape,
            pattern,
            size,
        }
    }

    fn model_field_mut(&mut self, label: &str) -> Option<&mut String> {
        match label {
            "Material" => Some(&mut self.material),
            "Type" => Some(&mut self.artifact_type),
            "Type Definition" => Some(&mut self.type_definition),
            "Shape" => Some(&mut self.shape),
            "Pattern" => Some(&mut self.pattern),
            _ => None,
        }
    }

    /// Labels whose value is empty after trimming.
    pub fn missing(&self) -> Vec<&'static str> {
        ATTRIBUTE_LABELS
            .iter()
            .zip(self.values())
            .filter(|(_, v)| v.trim().is_empty())
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    /// Every attribute except the name, SEP-joined; the anchor text paired
    /// with the name in the contrastive term.
    pub fn description_text(&self, sep: &str) -> String {
        self.values()[1..].join(sep)
    }
}

/// Joins the eight attributes in canonical order with `sep`.
pub fn assemble_prompt(attrs: &ExpertAttributes, sep: &str) -> Result<String> {
    let missing = attrs.missing();
    if !missing.is_empty() {
        return Err(Error::IncompleteAttributes(missing.join(", ")));
    }
    Ok(attrs.values().join(sep))
}

/// Inverse of [`assemble_prompt`] when no field contains `sep`.
pub fn split_prompt(prompt: &str, sep: &str) -> Option<ExpertAttributes> {
    let parts: Vec<String> = prompt.split(sep).map(String::from).collect();
    let values: [String; 8] = parts.try_into().ok()?;
    Some(ExpertAttributes::from_values(values))
}

/// Extracts the five model-filled fields from labeled `Label: value` lines.
/// Museum fields come from `record`. Lines without a known label continue
/// the previous field. Missing labels leave the field empty.
pub fn parse_response(raw: &str, record: &ArtifactRecord) -> ExpertAttributes {
    let mut attrs = ExpertAttributes::from_record(record);
    // longest labels first so "Type Definition" wins over "Type"
    let mut labels: Vec<&str> = ATTRIBUTE_LABELS.to_vec();
    labels.push("Description");
    labels.sort_by_key(|l| std::cmp::Reverse(l.len()));

    let mut current: Option<&str> = None;
    for line in raw.lines() {
        let trimmed = line.trim().trim_start_matches(['-', '*', ' ']);
        if trimmed.is_empty() || trimmed == QUERY_SEPARATOR {
            current = None;
            continue;
        }
        match match_label(trimmed, &labels) {
            Some((label, value)) => {
                current = Some(label);
                if let Some(field) = attrs.model_field_mut(label) {
                    *field = value.trim().to_string();
                }
            }
            None => {
                if let Some(field) = current.and_then(|l| attrs.model_field_mut(l)) {
                    if !field.is_empty() {
                        field.push(' ');
                    }
                    field.push_str(trimmed);
                }
            }
        }
    }
    attrs
}

fn match_label<'a>(line: &'a str, labels: &[&'static str]) -> Option<(&'static str, &'a str)> {
    for label in labels {
        let Some(head) = line.get(..label.len()) else {
            continue;
        };
        if !head.eq_ignore_ascii_case(label) {
            continue;
        }
        let rest = line[label.len()..].trim_start();
        if let Some(v) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：')) {
            return Some((label, v));
        }
    }
    None
}
