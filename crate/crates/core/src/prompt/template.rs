use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExpertAttributes, ATTRIBUTE_LABELS, MODEL_FILLED_LABELS};
use crate::corpus::ArtifactRecord;
use crate::error::{Error, Result};

pub const QUERY_SEPARATOR: &str = "###";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateExample {
    pub description: String,
    pub attributes: ExpertAttributes,
}

/// Task statement, two filled-in examples and the separator placed between
/// the parts and between artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub task_statement: String,
    pub in_context_examples: Vec<TemplateExample>,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    QUERY_SEPARATOR.to_string()
}

impl QueryTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: QueryTemplate = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.separator.trim().is_empty() {
            return Err(Error::Template("empty separator".into()));
        }
        if self.in_context_examples.len() != 2 {
            return Err(Error::Template(format!(
                "expected exactly 2 in-context examples, got {}",
                self.in_context_examples.len()
            )));
        }
        for (i, ex) in self.in_context_examples.iter().enumerate() {
            let missing = ex.attributes.missing();
            if !missing.is_empty() || ex.description.trim().is_empty() {
                let mut what: Vec<&str> = missing;
                if ex.description.trim().is_empty() {
                    what.push("Description");
                }
                return Err(Error::TemplateIncomplete(format!(
                    "example {} missing {}",
                    i + 1,
                    what.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Statement, example 1, example 2 and the target, each followed by the
    /// separator on its own line. The target's model-filled fields are blank.
    pub fn render(&self, record: &ArtifactRecord) -> Result<String> {
        self.validate()?;
        if record.description.trim().is_empty() {
            return Err(Error::InvalidRecord("empty description".into()));
        }
        let target = ExpertAttributes::from_record(record);
        let blocks = [
            self.task_statement.trim().to_string(),
            render_artifact(
                &self.in_context_examples[0].description,
                &self.in_context_examples[0].attributes,
            ),
            render_artifact(
                &self.in_context_examples[1].description,
                &self.in_context_examples[1].attributes,
            ),
            render_artifact(&record.description, &target),
        ];
        if let Some(b) = blocks.iter().find(|b| b.contains(&self.separator)) {
            return Err(Error::Template(format!(
                "content contains the separator {:?}: {}",
                self.separator,
                b.lines().next().unwrap_or_default()
            )));
        }
        let mut out = String::new();
        for block in &blocks {
            out.push_str(block);
            out.push('\n');
            out.push_str(&self.separator);
            out.push('\n');
        }
        Ok(out)
    }

    /// Template shipped with the crate.
    pub fn bundled() -> Self {
        QueryTemplate {
            task_statement: "You are an expert in archaeology and museum cataloguing. For each artifact \
                below you are given its name, time period, size and a raw catalogue description. \
                Fill in the blank fields: extract Material, Shape and Pattern from the description, \
                and use your knowledge of artifact typology to give the Type the artifact belongs to \
                and a general Type Definition describing how artifacts of that type look. \
                Answer with one line per field in the form \"Field: value\"."
                .to_string(),
            in_context_examples: vec![
                TemplateExample {
                    description: "Bronze vessel, round belly, two upright handles on the rim, three \
                        columnar legs. The belly is cast with a band of animal-mask motifs on a \
                        cloud-and-thunder ground. Green patina over most of the surface."
                        .to_string(),
                    attributes: ExpertAttributes {
                        name: "Ding cauldron with animal-mask band".into(),
                        material: "Bronze".into(),
                        time_period: "Late Shang Dynasty, 13th-11th century BC".into(),
                        artifact_type: "Round ding".into(),
                        type_definition: "A ritual cooking vessel with a deep round body, two \
                            handles standing on the rim and three legs; square ding have four legs \
                            and a rectangular body"
                            .into(),
                        shape: "Round deep belly, two upright loop handles, three cylindrical legs".into(),
                        pattern: "Band of animal-mask motifs over fine thunder-pattern ground, green patina".into(),
                        size: "Height 22.4 cm, mouth diameter 18.1 cm".into(),
                    },
                },
                TemplateExample {
                    description: "Small glass bottle painted in enamels with twining flowers and \
                        leaves on a yellow ground; coral-red stopper; reign mark on the base."
                        .to_string(),
                    attributes: ExpertAttributes {
                        name: "Snuff bottle with twining flowers in painted enamels on a yellow ground".into(),
                        material: "Glass with painted enamels".into(),
                        time_period: "Qing Dynasty, Qianlong reign, 1736-1795 AD".into(),
                        artifact_type: "Snuff bottle".into(),
                        type_definition: "A small hand-held flask for powdered tobacco with a narrow \
                            mouth, a flattened or rounded body and a stopper fitted with a tiny spoon"
                            .into(),
                        shape: "Flattened ovoid body, short straight neck, oval foot, domed stopper".into(),
                        pattern: "Polychrome twining flowers and leaves on an opaque yellow ground".into(),
                        size: "Height 5.8 cm".into(),
                    },
                },
            ],
            separator: default_separator(),
        }
    }
}

fn render_artifact(description: &str, attrs: &ExpertAttributes) -> String {
    let values = attrs.values();
    let value_of = |label: &str| {
        let i = ATTRIBUTE_LABELS.iter().position(|l| *l == label).expect("known label");
        values[i].trim()
    };
    let mut lines = vec![
        format!("Name: {}", value_of("Name")),
        format!("Time Period: {}", value_of("Time Period")),
        format!("Size: {}", value_of("Size")),
        format!("Description: {}", description.trim()),
    ];
    for label in MODEL_FILLED_LABELS {
        let v = value_of(label);
        lines.push(if v.is_empty() {
            format!("{label}:")
        } else {
            format!("{label}: {v}")
        });
    }
    lines.join("\n")
}
