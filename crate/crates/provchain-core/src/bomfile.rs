//! The on-disk BoM definition format: a strict JSON document with
//! top-level `name`, `version`, `assemblies`, `data_sources`, and
//! `artifacts`. Unknown keys anywhere are rejected, so a typo cannot
//! silently drop a constraint.
//!
//! Parsing only builds a `BomDef`; callers still run `validate_bom` to get
//! wiring checks and the canonical content address.

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::hash::ParseRefError;
use crate::ids::TokenError;
use crate::model::{
    AccessSpec, ArtifactDef, ArtifactKind, AssemblyDef, BomDef, DataSourceDef, NodeId, QosSpec,
    Threshold,
};

#[derive(Debug, Error)]
pub enum BomFileError {
    #[error("not a valid BoM file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Ref(#[from] ParseRefError),
    #[error("unknown artifact kind `{0}`")]
    Kind(String),
    #[error("data source `{0}`: max_response_ms must be positive")]
    ZeroResponseMs(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BomFile {
    name: String,
    version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    assemblies: Vec<AssemblyFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    data_sources: Vec<DataSourceFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    artifacts: Vec<ArtifactFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssemblyFile {
    id: String,
    name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSourceFile {
    id: String,
    name: String,
    access: AccessFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qos: Option<QosFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum AccessFile {
    StaticUrl { url: String },
    Contract { address: String, interface: Json },
    Internal,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QosFile {
    max_response_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    thresholds: Vec<ThresholdFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdFile {
    metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactFile {
    id: String,
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_ref: Option<String>,
}

fn node(id: &str) -> Result<NodeId, BomFileError> {
    Ok(id.parse::<NodeId>()?)
}

pub fn parse_bom_file(text: &str) -> Result<BomDef, BomFileError> {
    let file: BomFile = serde_json::from_str(text)?;

    let mut assemblies = Vec::with_capacity(file.assemblies.len());
    for a in file.assemblies {
        assemblies.push(AssemblyDef {
            id: node(&a.id)?,
            name: a.name,
            inputs: a.inputs.iter().map(|s| node(s)).collect::<Result<_, _>>()?,
            artifacts: a.artifacts.iter().map(|s| node(s)).collect::<Result<_, _>>()?,
            outputs: a.outputs.iter().map(|s| node(s)).collect::<Result<_, _>>()?,
        });
    }

    let mut data_sources = Vec::with_capacity(file.data_sources.len());
    for d in file.data_sources {
        let access = match d.access {
            AccessFile::StaticUrl { url } => AccessSpec::StaticUrl { url },
            AccessFile::Contract { address, interface } => AccessSpec::Contract {
                address: address.parse()?,
                interface: serde_json::to_vec(&interface).expect("JSON value re-serialises"),
            },
            AccessFile::Internal => AccessSpec::Internal,
        };
        let qos = match d.qos {
            None => None,
            Some(q) => Some(QosSpec {
                max_response_ms: q
                    .max_response_ms
                    .try_into()
                    .map_err(|_| BomFileError::ZeroResponseMs(d.id.clone()))?,
                thresholds: q
                    .thresholds
                    .into_iter()
                    .map(|t| Threshold { metric: t.metric, min: t.min, max: t.max })
                    .collect(),
            }),
        };
        data_sources.push(DataSourceDef { id: node(&d.id)?, name: d.name, access, qos });
    }

    let mut artifacts = Vec::with_capacity(file.artifacts.len());
    for a in file.artifacts {
        let kind =
            ArtifactKind::parse(&a.kind).ok_or_else(|| BomFileError::Kind(a.kind.clone()))?;
        let content_ref = a.content_ref.map(|s| s.parse()).transpose()?;
        artifacts.push(ArtifactDef { id: node(&a.id)?, name: a.name, kind, content_ref });
    }

    Ok(BomDef { name: file.name, version: file.version, assemblies, data_sources, artifacts })
}

/// Render a definition back into the file format. `parse_bom_file` of the
/// result reproduces the definition exactly.
pub fn render_bom_file(def: &BomDef) -> String {
    let file = BomFile {
        name: def.name.clone(),
        version: def.version.clone(),
        assemblies: def
            .assemblies
            .iter()
            .map(|a| AssemblyFile {
                id: a.id.to_string(),
                name: a.name.clone(),
                inputs: a.inputs.iter().map(|n| n.to_string()).collect(),
                artifacts: a.artifacts.iter().map(|n| n.to_string()).collect(),
                outputs: a.outputs.iter().map(|n| n.to_string()).collect(),
            })
            .collect(),
        data_sources: def
            .data_sources
            .iter()
            .map(|d| DataSourceFile {
                id: d.id.to_string(),
                name: d.name.clone(),
                access: match &d.access {
                    AccessSpec::StaticUrl { url } => AccessFile::StaticUrl { url: url.clone() },
                    AccessSpec::Contract { address, interface } => AccessFile::Contract {
                        address: address.to_string(),
                        interface: serde_json::from_slice(interface)
                            .expect("validated interfaces are JSON"),
                    },
                    AccessSpec::Internal => AccessFile::Internal,
                },
                qos: d.qos.as_ref().map(|q| QosFile {
                    max_response_ms: q.max_response_ms.get(),
                    thresholds: q
                        .thresholds
                        .iter()
                        .map(|t| ThresholdFile {
                            metric: t.metric.clone(),
                            min: t.min,
                            max: t.max,
                        })
                        .collect(),
                }),
            })
            .collect(),
        artifacts: def
            .artifacts
            .iter()
            .map(|a| ArtifactFile {
                id: a.id.to_string(),
                name: a.name.clone(),
                kind: a.kind.label().to_string(),
                content_ref: a.content_ref.map(|r| r.to_string()),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("BoM files serialise");
    text.push('\n');
    text
}
