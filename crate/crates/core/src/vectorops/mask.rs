use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{open_checkpoint, CheckpointHandle, DType, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAction {
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRule {
    pub pattern: String,
    pub action: MaskAction,
}

impl MaskRule {
    pub fn include(pattern: impl Into<String>) -> Self {
        MaskRule {
            pattern: pattern.into(),
            action: MaskAction::Include,
        }
    }

    pub fn exclude(pattern: impl Into<String>) -> Self {
        MaskRule {
            pattern: pattern.into(),
            action: MaskAction::Exclude,
        }
    }
}

/// Which parameters a vector is applied to.
///
/// `Rules` are tensor-level glob rules, first match wins, unmatched tensors
/// are included. `TensorFile` points at a checkpoint of U8 tensors holding a
/// 0/1 value per parameter.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    #[default]
    Full,
    Rules(Vec<MaskRule>),
    TensorFile(PathBuf),
    Preset(String),
}

pub const PRESET_NO_EMBEDDINGS: &str = "no-embeddings";

fn preset_rules(name: &str) -> Result<Vec<MaskRule>> {
    match name {
        PRESET_NO_EMBEDDINGS => Ok(vec![
            MaskRule::exclude("*embed_tokens*"),
            MaskRule::exclude("*embeddings*"),
            MaskRule::exclude("*lm_head*"),
            MaskRule::exclude("*wte*"),
            MaskRule::exclude("*wpe*"),
        ]),
        other => Err(Error::Mask(format!("unknown mask preset {other:?}"))),
    }
}

/// Per-tensor resolution of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorMask {
    Include,
    Exclude,
    /// Read per-element bytes from the mask checkpoint.
    Elements,
}

/// A mask bound to concrete rules or an opened mask checkpoint.
#[derive(Debug)]
pub enum ResolvedMask {
    Rules(Vec<(glob::Pattern, MaskAction)>),
    Elements(CheckpointHandle),
}

impl MaskSpec {
    /// Parses the command-line spelling: `full`, `preset:<name>`, `file:<path>`,
    /// a path to a JSON rule list or mask checkpoint, or inline rules such as
    /// `-*embed*,+*.mlp.*` (`+` include, `-` or `!` exclude).
    pub fn parse(text: &str) -> Result<MaskSpec> {
        let text = text.trim();
        if text.is_empty() || text == "full" {
            return Ok(MaskSpec::Full);
        }
        if let Some(name) = text.strip_prefix("preset:") {
            preset_rules(name)?;
            return Ok(MaskSpec::Preset(name.to_string()));
        }
        if let Some(path) = text.strip_prefix("file:") {
            return Ok(MaskSpec::TensorFile(PathBuf::from(path)));
        }
        let path = Path::new(text);
        if path.exists() {
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let rules: Vec<MaskRule> = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::json(path.display().to_string(), e))?;
                return Ok(MaskSpec::Rules(rules));
            }
            return Ok(MaskSpec::TensorFile(path.to_path_buf()));
        }
        let rules = text
            .split(',')
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .map(|r| match r.as_bytes()[0] {
                b'+' => Ok(MaskRule::include(&r[1..])),
                b'-' | b'!' => Ok(MaskRule::exclude(&r[1..])),
                _ => Err(Error::Mask(format!(
                    "rule {r:?} must start with '+' or '-'"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskSpec::Rules(rules))
    }

    pub fn is_full(&self) -> bool {
        matches!(self, MaskSpec::Full)
    }

    /// Compiles patterns or opens the mask checkpoint, checking it against the
    /// layout of the vector it will mask.
    pub fn resolve(&self, vector_layout: &Layout) -> Result<ResolvedMask> {
        let compile = |rules: &[MaskRule]| -> Result<ResolvedMask> {
            rules
                .iter()
                .map(|r| {
                    glob::Pattern::new(&r.pattern)
                        .map(|p| (p, r.action))
                        .map_err(|e| Error::Mask(format!("bad pattern {:?}: {e}", r.pattern)))
                })
                .collect::<Result<Vec<_>>>()
                .map(ResolvedMask::Rules)
        };
        match self {
            MaskSpec::Full => Ok(ResolvedMask::Rules(Vec::new())),
            MaskSpec::Rules(rules) => compile(rules),
            MaskSpec::Preset(name) => compile(&preset_rules(name)?),
            MaskSpec::TensorFile(path) => {
                let handle = open_checkpoint(path)?.with_role("mask");
                for (name, layout) in vector_layout {
                    let meta = handle.meta(name).map_err(|_| {
                        Error::Mask(format!("mask checkpoint has no tensor {name:?}"))
                    })?;
                    if meta.dtype != DType::U8 && meta.dtype != DType::BOOL {
                        return Err(Error::Mask(format!(
                            "mask tensor {name:?} is {}, expected U8",
                            meta.dtype
                        )));
                    }
                    if meta.shape != layout.shape {
                        return Err(Error::Mask(format!(
                            "mask tensor {name:?} has shape {:?}, vector has {:?}",
                            meta.shape, layout.shape
                        )));
                    }
                }
                Ok(ResolvedMask::Elements(handle))
            }
        }
    }
}

impl ResolvedMask {
    pub fn for_tensor(&self, name: &str) -> TensorMask {
        match self {
            ResolvedMask::Rules(rules) => {
                rules
                    .iter()
                    .find(|(p, _)| p.matches(name))
                    .map_or(TensorMask::Include, |(_, a)| match a {
                        MaskAction::Include => TensorMask::Include,
                        MaskAction::Exclude => TensorMask::Exclude,
                    })
            }
            ResolvedMask::Elements(_) => TensorMask::Elements,
        }
    }

    /// Reads a per-element mask, rejecting values other than 0 and 1.
    pub fn read_elements(&self, name: &str) -> Result<Vec<u8>> {
        let ResolvedMask::Elements(handle) = self else {
            return Err(Error::Mask("pattern masks have no element data".into()));
        };
        let block = handle.read_tensor(name)?;
        if let Some(pos) = block.data.iter().position(|v| *v > 1) {
            return Err(Error::Mask(format!(
                "mask tensor {name:?} holds {} at element {pos}; only 0 and 1 are allowed",
                block.data[pos]
            )));
        }
        Ok(block.data)
    }
}
