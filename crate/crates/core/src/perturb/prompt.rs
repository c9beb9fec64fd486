use std::str::FromStr;

use crate::error::{Error, Result};

/// The instruction placed before the problem statement.
pub const THINK_PREFIX: &str = "Think step by step";

const PROBLEM_SLOT: &str = "{problem}";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    Gsm8k,
    HumanEval,
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gsm8k" => Ok(TemplateId::Gsm8k),
            "humaneval" => Ok(TemplateId::HumanEval),
            _ => Err(Error::InvalidArgument(format!(
                "unknown template {s:?}; expected gsm8k or humaneval"
            ))),
        }
    }
}

/// Template text with a single `{problem}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let text = match id {
            TemplateId::Gsm8k => {
                "Think step by step. Solve the following math problem and give the final answer after \"####\".\n\nQuestion: {problem}\nAnswer:"
            }
            TemplateId::HumanEval => {
                "Think step by step. Complete the following Python function.\n\n{problem}"
            }
        };
        PromptTemplate {
            text: text.to_string(),
        }
    }

    /// A user-supplied template. It must contain the instruction before the
    /// single `{problem}` slot.
    pub fn custom(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let slot = match text
            .match_indices(PROBLEM_SLOT)
            .map(|(i, _)| i)
            .collect::<Vec<_>>()[..]
        {
            [i] => i,
            _ => {
                return Err(Error::InvalidArgument(
                    "template needs exactly one {problem} slot".into(),
                ))
            }
        };
        if !text[..slot].contains(THINK_PREFIX) {
            return Err(Error::InvalidArgument(format!(
                "template must contain {THINK_PREFIX:?} before the problem slot"
            )));
        }
        Ok(PromptTemplate { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOutput {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Wraps `prompt` in the template. Input that already carries the instruction
/// is returned as is.
pub fn think_prefix(prompt: &str, template: &PromptTemplate) -> PromptOutput {
    let mut warnings = Vec::new();
    if prompt.contains(THINK_PREFIX) {
        warnings.push(format!(
            "prompt already contains {THINK_PREFIX:?}; left unchanged"
        ));
        return PromptOutput {
            text: prompt.to_string(),
            warnings,
        };
    }
    if prompt.trim().is_empty() {
        warnings.push("empty prompt".to_string());
    }
    PromptOutput {
        text: template.text.replacen(PROBLEM_SLOT, prompt, 1),
        warnings,
    }
}
