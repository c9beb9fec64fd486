//! Seeded perturbations of annotated math word problems, and prompt templates.
//!
//! Records carry calculator markup `<<expr=result>>` in their solutions.
//! Three generators rewrite a record: `hard_lite` scales the magnitudes of
//! question numbers and recomputes every annotation, `noise_digit` adds
//! distractor tokens, typos and punctuation without touching existing numbers,
//! and `sentence_shuffle` permutes body sentences while keeping the question
//! sentence last. All randomness comes from [`SplitMix64`].

mod expr;
mod generators;
mod prompt;
mod rng;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use expr::{eval_annotation, operands, parse_decimal, render, Evaluated, ExprError, Operand};
pub use generators::{hard_lite, noise_digit, sentence_shuffle, split_sentences, Sentences, Skip};
pub use prompt::{think_prefix, PromptOutput, PromptTemplate, TemplateId, THINK_PREFIX};
pub use rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub expression: String,
    pub result: String,
    /// Byte range of the whole `<<…>>` markup within the solution.
    pub span: Range<usize>,
}

impl Annotation {
    /// True when the stored result equals the exact value of the expression.
    pub fn is_consistent(&self) -> bool {
        match (
            eval_annotation(&self.expression),
            parse_decimal(&self.result),
        ) {
            (Ok(e), Some(r)) => e.value == r,
            (Ok(e), None) => !e.terminating && e.to_string() == self.result.trim(),
            _ => false,
        }
    }
}

/// Extracts `<<expr=result>>` markup in order of appearance.
pub fn parse_annotations(solution: &str) -> Vec<Annotation> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(open) = solution[from..].find("<<").map(|i| i + from) {
        let Some(close) = solution[open + 2..].find(">>").map(|i| i + open + 2) else {
            break;
        };
        let body = &solution[open + 2..close];
        if let Some((expr, result)) = body.rsplit_once('=') {
            out.push(Annotation {
                expression: expr.to_string(),
                result: result.to_string(),
                span: open..close + 2,
            });
        }
        from = close + 2;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RecordWire", into = "RecordWire")]
pub struct ProblemRecord {
    pub question: String,
    /// Final answer as a decimal string.
    pub answer: String,
    pub solution: String,
    pub annotations: Vec<Annotation>,
    /// Fields passed through untouched.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solution: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl From<RecordWire> for ProblemRecord {
    fn from(w: RecordWire) -> Self {
        // The original dataset packs the worked solution into `answer`,
        // terminated by "#### <final answer>".
        let (solution, answer) = match w.solution {
            Some(s) => (s, w.answer),
            None => match w.answer.rsplit_once("####") {
                Some((sol, ans)) => (sol.trim_end().to_string(), ans.trim().to_string()),
                None => (String::new(), w.answer),
            },
        };
        let mut r = ProblemRecord::new(w.question, answer, solution);
        r.extra = w.extra;
        r
    }
}

impl From<ProblemRecord> for RecordWire {
    fn from(r: ProblemRecord) -> Self {
        RecordWire {
            question: r.question,
            answer: r.answer,
            solution: Some(r.solution),
            extra: r.extra,
        }
    }
}

impl ProblemRecord {
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        solution: impl Into<String>,
    ) -> Self {
        let solution = solution.into();
        ProblemRecord {
            question: question.into(),
            answer: answer.into(),
            annotations: parse_annotations(&solution),
            solution,
            extra: BTreeMap::new(),
        }
    }

    /// Indices of annotations whose stored result disagrees with the expression.
    pub fn inconsistent_annotations(&self) -> Vec<usize> {
        (0..self.annotations.len())
            .filter(|&i| !self.annotations[i].is_consistent())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub seed: u64,
    /// Noise density in `[0, 1]`: operations per sentence.
    pub intensity: f64,
    /// Magnitude multiplier for `hard_lite`.
    pub scale_factor: u32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            seed: 0,
            intensity: 0.5,
            scale_factor: 10,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::InvalidArgument(format!(
                "intensity {} is outside [0, 1]",
                self.intensity
            )));
        }
        if self.scale_factor == 0 {
            return Err(Error::InvalidArgument(
                "scale_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Config for the record at `index` of a dataset.
    pub fn for_record(&self, index: u64) -> PerturbConfig {
        PerturbConfig {
            seed: self.seed ^ index,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    HardLite,
    NoiseDigit,
    SentenceShuffle,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::HardLite => "hard_lite",
            Perturbation::NoiseDigit => "noise_digit",
            Perturbation::SentenceShuffle => "sentence_shuffle",
        }
    }

    pub fn apply(
        self,
        record: &ProblemRecord,
        config: &PerturbConfig,
    ) -> Result<ProblemRecord, Skip> {
        match self {
            Perturbation::HardLite => hard_lite(record, config),
            Perturbation::NoiseDigit => Ok(noise_digit(record, config)),
            Perturbation::SentenceShuffle => Ok(sentence_shuffle(record, config)),
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "hard_lite" => Ok(Perturbation::HardLite),
            "noise_digit" => Ok(Perturbation::NoiseDigit),
            "sentence_shuffle" => Ok(Perturbation::SentenceShuffle),
            _ => Err(Error::InvalidArgument(format!(
                "unknown perturbation {s:?}"
            ))),
        }
    }
}

/// A perturbed record as written to the output stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbedRecord {
    #[serde(flatten)]
    pub record: ProblemRecord,
    pub perturbation: Perturbation,
    pub seed: u64,
    pub config: PerturbConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkipEntry {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetOutput {
    pub records: Vec<PerturbedRecord>,
    pub skipped: Vec<SkipEntry>,
}

/// Perturbs every record with a per-record seed of `seed ^ index`. Output
/// order follows input order.
pub fn perturb_dataset(
    records: &[ProblemRecord],
    kind: Perturbation,
    config: &PerturbConfig,
) -> Result<DatasetOutput> {
    config.validate()?;
    let results: Vec<_> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let cfg = config.for_record(i as u64);
            kind.apply(r, &cfg).map(|record| PerturbedRecord {
                record,
                perturbation: kind,
                seed: cfg.seed,
                config: *config,
            })
        })
        .collect();
    let mut out = DatasetOutput::default();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(skip) => out.skipped.push(SkipEntry {
                index,
                reason: skip.reason,
            }),
        }
    }
    Ok(out)
}

/// Reads line-delimited JSON records, ignoring blank lines.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<ProblemRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("record on line {}", n + 1), e))?,
        );
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::json("output record", e))?);
        out.push('\n');
    }
    Ok(out)
}
