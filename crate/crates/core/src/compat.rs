//! Compatibility checks run before any tensor arithmetic.
//!
//! Two checkpoints are compatible when they declare the same tensor names with
//! the same shapes and dtypes. Tokenizers are compatible when their
//! token → id maps are identical. Every finding is recorded; nothing stops at
//! the first mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{CheckpointHandle, Layout, TensorLayout};

/// How many differing tokens a tokenizer report keeps.
pub const TOKEN_DIFF_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchKind {
    MissingInA,
    MissingInB,
    Shape,
    Dtype,
    TokenId,
}

impl MismatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MismatchKind::MissingInA => "missing-in-a",
            MismatchKind::MissingInB => "missing-in-b",
            MismatchKind::Shape => "shape",
            MismatchKind::Dtype => "dtype",
            MismatchKind::TokenId => "token-id",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub name: String,
    pub kind: MismatchKind,
    pub details: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Compatible,
    Incompatible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub ok: bool,
    /// At most [`TOKEN_DIFF_LIMIT`] entries, in token order.
    pub differing: Vec<Mismatch>,
    pub total_differences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub architecture_ok: bool,
    pub dtype_ok: bool,
    pub nameset_ok: bool,
    pub tokenizer_ok: Option<bool>,
    pub mismatches: Vec<Mismatch>,
    /// Findings downgraded by policy; they do not affect the verdict.
    pub warnings: Vec<Mismatch>,
    pub tokenizer: Option<TokenizerReport>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompatPolicy {
    /// Dtype differences become warnings; arithmetic runs in F32.
    pub allow_dtype_mismatch: bool,
    /// One-sided tensors matching an `ignore` pattern become warnings.
    pub allow_extra: bool,
    pub ignore: Vec<String>,
    /// One-sided integer/bool tensors become warnings (they are copied, never combined).
    pub copy_through_non_float: bool,
}

impl CompatPolicy {
    pub fn is_ignored(&self, name: &str) -> bool {
        self.ignore
            .iter()
            .filter_map(|p| glob::Pattern::new(p).ok())
            .any(|p| p.matches(name))
    }

    /// Tensors that are left out of vectors and copied through from the target.
    pub fn excludes(&self, name: &str) -> bool {
        self.allow_extra && self.is_ignored(name)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.ignore {
            glob::Pattern::new(p)
                .map_err(|e| Error::InvalidArgument(format!("bad ignore pattern {p:?}: {e}")))?;
        }
        Ok(())
    }
}

fn shape_str(shape: &[u64]) -> String {
    format!("{shape:?}")
}

fn one_sided_finding(
    name: &str,
    present: &TensorLayout,
    kind: MismatchKind,
    policy: &CompatPolicy,
) -> (Mismatch, bool) {
    let side = if kind == MismatchKind::MissingInA {
        "b"
    } else {
        "a"
    };
    let m = Mismatch {
        name: name.to_string(),
        kind,
        details: format!(
            "{} {} present only in {side}",
            present.dtype,
            shape_str(&present.shape)
        ),
    };
    let tolerated =
        policy.excludes(name) || (policy.copy_through_non_float && !present.dtype.is_float());
    (m, tolerated)
}

/// Compares two tensor layouts under `policy`.
pub fn validate_layouts(a: &Layout, b: &Layout, policy: &CompatPolicy) -> CompatReport {
    let mut mismatches = Vec::new();
    let mut warnings = Vec::new();
    let (mut nameset_ok, mut architecture_ok, mut dtype_ok) = (true, true, true);

    let mut one_sided = |name: &str, present: &TensorLayout, kind: MismatchKind| {
        let (m, tolerated) = one_sided_finding(name, present, kind, policy);
        if tolerated {
            warnings.push(m);
        } else {
            nameset_ok = false;
            mismatches.push(m);
        }
    };
    let mut paired = Vec::new();

    // Merge-walk both sorted maps so entries come out in name order.
    let mut ia = a.iter().peekable();
    let mut ib = b.iter().peekable();
    loop {
        match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some((na, la)), None) => {
                one_sided(na, la, MismatchKind::MissingInB);
                ia.next();
            }
            (None, Some((nb, lb))) => {
                one_sided(nb, lb, MismatchKind::MissingInA);
                ib.next();
            }
            (Some((na, la)), Some((nb, lb))) => match na.cmp(nb) {
                std::cmp::Ordering::Less => {
                    one_sided(na, la, MismatchKind::MissingInB);
                    ia.next();
                }
                std::cmp::Ordering::Greater => {
                    one_sided(nb, lb, MismatchKind::MissingInA);
                    ib.next();
                }
                std::cmp::Ordering::Equal => {
                    paired.push((*na, *la, *lb));
                    ia.next();
                    ib.next();
                }
            },
        }
    }

    for (name, la, lb) in paired {
        if la.shape != lb.shape {
            architecture_ok = false;
            mismatches.push(Mismatch {
                name: name.to_string(),
                kind: MismatchKind::Shape,
                details: format!("{} vs {}", shape_str(&la.shape), shape_str(&lb.shape)),
            });
        }
        if la.dtype != lb.dtype {
            let m = Mismatch {
                name: name.to_string(),
                kind: MismatchKind::Dtype,
                details: format!("{} vs {}", la.dtype, lb.dtype),
            };
            if policy.allow_dtype_mismatch {
                warnings.push(m);
            } else {
                dtype_ok = false;
                mismatches.push(m);
            }
        }
    }
    mismatches.sort_by(|x, y| x.name.cmp(&y.name).then(x.kind.cmp(&y.kind)));
    warnings.sort_by(|x, y| x.name.cmp(&y.name).then(x.kind.cmp(&y.kind)));

    let verdict = if mismatches.is_empty() {
        Verdict::Compatible
    } else {
        Verdict::Incompatible
    };
    CompatReport {
        architecture_ok,
        dtype_ok,
        nameset_ok,
        tokenizer_ok: None,
        mismatches,
        warnings,
        tokenizer: None,
        verdict,
    }
}

pub fn validate_pair(
    a: &CheckpointHandle,
    b: &CheckpointHandle,
    policy: &CompatPolicy,
) -> CompatReport {
    validate_layouts(&a.layout(), &b.layout(), policy)
}

pub type Vocab = BTreeMap<String, u64>;

/// Compares two token → id maps. Keeps the first [`TOKEN_DIFF_LIMIT`]
/// differing tokens and the full count.
pub fn validate_tokenizer(vocab_a: &Vocab, vocab_b: &Vocab) -> TokenizerReport {
    let mut differing = Vec::new();
    let mut total = 0usize;
    let mut push = |m: Mismatch| {
        total += 1;
        if differing.len() < TOKEN_DIFF_LIMIT {
            differing.push(m);
        }
    };
    let mut ia = vocab_a.iter().peekable();
    let mut ib = vocab_b.iter().peekable();
    loop {
        let ord = match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (Some((ta, _)), Some((tb, _))) => ta.cmp(tb),
        };
        match ord {
            std::cmp::Ordering::Less => {
                let (t, id) = ia.next().unwrap();
                push(Mismatch {
                    name: t.clone(),
                    kind: MismatchKind::MissingInB,
                    details: format!("id {id} only in a"),
                });
            }
            std::cmp::Ordering::Greater => {
                let (t, id) = ib.next().unwrap();
                push(Mismatch {
                    name: t.clone(),
                    kind: MismatchKind::MissingInA,
                    details: format!("id {id} only in b"),
                });
            }
            std::cmp::Ordering::Equal => {
                let (t, id_a) = ia.next().unwrap();
                let (_, id_b) = ib.next().unwrap();
                if id_a != id_b {
                    push(Mismatch {
                        name: t.clone(),
                        kind: MismatchKind::TokenId,
                        details: format!("{id_a} vs {id_b}"),
                    });
                }
            }
        }
    }
    TokenizerReport {
        ok: total == 0,
        differing,
        total_differences: total,
    }
}

/// Reads a vocabulary from either a plain `{token: id}` JSON object or the
/// `model.vocab` section of a combined tokenizer document. Array-form vocabs
/// (`[[token, score], ...]`) take ids from their positions.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    parse_vocab(&doc).map_err(|reason| Error::format(path, reason))
}

pub fn parse_vocab(doc: &serde_json::Value) -> std::result::Result<Vocab, String> {
    use serde_json::Value;
    let section = match doc.get("model").and_then(|m| m.get("vocab")) {
        Some(v) => v,
        None => doc,
    };
    match section {
        Value::Object(map) => map
            .iter()
            .map(|(tok, id)| {
                id.as_u64()
                    .map(|id| (tok.clone(), id))
                    .ok_or_else(|| format!("token {tok:?} has non-integer id {id}"))
            })
            .collect(),
        Value::Array(items) => {
            let mut vocab = Vocab::new();
            for (i, item) in items.iter().enumerate() {
                let tok = item
                    .get(0)
                    .and_then(Value::as_str)
                    .or_else(|| item.as_str())
                    .ok_or_else(|| format!("vocab entry {i} is not a token"))?;
                if vocab.insert(tok.to_string(), i as u64).is_some() {
                    return Err(format!("duplicate token {tok:?}"));
                }
            }
            Ok(vocab)
        }
        _ => {
            Err("vocabulary must be a JSON object or a tokenizer document with model.vocab".into())
        }
    }
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.verdict == Verdict::Compatible
    }

    /// Folds a tokenizer comparison into this report.
    pub fn with_tokenizer(mut self, tok: TokenizerReport) -> Self {
        self.tokenizer_ok = Some(tok.ok);
        if !tok.ok {
            self.verdict = Verdict::Incompatible;
        }
        self.tokenizer = Some(tok);
        self
    }

    pub fn count_by_kind(&self) -> BTreeMap<MismatchKind, usize> {
        let mut counts = BTreeMap::new();
        for m in &self.mismatches {
            *counts.entry(m.kind).or_insert(0) += 1;
        }
        // Token differences beyond the kept list are only counted in total_differences.
        for m in self.tokenizer.iter().flat_map(|t| &t.differing) {
            *counts.entry(m.kind).or_insert(0) += 1;
        }
        counts
    }

    pub fn summary(&self) -> String {
        if self.is_compatible() {
            return format!("compatible ({} warnings)", self.warnings.len());
        }
        let kinds: Vec<String> = self
            .count_by_kind()
            .iter()
            .map(|(k, n)| format!("{}: {n}", k.as_str()))
            .collect();
        let token_total = self.tokenizer.as_ref().map_or(0, |t| t.total_differences);
        format!(
            "{} tensor mismatches, {token_total} token differences ({})",
            self.mismatches.len(),
            kinds.join(", ")
        )
    }

    /// Human-readable table showing at most `limit` rows per section.
    pub fn render_table(&self, limit: usize) -> String {
        let mut out = String::new();
        let verdict = if self.is_compatible() {
            "compatible"
        } else {
            "incompatible"
        };
        let _ = writeln!(out, "verdict: {verdict}");
        let _ = writeln!(
            out,
            "nameset: {}  architecture: {}  dtype: {}  tokenizer: {}",
            ok_str(self.nameset_ok),
            ok_str(self.architecture_ok),
            ok_str(self.dtype_ok),
            self.tokenizer_ok.map_or("not checked", ok_str)
        );
        let mut section = |title: &str, rows: &[Mismatch], total: usize| {
            if rows.is_empty() {
                return;
            }
            let _ = writeln!(out, "{title} ({total}):");
            let width = rows
                .iter()
                .take(limit)
                .map(|m| m.kind.as_str().len())
                .max()
                .unwrap_or(0);
            for m in rows.iter().take(limit) {
                let _ = writeln!(
                    out,
                    "  {:<width$}  {}  {}",
                    m.kind.as_str(),
                    m.name,
                    m.details
                );
            }
            if total > limit.min(rows.len()) {
                let _ = writeln!(out, "  ... and {} more", total - limit.min(rows.len()));
            }
        };
        section("mismatches", &self.mismatches, self.mismatches.len());
        section("warnings", &self.warnings, self.warnings.len());
        if let Some(tok) = &self.tokenizer {
            section("token differences", &tok.differing, tok.total_differences);
        }
        out
    }
}

fn ok_str(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISMATCH"
    }
}
