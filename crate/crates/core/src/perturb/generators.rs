use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use num::rational::BigRational;
use num::BigInt;

use super::expr::{eval_annotation, operands, parse_decimal, render};
use super::rng::SplitMix64;
use super::{parse_annotations, PerturbConfig, ProblemRecord};

/// A record the generator declined to rewrite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    pub reason: String,
}

fn skip<T>(reason: impl Into<String>) -> Result<T, Skip> {
    Err(Skip {
        reason: reason.into(),
    })
}

/// Text split into sentences, keeping every separator so the original can be
/// rebuilt byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentences {
    pub leading: String,
    /// `(sentence, whitespace after it)`.
    pub parts: Vec<(String, String)>,
}

impl Sentences {
    pub fn join(&self) -> String {
        let mut out = self.leading.clone();
        for (s, ws) in &self.parts {
            out.push_str(s);
            out.push_str(ws);
        }
        out
    }
}

/// Splits after `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Sentences {
    let body = text.trim_start();
    let leading = text[..text.len() - body.len()].to_string();
    let mut parts = Vec::new();
    let mut start = 0;
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let ends =
            matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|(_, n)| n.is_whitespace());
        if !ends {
            continue;
        }
        let sentence_end = i + c.len_utf8();
        let mut ws_end = sentence_end;
        while let Some(&(j, n)) = chars.peek() {
            if !n.is_whitespace() {
                break;
            }
            ws_end = j + n.len_utf8();
            chars.next();
        }
        parts.push((
            body[start..sentence_end].to_string(),
            body[sentence_end..ws_end].to_string(),
        ));
        start = ws_end;
    }
    if start < body.len() {
        let rest = &body[start..];
        let trimmed = rest.trim_end();
        parts.push((trimmed.to_string(), rest[trimmed.len()..].to_string()));
    }
    Sentences { leading, parts }
}

/// Permutes the body sentences of the question; the final sentence stays last.
pub fn sentence_shuffle(record: &ProblemRecord, config: &PerturbConfig) -> ProblemRecord {
    let mut split = split_sentences(&record.question);
    let n = split.parts.len();
    // Fewer than two body sentences leaves nothing to permute.
    if n < 3 {
        return record.clone();
    }
    let mut order: Vec<usize> = (0..n - 1).collect();
    SplitMix64::new(config.seed).shuffle(&mut order);
    let originals: Vec<String> = split.parts.iter().map(|p| p.0.clone()).collect();
    for (slot, &from) in order.iter().enumerate() {
        split.parts[slot].0 = originals[from].clone();
    }
    ProblemRecord {
        question: split.join(),
        ..record.clone()
    }
}

/// A maximal number in running text: digits with optional thousands commas
/// and a decimal part, not glued to letters or other digits.
fn number_spans(text: &str) -> Vec<(Range<usize>, BigRational)> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit()
            || (i > 0 && (b[i - 1].is_ascii_alphanumeric() || b[i - 1] == b'.'))
        {
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        // ",ddd" groups and one ".d+" tail
        while i + 3 < b.len()
            && b[i] == b','
            && b[i + 1..i + 4].iter().all(u8::is_ascii_digit)
            && !b.get(i + 4).is_some_and(u8::is_ascii_digit)
        {
            i += 4;
        }
        if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        if b.get(i).is_some_and(|c| c.is_ascii_alphanumeric()) {
            // ordinals and unit-glued tokens such as "4th" or "3x" are left alone
            while i < b.len() && b[i].is_ascii_alphanumeric() {
                i += 1;
            }
            continue;
        }
        let value = parse_decimal(&text[start..i]).expect("span holds a well-formed decimal");
        out.push((start..i, value));
    }
    out
}

fn replace_spans(text: &str, edits: &[(Range<usize>, String)]) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    let mut at = 0;
    for (span, with) in edits {
        out.push_str(&text[at..span.start]);
        out.push_str(with);
        at = span.end;
    }
    out.push_str(&text[at..]);
    out
}

/// Multiplies every annotation operand found in the question by the scale
/// factor and recomputes the annotation chain and the final answer.
///
/// Operands that equal an earlier annotation's result follow that result;
/// operands found nowhere are constants and keep their value. A question
/// match wins when both apply.
pub fn hard_lite(record: &ProblemRecord, config: &PerturbConfig) -> Result<ProblemRecord, Skip> {
    if config.scale_factor == 1 {
        return Ok(record.clone());
    }
    let k = BigRational::from_integer(BigInt::from(config.scale_factor));
    let annotations = parse_annotations(&record.solution);
    if annotations.is_empty() {
        return skip("no calculator annotations");
    }
    let question_numbers = number_spans(&record.question);
    let in_question: BTreeSet<&BigRational> = question_numbers.iter().map(|(_, v)| v).collect();

    let mut scaled_values: BTreeSet<BigRational> = BTreeSet::new();
    let mut result_map: BTreeMap<BigRational, BigRational> = BTreeMap::new();
    let mut solution_edits = Vec::new();
    for (i, ann) in annotations.iter().enumerate() {
        let original = match eval_annotation(&ann.expression) {
            Ok(v) => v,
            Err(e) => return skip(format!("annotation {i}: {e}")),
        };
        if parse_decimal(&ann.result).as_ref() != Some(&original.value) {
            return skip(format!(
                "annotation {i}: stored result {:?} disagrees with {original}",
                ann.result
            ));
        }
        let ops = operands(&ann.expression).map_err(|e| Skip {
            reason: format!("annotation {i}: {e}"),
        })?;
        let mut expr_edits = Vec::new();
        for op in ops {
            let new = if in_question.contains(&op.value) {
                scaled_values.insert(op.value.clone());
                &op.value * &k
            } else if let Some(v) = result_map.get(&op.value) {
                v.clone()
            } else {
                continue;
            };
            expr_edits.push((op.span, render(&new)));
        }
        let expression = replace_spans(&ann.expression, &expr_edits);
        let new = eval_annotation(&expression).map_err(|e| Skip {
            reason: format!("annotation {i}: {e}"),
        })?;
        if !new.terminating {
            return skip(format!(
                "annotation {i}: {expression} = {new} does not terminate"
            ));
        }
        if original.is_integer() && !new.is_integer() {
            return skip(format!("annotation {i}: integer result became {new}"));
        }
        let result = new.to_string();
        solution_edits.push((ann.span.clone(), format!("<<{expression}={result}>>")));
        // The visible copy of the result that usually follows the markup.
        let tail = &record.solution[ann.span.end..];
        if tail.starts_with(ann.result.as_str())
            && !tail[ann.result.len()..].starts_with(|c: char| c.is_ascii_digit())
        {
            solution_edits.push((
                ann.span.end..ann.span.end + ann.result.len(),
                result.clone(),
            ));
        }
        result_map.insert(original.value, new.value);
    }
    if scaled_values.is_empty() {
        return skip("no annotation operand appears in the question");
    }

    let Some(answer) = parse_decimal(&record.answer) else {
        return skip(format!(
            "answer {:?} is not a decimal number",
            record.answer
        ));
    };
    let new_answer = if let Some(v) = result_map.get(&answer) {
        v.clone()
    } else if scaled_values.contains(&answer) {
        &answer * &k
    } else {
        return skip("answer is not produced by any annotation");
    };

    let question_edits: Vec<_> = question_numbers
        .iter()
        .filter(|(_, v)| scaled_values.contains(v))
        .map(|(span, v)| (span.clone(), render(&(v * &k))))
        .collect();
    let solution = replace_spans(&record.solution, &solution_edits);
    Ok(ProblemRecord {
        question: replace_spans(&record.question, &question_edits),
        answer: render(&new_answer),
        annotations: parse_annotations(&solution),
        solution,
        extra: record.extra.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Noise {
    Distractor,
    Typo,
    Punctuation,
}

const PUNCTUATION: [&str; 5] = [",", ";", ":", "!", "..."];

fn typo_eligible(w: &str) -> bool {
    w.len() >= 4 && w.bytes().all(|b| b.is_ascii_alphabetic())
}

fn punct_eligible(w: &str) -> bool {
    !w.bytes().any(|b| b.is_ascii_digit())
        && w.bytes().last().is_some_and(|b| b.is_ascii_alphabetic())
}

fn make_typo(word: &str, rng: &mut SplitMix64) -> String {
    let mut c: Vec<u8> = word.bytes().collect();
    match rng.below(3) {
        0 => {
            let swappable: Vec<usize> = (1..c.len() - 2).filter(|&p| c[p] != c[p + 1]).collect();
            if swappable.is_empty() {
                let p = rng.index(c.len());
                c.insert(p, c[p]);
            } else {
                let p = swappable[rng.index(swappable.len())];
                c.swap(p, p + 1);
            }
        }
        1 => {
            let p = 1 + rng.index(c.len() - 2);
            c.remove(p);
        }
        _ => {
            let p = rng.index(c.len());
            c.insert(p, c[p]);
        }
    }
    String::from_utf8(c).expect("ASCII letters stay ASCII")
}

/// Adds `round(intensity × sentences)` noise operations to the question.
///
/// Existing tokens that contain digits are never edited and insertions happen
/// only between whitespace-separated tokens, so every number already in the
/// text survives byte for byte. Distractor numbers are only used when the
/// question already contains digits.
pub fn noise_digit(record: &ProblemRecord, config: &PerturbConfig) -> ProblemRecord {
    let sentences = split_sentences(&record.question).parts.len();
    let count = (config.intensity * sentences as f64).round() as usize;
    if count == 0 {
        return record.clone();
    }
    let body = record.question.trim_start();
    let leading = &record.question[..record.question.len() - body.len()];
    let mut words: Vec<(String, String)> = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let (word, tail) = rest.split_at(end);
        let ws_len = tail.len() - tail.trim_start().len();
        words.push((word.to_string(), tail[..ws_len].to_string()));
        rest = &tail[ws_len..];
    }
    let has_digits = record.question.bytes().any(|b| b.is_ascii_digit());
    let mut rng = SplitMix64::new(config.seed);
    for _ in 0..count {
        let typo: Vec<usize> = (0..words.len())
            .filter(|&i| typo_eligible(&words[i].0))
            .collect();
        let punct: Vec<usize> = (0..words.len())
            .filter(|&i| punct_eligible(&words[i].0))
            .collect();
        let mut kinds = Vec::with_capacity(3);
        if has_digits && words.len() >= 2 {
            kinds.push(Noise::Distractor);
        }
        if !typo.is_empty() {
            kinds.push(Noise::Typo);
        }
        if !punct.is_empty() {
            kinds.push(Noise::Punctuation);
        }
        if kinds.is_empty() {
            break;
        }
        match kinds[rng.index(kinds.len())] {
            Noise::Distractor => {
                let gap = 1 + rng.index(words.len() - 1);
                let number = 2 + rng.below(98);
                words.insert(gap, (number.to_string(), " ".to_string()));
            }
            Noise::Typo => {
                let i = typo[rng.index(typo.len())];
                words[i].0 = make_typo(&words[i].0, &mut rng);
            }
            Noise::Punctuation => {
                let i = punct[rng.index(punct.len())];
                words[i]
                    .0
                    .push_str(PUNCTUATION[rng.index(PUNCTUATION.len())]);
            }
        }
    }
    let mut question = leading.to_string();
    for (w, ws) in &words {
        question.push_str(w);
        question.push_str(ws);
    }
    ProblemRecord {
        question,
        ..record.clone()
    }
}
