//! Exact evaluation of calculator annotations.
//!
//! Grammar, with the usual precedence and left associativity:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('+' | '-') unary | atom
//! atom   := number | '(' expr ')'
//! number := digits ('.' digits)?
//! ```
//!
//! `×`, `x`, `÷` and `−` are accepted as operator spellings.

use std::fmt;
use std::ops::Range;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("division by zero at byte {pos}")]
    DivisionByZero { pos: usize },
}

/// An exact value together with its rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluated {
    pub value: BigRational,
    /// False when the decimal expansion repeats; the rendering is then a
    /// reduced fraction.
    pub terminating: bool,
}

impl Evaluated {
    pub fn new(value: BigRational) -> Self {
        let terminating = is_terminating(&value);
        Evaluated { value, terminating }
    }

    pub fn is_integer(&self) -> bool {
        self.value.is_integer()
    }
}

impl fmt::Display for Evaluated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.value))
    }
}

/// A numeric literal inside an expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operand {
    pub span: Range<usize>,
    pub text: String,
    pub value: BigRational,
}

fn strip_factor(mut n: BigInt, p: u32) -> (BigInt, u32) {
    let p = BigInt::from(p);
    let mut k = 0;
    while (&n % &p).is_zero() {
        n /= &p;
        k += 1;
    }
    (n, k)
}

fn is_terminating(v: &BigRational) -> bool {
    let (rest, _) = strip_factor(v.denom().clone(), 2);
    let (rest, _) = strip_factor(rest, 5);
    rest.is_one()
}

/// Shortest exact decimal for terminating values, `p/q` otherwise.
pub fn render(v: &BigRational) -> String {
    if v.is_integer() {
        return v.numer().to_string();
    }
    let den = v.denom().clone();
    let (rest, twos) = strip_factor(den.clone(), 2);
    let (rest, fives) = strip_factor(rest, 5);
    if !rest.is_one() {
        return format!("{}/{}", v.numer(), den);
    }
    let places = twos.max(fives);
    let scaled = v.numer().abs() * num::pow(BigInt::from(10), places as usize) / &den;
    let digits = format!(
        "{:0>width$}",
        scaled.to_string(),
        width = places as usize + 1
    );
    let (int, frac) = digits.split_at(digits.len() - places as usize);
    let sign = if v.is_negative() { "-" } else { "" };
    format!("{sign}{int}.{}", frac.trim_end_matches('0'))
}

/// Parses a plain decimal such as `-12.50` or `1,000` into an exact value.
pub fn parse_decimal(text: &str) -> Option<BigRational> {
    let t = text.trim().replace(',', "");
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(&t)),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("{int}{frac}").parse().ok()?;
    let value = BigRational::new(digits, num::pow(BigInt::from(10), frac.len()));
    Some(if neg { -value } else { value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Num,
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, Range<usize>)>, ExprError> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let tok = match c {
            c if c.is_whitespace() => continue,
            '0'..='9' | '.' => {
                let mut end = i + 1;
                let mut seen_dot = c == '.';
                while let Some(&(j, d)) = chars.peek() {
                    if d.is_ascii_digit() || (d == '.' && !seen_dot) {
                        seen_dot |= d == '.';
                        end = j + 1;
                        chars.next();
                    } else {
                        break;
                    }
                }
                let text = &src[i..end];
                if text == "." || text.ends_with('.') {
                    return Err(ExprError::Parse {
                        pos: i,
                        message: format!("malformed number {text:?}"),
                    });
                }
                out.push((Tok::Num, i..end));
                continue;
            }
            '+' => Tok::Plus,
            '-' | '−' => Tok::Minus,
            '*' | '×' | 'x' | 'X' => Tok::Star,
            '/' | '÷' => Tok::Slash,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            other => {
                return Err(ExprError::Parse {
                    pos: i,
                    message: format!("unexpected character {other:?}"),
                })
            }
        };
        out.push((tok, i..i + c.len_utf8()));
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, Range<usize>)>,
    at: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.at).map(|t| t.0)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.src.len(), |t| t.1.start)
    }

    fn expr(&mut self) -> Result<BigRational, ExprError> {
        let mut acc = self.term()?;
        while let Some(op @ (Tok::Plus | Tok::Minus)) = self.peek() {
            self.at += 1;
            let rhs = self.term()?;
            acc = if op == Tok::Plus {
                acc + rhs
            } else {
                acc - rhs
            };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<BigRational, ExprError> {
        let mut acc = self.unary()?;
        while let Some(op @ (Tok::Star | Tok::Slash)) = self.peek() {
            let pos = self.pos();
            self.at += 1;
            let rhs = self.unary()?;
            acc = if op == Tok::Star {
                acc * rhs
            } else if rhs.is_zero() {
                return Err(ExprError::DivisionByZero { pos });
            } else {
                acc / rhs
            };
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<BigRational, ExprError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.at += 1;
                Ok(-self.unary()?)
            }
            Some(Tok::Plus) => {
                self.at += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<BigRational, ExprError> {
        let pos = self.pos();
        match self.toks.get(self.at).cloned() {
            Some((Tok::Num, span)) => {
                self.at += 1;
                Ok(parse_decimal(&self.src[span]).expect("lexer only emits well-formed numbers"))
            }
            Some((Tok::LParen, _)) => {
                self.at += 1;
                let v = self.expr()?;
                if self.peek() != Some(Tok::RParen) {
                    return Err(ExprError::Parse {
                        pos: self.pos(),
                        message: "expected ')'".into(),
                    });
                }
                self.at += 1;
                Ok(v)
            }
            Some(_) => Err(ExprError::Parse {
                pos,
                message: "expected a number or '('".into(),
            }),
            None => Err(ExprError::Parse {
                pos,
                message: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Evaluates an annotation expression exactly.
pub fn eval_annotation(expr: &str) -> Result<Evaluated, ExprError> {
    let toks = lex(expr)?;
    let mut p = Parser {
        src: expr,
        toks,
        at: 0,
    };
    let value = p.expr()?;
    if p.at != p.toks.len() {
        return Err(ExprError::Parse {
            pos: p.pos(),
            message: "unexpected trailing input".into(),
        });
    }
    Ok(Evaluated::new(value))
}

/// Numeric literals of an expression in source order.
pub fn operands(expr: &str) -> Result<Vec<Operand>, ExprError> {
    Ok(lex(expr)?
        .into_iter()
        .filter(|(t, _)| *t == Tok::Num)
        .map(|(_, span)| {
            let text = expr[span.clone()].to_string();
            let value = parse_decimal(&text).expect("lexer only emits well-formed numbers");
            Operand { span, text, value }
        })
        .collect())
}
