//! Fixtures and reference arithmetic shared by the integration tests.
//!
//! Nothing here calls into the conversion code under test: float widening,
//! rounding and ULP distances are recomputed from the IEEE bit layouts.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecforge::tensorstore::{write_blocks, CheckpointHandle, DType, TensorBlock, WriteOptions};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps an f32 onto a line where adjacent floats differ by one.
fn ordered_f32(x: f32) -> i64 {
    let b = x.to_bits() as i32 as i64;
    if b < 0 {
        i32::MIN as i64 - b
    } else {
        b
    }
}

/// Number of representable F32 steps between `a` and `b` (`u64::MAX` for NaNs).
pub fn ulp_f32(a: f32, b: f32) -> u64 {
    if a.is_nan() || b.is_nan() {
        return if a.is_nan() && b.is_nan() {
            0
        } else {
            u64::MAX
        };
    }
    (ordered_f32(a) - ordered_f32(b)).unsigned_abs()
}

/// Same as [`ulp_f32`] for BF16 bit patterns.
pub fn ulp_bf16(a: u16, b: u16) -> u64 {
    ulp_f32(bf16_to_f32(a), bf16_to_f32(b))
}

pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

/// Round-to-nearest-even F32 → BF16 by comparing the two neighbouring BF16
/// values in f64 (exact for every F32 input). NaNs map to the quiet NaN with
/// the input's sign cleared.
pub fn bf16_reference(x: f32) -> u16 {
    if x.is_nan() {
        return 0x7FC0;
    }
    let bits = x.to_bits();
    let sign = (bits >> 16) as u16 & 0x8000;
    let mag = bits & 0x7FFF_FFFF;
    let low = (mag >> 16) as u16;
    if mag & 0xFFFF == 0 {
        return sign | low;
    }
    let high = low + 1;
    let value = |m: u16| -> f64 {
        if m == 0x7F80 {
            // The first value past the largest finite BF16: rounding overflows
            // to infinity exactly when the input reaches the midpoint to it.
            2f64.powi(128)
        } else {
            f64::from(bf16_to_f32(m))
        }
    };
    let target = f64::from(f32::from_bits(mag));
    let below = target - value(low);
    let above = value(high) - target;
    let chosen = if below < above {
        low
    } else if above < below {
        high
    } else if low.is_multiple_of(2) {
        low
    } else {
        high
    };
    sign | chosen
}

/// Random F32 weights in `[-scale, scale]`.
pub fn weights(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

pub fn encode(values: &[f32], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::BF16 => values
            .iter()
            .flat_map(|v| bf16_reference(*v).to_le_bytes())
            .collect(),
        other => panic!("test encoder does not handle {other}"),
    }
}

pub fn decode(block: &TensorBlock) -> Vec<f32> {
    match block.meta.dtype {
        DType::F32 => block
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::BF16 => block
            .data
            .chunks_exact(2)
            .map(|c| bf16_to_f32(u16::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => panic!("test decoder does not handle {other}"),
    }
}

pub fn raw_bf16(block: &TensorBlock) -> Vec<u16> {
    block
        .data
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn block(name: &str, dtype: DType, shape: &[u64], values: &[f32]) -> TensorBlock {
    TensorBlock::new(name, dtype, shape.to_vec(), encode(values, dtype)).unwrap()
}

/// Tensor names, dtypes and shapes of a small mixed-precision model.
pub fn mixed_layout() -> TensorLayout {
    vec![
        ("model.embed_tokens.weight", DType::BF16, vec![256, 128]),
        (
            "model.layers.0.mlp.down_proj.weight",
            DType::F32,
            vec![128, 256],
        ),
        (
            "model.layers.0.mlp.up_proj.weight",
            DType::BF16,
            vec![256, 128],
        ),
        (
            "model.layers.0.self_attn.q_proj.weight",
            DType::F32,
            vec![128, 128],
        ),
        ("model.norm.weight", DType::F32, vec![128]),
        ("lm_head.weight", DType::F32, vec![256, 64]),
    ]
}

pub fn f32_layout() -> TensorLayout {
    mixed_layout()
        .into_iter()
        .map(|(n, _, s)| (n, DType::F32, s))
        .collect()
}

/// Tensor name, dtype and shape.
pub type TensorLayout = Vec<(&'static str, DType, Vec<u64>)>;

/// Writes a checkpoint with the given layout, values drawn by `fill`.
pub fn write_model(
    dest: &Path,
    layout: &[(&str, DType, Vec<u64>)],
    mut fill: impl FnMut(&str, usize) -> Vec<f32>,
) -> CheckpointHandle {
    let blocks = layout
        .iter()
        .map(|(name, dtype, shape)| {
            let n = shape.iter().product::<u64>() as usize;
            block(name, *dtype, shape, &fill(name, n))
        })
        .collect();
    write_blocks(blocks, dest, &WriteOptions::default()).unwrap()
}

/// Values of `base` shifted by a small additive update, as a fine-tune would.
pub fn fine_tune(rng: &mut impl Rng, base: &[f32], step: f32) -> Vec<f32> {
    base.iter()
        .map(|b| b + rng.gen_range(-step..=step))
        .collect()
}

pub fn read_all(handle: &CheckpointHandle) -> Vec<TensorBlock> {
    handle
        .names()
        .map(|n| handle.read_tensor(n).unwrap())
        .collect()
}

/// Every maximal run of ASCII digits, in order.
pub fn digit_runs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_ascii_digit(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(&text[s..i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// True when `needle` occurs in `hay` in order, possibly with gaps.
pub fn is_subsequence<T: PartialEq>(needle: &[T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

const NAMES: [&str; 8] = ["Ali", "Maya", "Tom", "Priya", "Jon", "Lena", "Omar", "Sara"];
const ITEMS: [&str; 8] = [
    "apples", "marbles", "stickers", "books", "pencils", "cookies", "stamps", "shells",
];

/// A word problem with calculator markup whose every annotation is
/// consistent. The shapes cover addition, subtraction, multiplication and
/// exact division, with one or two reasoning steps.
pub fn word_problem(rng: &mut impl Rng) -> (String, String, String) {
    let name = NAMES[rng.gen_range(0..NAMES.len())];
    let item = ITEMS[rng.gen_range(0..ITEMS.len())];
    match rng.gen_range(0..4) {
        0 => {
            let (a, b) = (rng.gen_range(2..60), rng.gen_range(2..60));
            let s = a + b;
            (
                format!("{name} has {a} {item}. {name} buys {b} more. How many {item} does {name} have now?"),
                format!("{name} has {a}+{b}=<<{a}+{b}={s}>>{s} {item}."),
                s.to_string(),
            )
        }
        1 => {
            let (a, b) = (rng.gen_range(2..30), rng.gen_range(2..30));
            let c = rng.gen_range(1..a * b);
            let p = a * b;
            let r = p - c;
            (
                format!(
                    "A shop packs {b} {item} into each box. It fills {a} boxes. Then it sells {c} {item}. How many {item} are left?"
                ),
                format!("The boxes hold {a}*{b}=<<{a}*{b}={p}>>{p} {item}.\nAfter the sale {p}-{c}=<<{p}-{c}={r}>>{r} remain."),
                r.to_string(),
            )
        }
        2 => {
            let (k, q) = (rng.gen_range(2..12), rng.gen_range(2..40));
            let total = k * q;
            (
                format!("{name} shares {total} {item} equally among {k} friends! How many {item} does each friend get?"),
                format!("Each friend gets {total}/{k}=<<{total}/{k}={q}>>{q} {item}."),
                q.to_string(),
            )
        }
        _ => {
            let (a, b, c) = (
                rng.gen_range(10..90),
                rng.gen_range(2..9),
                rng.gen_range(2..9),
            );
            let s = a + b;
            let t = s * c;
            (
                format!(
                    "{name} collects {a} {item} in May. In June {name} finds {b} more {item}. A friend then gives {name} enough to multiply the pile by {c}. How many {item} does {name} own?"
                ),
                format!("First {a}+{b}=<<{a}+{b}={s}>>{s}.\nThen {s}*{c}=<<{s}*{c}={t}>>{t}."),
                t.to_string(),
            )
        }
    }
}
