//! Chunked elementwise kernels over raw tensor bytes.
//!
//! Each kernel decodes fixed-size chunks into F32 scratch space on the stack,
//! combines them, and encodes the result, so transient memory stays at the
//! input and output buffers themselves. Chunks run on the current rayon pool;
//! every element is computed independently, so the worker count never changes
//! the result.

use rayon::prelude::*;

use crate::error::Result;
use crate::tensorstore::{decode_f32_into, encode_f32_into, DType};

pub(crate) const CHUNK: usize = 4096;

/// `out = f(a, b)` elementwise, allocating the output buffer.
pub(crate) fn zip_map<F>(
    a: &[u8],
    da: DType,
    b: &[u8],
    db: DType,
    dout: DType,
    f: F,
) -> Result<Vec<u8>>
where
    F: Fn(f32, f32) -> f32 + Sync,
{
    let n = a.len() / da.width();
    debug_assert_eq!(b.len() / db.width(), n);
    let mut out = vec![0u8; n * dout.width()];
    out.par_chunks_mut(CHUNK * dout.width())
        .enumerate()
        .try_for_each(|(ci, oc)| -> Result<()> {
            let start = ci * CHUNK;
            let len = oc.len() / dout.width();
            let mut xa = [0f32; CHUNK];
            let mut xb = [0f32; CHUNK];
            decode_f32_into(
                &a[start * da.width()..(start + len) * da.width()],
                da,
                &mut xa[..len],
            )?;
            decode_f32_into(
                &b[start * db.width()..(start + len) * db.width()],
                db,
                &mut xb[..len],
            )?;
            for (x, y) in xa[..len].iter_mut().zip(&xb[..len]) {
                *x = f(*x, *y);
            }
            encode_f32_into(&xa[..len], dout, oc)
        })?;
    Ok(out)
}

/// `target = f(target, other)` in place, in the target's own dtype. When a
/// per-element mask is given, elements whose mask byte is 0 keep their exact
/// original bytes.
pub(crate) fn update_in_place<F>(
    target: &mut [u8],
    dt: DType,
    other: &[u8],
    dother: DType,
    mask: Option<&[u8]>,
    f: F,
) -> Result<()>
where
    F: Fn(f32, f32) -> f32 + Sync,
{
    let wt = dt.width();
    let wo = dother.width();
    target
        .par_chunks_mut(CHUNK * wt)
        .enumerate()
        .try_for_each(|(ci, tc)| -> Result<()> {
            let start = ci * CHUNK;
            let len = tc.len() / wt;
            let mut xt = [0f32; CHUNK];
            let mut xo = [0f32; CHUNK];
            decode_f32_into(tc, dt, &mut xt[..len])?;
            decode_f32_into(
                &other[start * wo..(start + len) * wo],
                dother,
                &mut xo[..len],
            )?;
            for (x, y) in xt[..len].iter_mut().zip(&xo[..len]) {
                *x = f(*x, *y);
            }
            match mask {
                None => encode_f32_into(&xt[..len], dt, tc),
                Some(mask) => {
                    let mut scratch = [0u8; CHUNK * 8];
                    let enc = &mut scratch[..len * wt];
                    encode_f32_into(&xt[..len], dt, enc)?;
                    for (i, m) in mask[start..start + len].iter().enumerate() {
                        if *m != 0 {
                            tc[i * wt..(i + 1) * wt].copy_from_slice(&enc[i * wt..(i + 1) * wt]);
                        }
                    }
                    Ok(())
                }
            }
        })
}

/// `acc += weight * x` elementwise, or `acc = weight * x` when `init` is set.
pub(crate) fn accumulate(
    acc: &mut [f32],
    x: &[u8],
    dx: DType,
    weight: f32,
    init: bool,
) -> Result<()> {
    let w = dx.width();
    acc.par_chunks_mut(CHUNK)
        .enumerate()
        .try_for_each(|(ci, ac)| -> Result<()> {
            let start = ci * CHUNK;
            let len = ac.len();
            let mut xs = [0f32; CHUNK];
            decode_f32_into(&x[start * w..(start + len) * w], dx, &mut xs[..len])?;
            if init {
                for (a, v) in ac.iter_mut().zip(&xs[..len]) {
                    *a = weight * *v;
                }
            } else {
                for (a, v) in ac.iter_mut().zip(&xs[..len]) {
                    *a += weight * *v;
                }
            }
            Ok(())
        })
}

/// Re-encodes a float buffer into another float dtype.
pub(crate) fn convert(bytes: &[u8], from: DType, to: DType) -> Result<Vec<u8>> {
    if from == to {
        return Ok(bytes.to_vec());
    }
    let n = bytes.len() / from.width();
    let mut out = vec![0u8; n * to.width()];
    out.par_chunks_mut(CHUNK * to.width())
        .enumerate()
        .try_for_each(|(ci, oc)| -> Result<()> {
            let start = ci * CHUNK;
            let len = oc.len() / to.width();
            let mut xs = [0f32; CHUNK];
            decode_f32_into(
                &bytes[start * from.width()..(start + len) * from.width()],
                from,
                &mut xs[..len],
            )?;
            encode_f32_into(&xs[..len], to, oc)
        })?;
    Ok(out)
}

/// Sum of squares and max |x| in F64.
pub(crate) fn norm_parts(bytes: &[u8], dtype: DType) -> Result<(f64, f64)> {
    let w = dtype.width();
    bytes
        .par_chunks(CHUNK * w)
        .map(|c| -> Result<(f64, f64)> {
            let len = c.len() / w;
            let mut xs = [0f32; CHUNK];
            decode_f32_into(c, dtype, &mut xs[..len])?;
            Ok(xs[..len].iter().fold((0f64, 0f64), |(ss, mx), v| {
                let v = f64::from(*v);
                (ss + v * v, mx.max(v.abs()))
            }))
        })
        // Collect first so the reduction order is fixed regardless of scheduling.
        .collect::<Result<Vec<_>>>()
        .map(|parts| {
            parts
                .iter()
                .fold((0f64, 0f64), |(ss, mx), (s, m)| (ss + s, mx.max(*m)))
        })
}
