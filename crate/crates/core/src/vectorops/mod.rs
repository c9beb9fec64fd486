//! Task-vector algebra: extract, apply, compose, interpolate, and inspect.
//!
//! All arithmetic runs in F32, one tensor at a time, and outputs are written
//! in ascending tensor-name order. Integer and bool tensors never take part in
//! arithmetic; they are copied from the checkpoint that supplies the output's
//! structure.

mod kernels;
mod mask;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::compat::{validate_layouts, CompatPolicy, CompatReport};
use crate::digest::checkpoint_digest;
use crate::error::{Error, Result};
use crate::tensorstore::{
    open_checkpoint, write_checkpoint, CheckpointHandle, DType, Layout, TensorLayout, TensorSpec,
    WriteOptions,
};

pub use mask::{MaskAction, MaskRule, MaskSpec, ResolvedMask, TensorMask, PRESET_NO_EMBEDDINGS};

pub const META_MINUEND: &str = "vecforge.minuend";
pub const META_SUBTRAHEND: &str = "vecforge.subtrahend";
pub const META_TERMS: &str = "vecforge.terms";
pub const META_ALPHA_HINT: &str = "vecforge.alpha_hint";
pub const META_DATASET_NOTE: &str = "vecforge.dataset_note";
pub const META_TOOL_VERSION: &str = "vecforge.tool_version";
pub const META_CREATED_AT: &str = "vecforge.created_at";

/// A finite scalar coefficient (α, λ, or a compose weight), held in F32.
///
/// Parsing goes straight from the decimal text to the nearest F32, so `"0.1"`
/// means the same value on every platform.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Scalar(f32);

impl Scalar {
    pub const ZERO: Scalar = Scalar(0.0);
    pub const ONE: Scalar = Scalar(1.0);

    pub fn new(value: f32) -> Result<Self> {
        if value.is_finite() {
            Ok(Scalar(value))
        } else {
            Err(Error::InvalidArgument(format!(
                "coefficient must be finite, got {value}"
            )))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl FromStr for Scalar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: f32 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("not a number: {s:?}")))?;
        Scalar::new(v)
    }
}

/// Shortest decimal that parses back to the same F32.
impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Scalar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        // Through the shortest decimal, so 0.1 is written as 0.1.
        let v: f64 = self
            .to_string()
            .parse()
            .expect("display output is a valid number");
        s.serialize_f64(v)
    }
}

/// Accepts a JSON number or a decimal string. Numbers are re-read from their
/// shortest decimal text so `0.1` rounds once, straight to F32.
impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Number(v) => v.to_string(),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// One weighted input of a composition, identified by the vector's content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub id: String,
    pub weight: String,
}

/// Where a vector came from, stored in the container's metadata table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub minuend_id: Option<String>,
    pub subtrahend_id: Option<String>,
    pub terms: Vec<Term>,
    pub alpha_hint: Option<String>,
    pub dataset_note: Option<String>,
    pub tool_version: Option<String>,
    pub created_at: Option<String>,
}

impl Provenance {
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v.clone());
            }
        };
        put(META_MINUEND, &self.minuend_id);
        put(META_SUBTRAHEND, &self.subtrahend_id);
        put(META_ALPHA_HINT, &self.alpha_hint);
        put(META_DATASET_NOTE, &self.dataset_note);
        put(META_TOOL_VERSION, &self.tool_version);
        put(META_CREATED_AT, &self.created_at);
        if !self.terms.is_empty() {
            m.insert(
                META_TERMS.to_string(),
                serde_json::to_string(&self.terms).expect("terms serialize"),
            );
        }
        m
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Self {
        let get = |k: &str| meta.get(k).cloned();
        Provenance {
            minuend_id: get(META_MINUEND),
            subtrahend_id: get(META_SUBTRAHEND),
            terms: meta
                .get(META_TERMS)
                .and_then(|t| serde_json::from_str(t).ok())
                .unwrap_or_default(),
            alpha_hint: get(META_ALPHA_HINT),
            dataset_note: get(META_DATASET_NOTE),
            tool_version: get(META_TOOL_VERSION),
            created_at: get(META_CREATED_AT),
        }
    }
}

/// A checkpoint of delta tensors plus its provenance.
#[derive(Debug)]
pub struct TaskVector {
    storage: CheckpointHandle,
    provenance: Provenance,
    content_hash: OnceLock<String>,
}

impl TaskVector {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(TaskVector::from_handle(
            open_checkpoint(path)?.with_role("vector"),
        ))
    }

    /// Treats any checkpoint as a vector; provenance comes from its metadata.
    pub fn from_handle(storage: CheckpointHandle) -> Self {
        let provenance = Provenance::from_metadata(storage.metadata());
        TaskVector {
            storage,
            provenance,
            content_hash: OnceLock::new(),
        }
    }

    pub fn storage(&self) -> &CheckpointHandle {
        &self.storage
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn layout(&self) -> Layout {
        self.storage.layout()
    }

    /// SHA-256 identity of the vector's files, computed on first use.
    pub fn content_hash(&self) -> Result<&str> {
        if let Some(h) = self.content_hash.get() {
            return Ok(h);
        }
        let h = checkpoint_digest(&self.storage)?;
        Ok(self.content_hash.get_or_init(|| h))
    }

    pub fn norm_stats(&self) -> Result<NormReport> {
        norm_stats(&self.storage)
    }
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    /// Storage dtype of the deltas.
    pub dtype: DType,
    pub policy: CompatPolicy,
    pub dataset_note: Option<String>,
    pub alpha_hint: Option<String>,
    pub created_at: Option<String>,
    pub max_shard_bytes: u64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            dtype: DType::F32,
            policy: CompatPolicy::default(),
            dataset_note: None,
            alpha_hint: None,
            created_at: None,
            max_shard_bytes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApplyOptions {
    pub alpha: Scalar,
    pub mask: MaskSpec,
    pub policy: CompatPolicy,
    /// Overrides the dtype of float outputs; by default each tensor keeps the target's dtype.
    pub output_dtype: Option<DType>,
    pub max_shard_bytes: u64,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            alpha: Scalar::ONE,
            mask: MaskSpec::Full,
            policy: CompatPolicy::default(),
            output_dtype: None,
            max_shard_bytes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComposeOptions {
    pub dtype: DType,
    pub policy: CompatPolicy,
    pub max_shard_bytes: u64,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            dtype: DType::F32,
            policy: CompatPolicy::default(),
            max_shard_bytes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterpolateOptions {
    pub policy: CompatPolicy,
    pub max_shard_bytes: u64,
}

impl Default for InterpolateOptions {
    fn default() -> Self {
        InterpolateOptions {
            policy: CompatPolicy::default(),
            max_shard_bytes: u64::MAX,
        }
    }
}

fn require(report: CompatReport) -> Result<CompatReport> {
    if report.is_compatible() {
        Ok(report)
    } else {
        Err(Error::Incompatible(Box::new(report)))
    }
}

fn require_float(name: &str, dtype: DType) -> Result<()> {
    if dtype.is_float() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tensor {name:?} is {dtype} and cannot take part in float arithmetic"
        )))
    }
}

/// Policy used when a vector meets a target: vectors are stored in their own
/// dtype, and integer buffers live only on the target side.
pub fn vector_target_policy(policy: &CompatPolicy) -> CompatPolicy {
    CompatPolicy {
        allow_dtype_mismatch: true,
        copy_through_non_float: true,
        ..policy.clone()
    }
}

/// Pairing checks for extraction. Beyond layout compatibility, a float tensor
/// paired with an integer one is always refused, and integer tensors present
/// in both donors are refused unless the policy copies them through.
pub fn check_extract(
    minuend: &Layout,
    subtrahend: &Layout,
    policy: &CompatPolicy,
) -> Result<CompatReport> {
    let report = require(validate_layouts(minuend, subtrahend, policy))?;
    for (name, l) in minuend {
        let Some(s) = subtrahend.get(name) else {
            continue;
        };
        if l.dtype.is_float() != s.dtype.is_float() {
            return Err(Error::NonFloatDType(if l.dtype.is_float() {
                s.dtype
            } else {
                l.dtype
            }));
        }
        if !l.dtype.is_float() && !policy.copy_through_non_float && !policy.excludes(name) {
            return Err(Error::NonFloatDType(l.dtype));
        }
    }
    Ok(report)
}

pub fn check_apply(
    target: &Layout,
    vector: &Layout,
    policy: &CompatPolicy,
) -> Result<CompatReport> {
    require(validate_layouts(
        target,
        vector,
        &vector_target_policy(policy),
    ))
}

pub fn check_compose(layouts: &[Layout], policy: &CompatPolicy) -> Result<Vec<CompatReport>> {
    let first = layouts
        .first()
        .ok_or_else(|| Error::InvalidArgument("compose needs at least one term".into()))?;
    let policy = CompatPolicy {
        allow_dtype_mismatch: true,
        ..policy.clone()
    };
    layouts[1..]
        .iter()
        .map(|l| require(validate_layouts(first, l, &policy)))
        .collect()
}

/// Layout of the vector `extract` would produce from these donors.
pub fn extract_layout(minuend: &Layout, subtrahend: &Layout, opts: &ExtractOptions) -> Layout {
    minuend
        .iter()
        .filter(|(name, l)| {
            l.dtype.is_float()
                && !opts.policy.excludes(name)
                && subtrahend.get(*name).is_some_and(|s| s.dtype.is_float())
        })
        .map(|(name, l)| {
            (
                name.clone(),
                TensorLayout {
                    dtype: opts.dtype,
                    shape: l.shape.clone(),
                },
            )
        })
        .collect()
}

/// Layout of the checkpoint `apply` would produce on this target.
pub fn apply_layout(target: &Layout, output_dtype: Option<DType>) -> Layout {
    target
        .iter()
        .map(|(name, l)| {
            let dtype = match output_dtype {
                Some(d) if l.dtype.is_float() => d,
                _ => l.dtype,
            };
            (
                name.clone(),
                TensorLayout {
                    dtype,
                    shape: l.shape.clone(),
                },
            )
        })
        .collect()
}

fn specs_of(layout: &Layout) -> Vec<TensorSpec> {
    layout
        .iter()
        .map(|(n, l)| TensorSpec::new(n.clone(), l.dtype, l.shape.clone()))
        .collect()
}

fn write_opts(max_shard_bytes: u64, metadata: BTreeMap<String, String>) -> WriteOptions {
    WriteOptions::default()
        .with_max_shard_bytes(max_shard_bytes)
        .with_metadata(metadata)
}

/// `v = minuend − subtrahend`, elementwise over every float tensor both donors share.
pub fn extract(
    minuend: &CheckpointHandle,
    subtrahend: &CheckpointHandle,
    dest: impl AsRef<Path>,
    opts: &ExtractOptions,
) -> Result<TaskVector> {
    opts.policy.validate()?;
    require_float("<vector>", opts.dtype)?;
    let (ml, sl) = (minuend.layout(), subtrahend.layout());
    check_extract(&ml, &sl, &opts.policy)?;
    let layout = extract_layout(&ml, &sl, opts);
    let provenance = Provenance {
        minuend_id: Some(checkpoint_digest(minuend)?),
        subtrahend_id: Some(checkpoint_digest(subtrahend)?),
        terms: Vec::new(),
        alpha_hint: opts.alpha_hint.clone(),
        dataset_note: opts.dataset_note.clone(),
        tool_version: Some(crate::TOOL_VERSION.to_string()),
        created_at: opts.created_at.clone(),
    };
    let out = write_checkpoint(
        specs_of(&layout),
        dest,
        &write_opts(opts.max_shard_bytes, provenance.to_metadata()),
        |spec| {
            let a = minuend.read_tensor(&spec.name)?;
            let b = subtrahend.read_tensor(&spec.name)?;
            kernels::zip_map(
                &a.data,
                a.meta.dtype,
                &b.data,
                b.meta.dtype,
                spec.dtype,
                |x, y| x - y,
            )
        },
    )?;
    Ok(TaskVector::from_handle(out.with_role("vector")))
}

/// `out = target + α·(mask ⊙ v)`, written in the target's dtype per tensor.
///
/// Tensors the vector does not touch (excluded by the mask, absent from the
/// vector, or non-float) are byte-for-byte copies of the target, as is the
/// whole output when α is zero.
pub fn apply(
    target: &CheckpointHandle,
    vector: &TaskVector,
    dest: impl AsRef<Path>,
    opts: &ApplyOptions,
) -> Result<CheckpointHandle> {
    opts.policy.validate()?;
    if let Some(d) = opts.output_dtype {
        require_float("<output>", d)?;
    }
    let alpha = opts.alpha.value();
    let tl = target.layout();
    let vl = vector.layout();
    check_apply(&tl, &vl, &opts.policy)?;
    let mask = opts.mask.resolve(&vl)?;
    let out_layout = apply_layout(&tl, opts.output_dtype);
    let vec_store = vector.storage();

    let out = write_checkpoint(
        specs_of(&out_layout),
        dest,
        &write_opts(opts.max_shard_bytes, target.metadata().clone()),
        |spec| {
            let mut t = target.read_tensor(&spec.name)?;
            let tdtype = t.meta.dtype;
            let touched = alpha != 0.0 && tdtype.is_float() && vec_store.contains(&spec.name);
            let selection = if touched {
                mask.for_tensor(&spec.name)
            } else {
                TensorMask::Exclude
            };
            if selection != TensorMask::Exclude {
                let d = vec_store.read_tensor(&spec.name)?;
                require_float(&spec.name, d.meta.dtype)?;
                let elements = match selection {
                    TensorMask::Elements => Some(mask.read_elements(&spec.name)?),
                    _ => None,
                };
                kernels::update_in_place(
                    &mut t.data,
                    tdtype,
                    &d.data,
                    d.meta.dtype,
                    elements.as_deref(),
                    |x, y| {
                        // alpha * y is exact in f64, so the update rounds once.
                        (f64::from(x) + f64::from(alpha) * f64::from(y)) as f32
                    },
                )?;
            }
            if spec.dtype != tdtype {
                kernels::convert(&t.data, tdtype, spec.dtype)
            } else {
                Ok(t.data)
            }
        },
    )?;
    Ok(out)
}

/// Weighted sum of vectors. Terms are folded in a canonical order (content
/// hash, then weight) so any permutation of the same terms gives identical bytes.
pub fn compose(
    terms: &[(&TaskVector, Scalar)],
    dest: impl AsRef<Path>,
    opts: &ComposeOptions,
) -> Result<TaskVector> {
    opts.policy.validate()?;
    require_float("<vector>", opts.dtype)?;
    if terms.is_empty() {
        return Err(Error::InvalidArgument(
            "compose needs at least one term".into(),
        ));
    }
    let layouts: Vec<Layout> = terms.iter().map(|(v, _)| v.layout()).collect();
    check_compose(&layouts, &opts.policy)?;

    let mut ordered: Vec<(String, &TaskVector, Scalar)> = terms
        .iter()
        .map(|(v, w)| Ok((v.content_hash()?.to_string(), *v, *w)))
        .collect::<Result<_>>()?;
    ordered.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.value().total_cmp(&b.2.value())));

    let first = &layouts[0];
    let out_layout: Layout = first
        .iter()
        .filter(|(_, l)| l.dtype.is_float())
        .map(|(n, l)| {
            (
                n.clone(),
                TensorLayout {
                    dtype: opts.dtype,
                    shape: l.shape.clone(),
                },
            )
        })
        .collect();
    let provenance = Provenance {
        terms: ordered
            .iter()
            .map(|(id, _, w)| Term {
                id: id.clone(),
                weight: w.to_string(),
            })
            .collect(),
        tool_version: Some(crate::TOOL_VERSION.to_string()),
        ..Provenance::default()
    };

    let out = write_checkpoint(
        specs_of(&out_layout),
        dest,
        &write_opts(opts.max_shard_bytes, provenance.to_metadata()),
        |spec| {
            let n = crate::tensorstore::element_count(&spec.shape) as usize;
            let mut acc = vec![0f32; n];
            for (i, (_, v, w)) in ordered.iter().enumerate() {
                let block = v.storage().read_tensor(&spec.name)?;
                require_float(&spec.name, block.meta.dtype)?;
                kernels::accumulate(&mut acc, &block.data, block.meta.dtype, w.value(), i == 0)?;
            }
            crate::tensorstore::encode_from_f32(&acc, spec.dtype)
        },
    )?;
    Ok(TaskVector::from_handle(out.with_role("vector")))
}

/// `λ·a + (1−λ)·b` in a's dtype. λ = 1 copies `a` and λ = 0 copies `b` exactly.
pub fn interpolate(
    a: &CheckpointHandle,
    b: &CheckpointHandle,
    lambda: Scalar,
    dest: impl AsRef<Path>,
    opts: &InterpolateOptions,
) -> Result<CheckpointHandle> {
    opts.policy.validate()?;
    let lam = lambda.value();
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lam} outside [0, 1]"
        )));
    }
    require(validate_layouts(&a.layout(), &b.layout(), &opts.policy))?;
    let copy_from = |src: &CheckpointHandle| {
        let layout = src.layout();
        write_checkpoint(
            specs_of(&layout),
            dest.as_ref(),
            &write_opts(opts.max_shard_bytes, src.metadata().clone()),
            |spec| Ok(src.read_tensor(&spec.name)?.data),
        )
    };
    if lam == 1.0 {
        return copy_from(a);
    }
    if lam == 0.0 {
        return copy_from(b);
    }
    let one_minus = 1.0 - lam;
    write_checkpoint(
        specs_of(&a.layout()),
        dest.as_ref(),
        &write_opts(opts.max_shard_bytes, a.metadata().clone()),
        |spec| {
            let x = a.read_tensor(&spec.name)?;
            if !spec.dtype.is_float() || !b.contains(&spec.name) {
                return Ok(x.data);
            }
            let y = b.read_tensor(&spec.name)?;
            require_float(&spec.name, y.meta.dtype)?;
            kernels::zip_map(
                &x.data,
                x.meta.dtype,
                &y.data,
                y.meta.dtype,
                spec.dtype,
                |p, q| lam * p + one_minus * q,
            )
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorNorm {
    pub name: String,
    pub elements: u64,
    pub l2: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub tensors: Vec<TensorNorm>,
    pub global_l2: f64,
}

/// Per-tensor L2 and max-|x| plus the global L2, accumulated in F64. Non-float tensors are skipped.
pub fn norm_stats(handle: &CheckpointHandle) -> Result<NormReport> {
    let mut tensors = Vec::new();
    let mut total = 0f64;
    for meta in handle.tensors().filter(|m| m.dtype.is_float()) {
        let block = handle.read_tensor(&meta.name)?;
        let (ss, max_abs) = kernels::norm_parts(&block.data, meta.dtype)?;
        total += ss;
        tensors.push(TensorNorm {
            name: meta.name.clone(),
            elements: meta.element_count(),
            l2: ss.sqrt(),
            max_abs,
        });
    }
    Ok(NormReport {
        tensors,
        global_l2: total.sqrt(),
    })
}
