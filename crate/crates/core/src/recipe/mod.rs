//! Declarative merge recipes.
//!
//! A recipe names its input checkpoints by role, lists steps that read roles
//! and produce new ones, and says where outputs go. [`plan`] checks every
//! reference and every compatibility condition before any arithmetic runs;
//! [`execute`] then runs the steps in order and writes a manifest of content
//! hashes next to the outputs.

mod presets;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compat::{validate_layouts, CompatPolicy, CompatReport};
use crate::digest::{checkpoint_digest, sha256_bytes, sha256_file};
use crate::error::{Error, Result};
use crate::tensorstore::{open_checkpoint, CheckpointHandle, DType, Layout, TensorLayout};
use crate::vectorops::{
    self, apply_layout, check_apply, check_compose, check_extract, extract_layout, ApplyOptions,
    ComposeOptions, ExtractOptions, InterpolateOptions, MaskSpec, Scalar, TaskVector,
};

pub use presets::{ablation, main_transfer, scaling_sweep, STANDARD_ALPHA_GRID};

pub const RECIPE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Present in the output directory while a recipe runs; left behind on failure.
pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attestations {
    #[serde(default)]
    pub same_initialization: bool,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shard_bytes: Option<u64>,
}

/// One coefficient or a sweep over several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficients {
    One(Scalar),
    Sweep(Vec<Scalar>),
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients::One(Scalar::ONE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeTerm {
    pub vector: String,
    pub weight: Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Extract {
        minuend: String,
        subtrahend: String,
        output: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dtype: Option<DType>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset_note: Option<String>,
    },
    Compose {
        terms: Vec<ComposeTerm>,
        output: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dtype: Option<DType>,
    },
    Apply {
        target: String,
        vector: String,
        #[serde(default)]
        alpha: Coefficients,
        #[serde(default)]
        mask: MaskSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_dtype: Option<DType>,
        output: String,
    },
    InterpolateSweep {
        a: String,
        b: String,
        lambdas: Vec<Scalar>,
        output: String,
    },
}

impl Step {
    pub fn op(&self) -> &'static str {
        match self {
            Step::Extract { .. } => "extract",
            Step::Compose { .. } => "compose",
            Step::Apply { .. } => "apply",
            Step::InterpolateSweep { .. } => "interpolate_sweep",
        }
    }

    fn inputs(&self) -> Vec<&str> {
        match self {
            Step::Extract {
                minuend,
                subtrahend,
                ..
            } => vec![minuend, subtrahend],
            Step::Compose { terms, .. } => terms.iter().map(|t| t.vector.as_str()).collect(),
            Step::Apply { target, vector, .. } => vec![target, vector],
            Step::InterpolateSweep { a, b, .. } => vec![a, b],
        }
    }

    /// Roles this step produces, with the coefficient each one uses.
    fn outputs(&self) -> Vec<(String, Option<Scalar>)> {
        match self {
            Step::Extract { output, .. } | Step::Compose { output, .. } => {
                vec![(output.clone(), None)]
            }
            Step::Apply {
                alpha: Coefficients::One(a),
                output,
                ..
            } => vec![(output.clone(), Some(*a))],
            Step::Apply {
                alpha: Coefficients::Sweep(alphas),
                output,
                ..
            } => alphas
                .iter()
                .map(|a| (sweep_role(output, "alpha", *a), Some(*a)))
                .collect(),
            Step::InterpolateSweep {
                lambdas, output, ..
            } => lambdas
                .iter()
                .map(|l| (sweep_role(output, "lambda", *l), Some(*l)))
                .collect(),
        }
    }
}

/// `<output>.alpha_<value>` with the value in shortest round-trip form.
pub fn sweep_role(output: &str, axis: &str, value: Scalar) -> String {
    format!("{output}.{axis}_{value}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub version: u32,
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub attestations: Attestations,
    #[serde(default)]
    pub compat: CompatPolicy,
    #[serde(default)]
    pub steps: Vec<Step>,
    pub output: OutputSpec,
}

impl Recipe {
    pub fn from_json(text: &str) -> Result<Recipe> {
        serde_json::from_str(text).map_err(|e| Error::json("recipe", e))
    }

    /// Loads a recipe file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Recipe> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe: Recipe =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        recipe.rebase(base);
        Ok(recipe)
    }

    /// Makes relative input, output and mask paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.inputs.values_mut().for_each(fix);
        fix(&mut self.output.path);
        for step in &mut self.steps {
            if let Step::Apply {
                mask: MaskSpec::TensorFile(p),
                ..
            } = step
            {
                fix(p);
            }
        }
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("recipes always serialize");
        sha256_bytes(value.to_string().as_bytes())
    }

    fn max_shard_bytes(&self) -> u64 {
        self.output.max_shard_bytes.unwrap_or(u64::MAX)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannedOutput {
    pub role: String,
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<Scalar>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannedStep {
    pub index: usize,
    pub step: Step,
    pub outputs: Vec<PlannedOutput>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub report: CompatReport,
}

/// A recipe whose references, coefficients and layouts have all been checked.
#[derive(Debug)]
pub struct ExecutionPlan {
    pub recipe: Recipe,
    pub steps: Vec<PlannedStep>,
    pub compat: Vec<StepReport>,
    pub warnings: Vec<String>,
    inputs: BTreeMap<String, CheckpointHandle>,
}

impl ExecutionPlan {
    pub fn output_dir(&self) -> &Path {
        &self.recipe.output.path
    }
}

fn step_err(index: usize, op: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Step {
        index,
        op,
        source: Box::new(e),
    }
}

fn recipe_err(index: usize, op: &'static str, msg: impl Into<String>) -> Error {
    step_err(index, op)(Error::Recipe(msg.into()))
}

fn check_role_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && name != MANIFEST_FILE
        && name != PARTIAL_MARKER;
    if ok {
        Ok(())
    } else {
        Err(Error::Recipe(format!("{name:?} is not a usable role name")))
    }
}

/// Validates a recipe without touching tensor data. Nothing is written.
pub fn plan(recipe: Recipe) -> Result<ExecutionPlan> {
    if recipe.version != RECIPE_VERSION {
        return Err(Error::Recipe(format!(
            "unsupported recipe version {} (expected {RECIPE_VERSION})",
            recipe.version
        )));
    }
    recipe.compat.validate()?;
    let mut warnings = Vec::new();
    if !recipe.attestations.same_initialization {
        warnings.push(
            "inputs are not attested to share an initialization; task-vector arithmetic between unrelated checkpoints is not meaningful"
                .to_string(),
        );
    }

    let mut inputs = BTreeMap::new();
    let mut layouts: BTreeMap<String, Layout> = BTreeMap::new();
    for (role, path) in &recipe.inputs {
        check_role_name(role)?;
        let handle = open_checkpoint(path)?;
        layouts.insert(role.clone(), handle.layout());
        inputs.insert(role.clone(), handle.with_role(role.clone()));
    }

    let policy = &recipe.compat;
    let mut steps = Vec::new();
    let mut compat = Vec::new();
    for (index, step) in recipe.steps.iter().enumerate() {
        let op = step.op();
        let fail = step_err(index, op);
        for role in step.inputs() {
            if !layouts.contains_key(role) {
                return Err(recipe_err(index, op, format!("unknown role {role:?}")));
            }
        }
        let layout_of = |r: &str| &layouts[r];
        let mut reports = Vec::new();
        let out_layout = match step {
            Step::Extract {
                minuend,
                subtrahend,
                dtype,
                ..
            } => {
                let opts = ExtractOptions {
                    dtype: dtype.unwrap_or(DType::F32),
                    policy: policy.clone(),
                    ..ExtractOptions::default()
                };
                if !opts.dtype.is_float() {
                    return Err(recipe_err(
                        index,
                        op,
                        format!("vector dtype {} is not a float type", opts.dtype),
                    ));
                }
                reports.push(
                    check_extract(layout_of(minuend), layout_of(subtrahend), policy)
                        .map_err(&fail)?,
                );
                extract_layout(layout_of(minuend), layout_of(subtrahend), &opts)
            }
            Step::Compose { terms, dtype, .. } => {
                if terms.is_empty() {
                    return Err(recipe_err(index, op, "compose needs at least one term"));
                }
                let dtype = dtype.unwrap_or(DType::F32);
                if !dtype.is_float() {
                    return Err(recipe_err(
                        index,
                        op,
                        format!("vector dtype {dtype} is not a float type"),
                    ));
                }
                let ls: Vec<Layout> = terms.iter().map(|t| layout_of(&t.vector).clone()).collect();
                reports.extend(check_compose(&ls, policy).map_err(&fail)?);
                ls[0]
                    .iter()
                    .filter(|(_, l)| l.dtype.is_float())
                    .map(|(n, l)| {
                        let shape = l.shape.clone();
                        (n.clone(), TensorLayout { dtype, shape })
                    })
                    .collect()
            }
            Step::Apply {
                target,
                vector,
                alpha,
                mask,
                output_dtype,
                ..
            } => {
                if let Coefficients::Sweep(a) = alpha {
                    if a.is_empty() {
                        return Err(recipe_err(index, op, "alpha sweep is empty"));
                    }
                }
                if output_dtype.is_some_and(|d| !d.is_float()) {
                    return Err(recipe_err(index, op, "output_dtype must be a float type"));
                }
                reports.push(
                    check_apply(layout_of(target), layout_of(vector), policy).map_err(&fail)?,
                );
                mask.resolve(layout_of(vector)).map_err(&fail)?;
                apply_layout(layout_of(target), *output_dtype)
            }
            Step::InterpolateSweep { a, b, lambdas, .. } => {
                if lambdas.is_empty() {
                    return Err(recipe_err(index, op, "lambda grid is empty"));
                }
                if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(&l.value())) {
                    return Err(recipe_err(
                        index,
                        op,
                        format!("lambda {bad} is outside [0, 1]"),
                    ));
                }
                if lambdas.windows(2).any(|w| w[1].value() <= w[0].value()) {
                    return Err(recipe_err(
                        index,
                        op,
                        "lambda grid must be strictly increasing",
                    ));
                }
                let report = validate_layouts(layout_of(a), layout_of(b), policy);
                if !report.is_compatible() {
                    return Err(fail(Error::Incompatible(Box::new(report))));
                }
                reports.push(report);
                layout_of(a).clone()
            }
        };
        let mut outputs = Vec::new();
        for (role, coefficient) in step.outputs() {
            check_role_name(&role).map_err(&fail)?;
            if layouts.contains_key(&role) {
                return Err(recipe_err(
                    index,
                    op,
                    format!("role {role:?} is already defined"),
                ));
            }
            layouts.insert(role.clone(), out_layout.clone());
            outputs.push(PlannedOutput {
                path: recipe.output.path.join(&role),
                role,
                coefficient,
            });
        }
        compat.extend(reports.into_iter().map(|report| StepReport {
            step: index,
            report,
        }));
        steps.push(PlannedStep {
            index,
            step: step.clone(),
            outputs,
        });
    }
    Ok(ExecutionPlan {
        recipe,
        steps,
        compat,
        warnings,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub path: PathBuf,
    /// Combined digest over the per-file hashes.
    pub digest: String,
    /// File name → SHA-256.
    pub files: BTreeMap<String, String>,
}

impl ArtifactHashes {
    fn of(handle: &CheckpointHandle) -> Result<Self> {
        let files = handle
            .files()
            .into_iter()
            .map(|f| {
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, sha256_file(&f)?))
            })
            .collect::<Result<_>>()?;
        Ok(ArtifactHashes {
            path: handle.path().to_path_buf(),
            digest: checkpoint_digest(handle)?,
            files,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recipe_hash: String,
    pub tool_version: String,
    pub inputs: BTreeMap<String, ArtifactHashes>,
    pub outputs: BTreeMap<String, ArtifactHashes>,
    pub compat: Vec<serde_json::Value>,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    /// Output role → digest; the part of the manifest that must be reproducible.
    pub fn output_digests(&self) -> BTreeMap<&str, &str> {
        self.outputs
            .iter()
            .map(|(k, v)| (k.as_str(), v.digest.as_str()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

fn open_role(
    handles: &BTreeMap<String, CheckpointHandle>,
    paths: &BTreeMap<String, PathBuf>,
    role: &str,
) -> Result<CheckpointHandle> {
    match handles.get(role) {
        Some(h) => open_checkpoint(h.path()),
        None => open_checkpoint(&paths[role]),
    }
    .map(|h| h.with_role(role))
}

/// Runs a validated plan. Steps run in order on the current rayon pool; the
/// manifest is written to `<output>/manifest.json` and also returned.
pub fn execute(plan: &ExecutionPlan) -> Result<Manifest> {
    let started = Instant::now();
    let out_dir = plan.output_dir();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(PARTIAL_MARKER);
    fs::write(&marker, b"recipe execution in progress or interrupted\n")
        .map_err(|e| Error::io(&marker, e))?;

    let max_shard_bytes = plan.recipe.max_shard_bytes();
    let policy = &plan.recipe.compat;
    let mut produced: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for planned in &plan.steps {
        let fail = step_err(planned.index, planned.step.op());
        let open = |role: &str| open_role(&plan.inputs, &produced, role);
        let mut written = Vec::new();
        match &planned.step {
            Step::Extract {
                minuend,
                subtrahend,
                dtype,
                dataset_note,
                ..
            } => {
                let opts = ExtractOptions {
                    dtype: dtype.unwrap_or(DType::F32),
                    policy: policy.clone(),
                    dataset_note: dataset_note.clone(),
                    max_shard_bytes,
                    ..ExtractOptions::default()
                };
                let out = &planned.outputs[0];
                let v = vectorops::extract(
                    &open(minuend)?,
                    &open(subtrahend)?,
                    dir_dest(&out.path),
                    &opts,
                )
                .map_err(&fail)?;
                written.push((out.role.clone(), v.storage().path().to_path_buf()));
            }
            Step::Compose { terms, dtype, .. } => {
                let vectors = terms
                    .iter()
                    .map(|t| open(&t.vector).map(TaskVector::from_handle))
                    .collect::<Result<Vec<_>>>()?;
                let weighted: Vec<(&TaskVector, Scalar)> = vectors
                    .iter()
                    .zip(terms)
                    .map(|(v, t)| (v, t.weight))
                    .collect();
                let opts = ComposeOptions {
                    dtype: dtype.unwrap_or(DType::F32),
                    policy: policy.clone(),
                    max_shard_bytes,
                };
                let out = &planned.outputs[0];
                let v = vectorops::compose(&weighted, dir_dest(&out.path), &opts).map_err(&fail)?;
                written.push((out.role.clone(), v.storage().path().to_path_buf()));
            }
            Step::Apply {
                target,
                vector,
                mask,
                output_dtype,
                ..
            } => {
                let target = open(target)?;
                let vector = TaskVector::from_handle(open(vector)?);
                for out in &planned.outputs {
                    let opts = ApplyOptions {
                        alpha: out.coefficient.unwrap_or(Scalar::ONE),
                        mask: mask.clone(),
                        policy: policy.clone(),
                        output_dtype: *output_dtype,
                        max_shard_bytes,
                    };
                    let h = vectorops::apply(&target, &vector, dir_dest(&out.path), &opts)
                        .map_err(&fail)?;
                    written.push((out.role.clone(), h.path().to_path_buf()));
                }
            }
            Step::InterpolateSweep { a, b, .. } => {
                let (a, b) = (open(a)?, open(b)?);
                let opts = InterpolateOptions {
                    policy: policy.clone(),
                    max_shard_bytes,
                };
                for out in &planned.outputs {
                    let lambda = out.coefficient.expect("sweep outputs carry λ");
                    let h = vectorops::interpolate(&a, &b, lambda, dir_dest(&out.path), &opts)
                        .map_err(&fail)?;
                    written.push((out.role.clone(), h.path().to_path_buf()));
                }
            }
        }
        for (role, path) in written {
            let handle = open_checkpoint(&path)?;
            outputs.insert(role.clone(), ArtifactHashes::of(&handle)?);
            produced.insert(role, path);
        }
    }

    let inputs = plan
        .inputs
        .iter()
        .map(|(role, h)| Ok((role.clone(), ArtifactHashes::of(h)?)))
        .collect::<Result<_>>()?;
    let compat = plan
        .compat
        .iter()
        .map(|r| serde_json::to_value(r).map_err(|e| Error::json("compat report", e)))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        recipe_hash: plan.recipe.content_hash(),
        tool_version: crate::TOOL_VERSION.to_string(),
        inputs,
        outputs,
        compat,
        warnings: plan.warnings.clone(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(manifest)
}

/// Step outputs are always written in directory form.
fn dir_dest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(std::path::MAIN_SEPARATOR_STR);
    PathBuf::from(s)
}
