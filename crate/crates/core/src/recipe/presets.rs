//! Recipes for the standard transfer experiments.

use std::collections::BTreeMap;
use std::path::PathBuf;

use super::{Attestations, Coefficients, OutputSpec, Recipe, Step, RECIPE_VERSION};
use crate::compat::CompatPolicy;
use crate::vectorops::{MaskSpec, Scalar};

/// Scaling coefficients for the α sweep.
pub const STANDARD_ALPHA_GRID: [f32; 4] = [0.5, 1.0, 1.5, 2.0];

fn base(inputs: &[(&str, PathBuf)], out: PathBuf, steps: Vec<Step>) -> Recipe {
    Recipe {
        version: RECIPE_VERSION,
        inputs: inputs
            .iter()
            .map(|(r, p)| (r.to_string(), p.clone()))
            .collect::<BTreeMap<_, _>>(),
        attestations: Attestations {
            same_initialization: true,
            notes: "donors fine-tuned from the same base".to_string(),
        },
        compat: CompatPolicy::default(),
        steps,
        output: OutputSpec {
            path: out,
            max_shard_bytes: None,
        },
    }
}

fn extract_step() -> Step {
    Step::Extract {
        minuend: "grpo".into(),
        subtrahend: "sft".into(),
        output: "v".into(),
        dtype: None,
        dataset_note: None,
    }
}

fn apply_step(vector: &str, alpha: Coefficients, output: &str) -> Step {
    Step::Apply {
        target: "target".into(),
        vector: vector.into(),
        alpha,
        mask: MaskSpec::Full,
        output_dtype: None,
        output: output.into(),
    }
}

/// `v = grpo − sft`, then `target + v` with a full mask.
pub fn main_transfer(grpo: PathBuf, sft: PathBuf, target: PathBuf, out: PathBuf) -> Recipe {
    base(
        &[("grpo", grpo), ("sft", sft), ("target", target)],
        out,
        vec![
            extract_step(),
            apply_step("v", Coefficients::One(Scalar::ONE), "merged"),
        ],
    )
}

/// Subtracts an existing vector from the target (α = −1).
pub fn ablation(vector: PathBuf, target: PathBuf, out: PathBuf) -> Recipe {
    let minus_one = Scalar::new(-1.0).expect("finite");
    base(
        &[("target", target), ("v", vector)],
        out,
        vec![apply_step("v", Coefficients::One(minus_one), "subtracted")],
    )
}

/// Extracts the vector and applies it at every α of the standard grid.
pub fn scaling_sweep(grpo: PathBuf, sft: PathBuf, target: PathBuf, out: PathBuf) -> Recipe {
    let grid = STANDARD_ALPHA_GRID
        .iter()
        .map(|a| Scalar::new(*a).expect("finite"))
        .collect();
    base(
        &[("grpo", grpo), ("sft", sft), ("target", target)],
        out,
        vec![
            extract_step(),
            apply_step("v", Coefficients::Sweep(grid), "scaled"),
        ],
    )
}
