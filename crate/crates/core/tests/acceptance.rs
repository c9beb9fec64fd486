//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so it can install a counting global
//! allocator and run the criteria serially. Exits nonzero if any fails.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use vecforge::compat::{
    validate_pair, validate_tokenizer, CompatPolicy, MismatchKind, Verdict, Vocab,
};
use vecforge::digest::sha256_bytes;
use vecforge::lmclab::{lmc_sweep, LossOracle, QuadraticMatrix};
use vecforge::parallel::with_threads;
use vecforge::perturb::{perturb_dataset, to_jsonl, PerturbConfig, Perturbation, ProblemRecord};
use vecforge::recipe::{execute, plan, scaling_sweep as sweep_recipe, Manifest};
use vecforge::tensorstore::{
    bf16_bits_from_f32, decode_f32, open_checkpoint, write_blocks, write_checkpoint,
    CheckpointHandle, DType, TensorBlock, TensorSpec, WriteOptions,
};
use vecforge::vectorops::{
    apply, compose, extract, interpolate, ApplyOptions, ComposeOptions, ExtractOptions,
    InterpolateOptions, MaskRule, MaskSpec, Scalar, TaskVector,
};

// Tolerances and budgets, fixed here rather than derived at run time.
const RECONSTRUCTION_MAX_ULP: u64 = 1;
const RECONSTRUCTION_MIN_EXACT: f64 = 0.9999;
const RECONSTRUCTION_MIN_ELEMENTS: usize = 100_000;
const RECONSTRUCTION_BUDGET: Duration = Duration::from_secs(5);
const ABLATION_MAX_ULP: u64 = 1;
const SWEEP_MAX_ULP: u64 = 1;
const SWEEP_ALPHAS: [f32; 4] = [0.5, 1.0, 1.5, 2.0];
const LMC_ORACLES: usize = 100;
const LMC_MAX_DIM: usize = 10_000;
const LMC_GRID_POINTS: usize = 101;
const LMC_EPSILON: f64 = 1e-9;
const LMC_WORKED_BARRIER: f64 = -0.5;
const LMC_WORKED_TOLERANCE: f64 = 1e-12;
const LMC_BUDGET: Duration = Duration::from_secs(10);
const MASK_MAX_ULP: u64 = 1;
const ROUND_TRIP_CHECKPOINTS: usize = 24;
const MEMORY_CHECKPOINT_BYTES: u64 = 1 << 30;
const MEMORY_LARGEST_TENSOR_BYTES: u64 = 64 << 20;
const MEMORY_PEAK_LIMIT: usize = 256 << 20;
const MEMORY_BUDGET: Duration = Duration::from_secs(60);
const PERTURB_PROBLEMS: usize = 1000;
const PERTURB_SEED: u64 = 20_240_917;
// SHA-256 of the JSONL output for each generator over the fixed problem set.
// A change here means outputs are no longer reproducible across versions or platforms.
const PERTURB_DIGESTS: [(Perturbation, &str); 3] = [
    (
        Perturbation::HardLite,
        "f7015ba46cbef9dea839565bce098d77002de6c8756872c7c9108df23d60f544",
    ),
    (
        Perturbation::NoiseDigit,
        "c3afe6395e9583c29ae22a30544876369c378f9a8699aae86b8a6e57978fac10",
    ),
    (
        Perturbation::SentenceShuffle,
        "11e7c86a80db04fb62e98a7115ce32e80698226304d3f5bd01063e7dbc6e0dab",
    ),
];

struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let live = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            let live = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let live = LIVE.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                    - layout.size();
                PEAK.fetch_max(live, Ordering::Relaxed);
            } else {
                LIVE.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOCATOR: CountingAlloc = CountingAlloc;

/// Starts a new peak window; returns the bytes live at its start.
fn reset_peak() -> usize {
    let live = LIVE.load(Ordering::Relaxed);
    PEAK.store(live, Ordering::Relaxed);
    live
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn blocks_by_name(handle: &CheckpointHandle) -> BTreeMap<String, TensorBlock> {
    read_all(handle)
        .into_iter()
        .map(|b| (b.meta.name.clone(), b))
        .collect()
}

/// ULP distance between two stored elements of the same dtype.
fn element_ulp(dtype: DType, out: &TensorBlock, reference: &[f32], i: usize) -> u64 {
    match dtype {
        DType::F32 => {
            let got = f32::from_le_bytes(out.data[i * 4..i * 4 + 4].try_into().unwrap());
            ulp_f32(got, reference[i])
        }
        DType::BF16 => {
            let got = u16::from_le_bytes(out.data[i * 2..i * 2 + 2].try_into().unwrap());
            ulp_bf16(got, bf16_reference(reference[i]))
        }
        other => panic!("no ULP metric for {other}"),
    }
}

/// `t + α·v` with a single rounding from f64, the reference for apply.
fn fused(t: f32, alpha: f32, v: f32) -> f32 {
    f64::from(alpha).mul_add(f64::from(v), f64::from(t)) as f32
}

fn scalar(x: f32) -> Scalar {
    Scalar::new(x).unwrap()
}

fn donors(dir: &Path, seed: u64) -> (CheckpointHandle, CheckpointHandle) {
    let layout = mixed_layout();
    let mut r = rng(seed);
    let mut base = BTreeMap::new();
    let sft = write_model(&dir.join("sft.safetensors"), &layout, |name, n| {
        let w = weights(&mut r, n, 0.05);
        base.insert(name.to_string(), w.clone());
        w
    });
    let grpo = write_model(&dir.join("grpo.safetensors"), &layout, |name, _| {
        fine_tune(&mut r, &base[name], 1e-3)
    });
    (sft, grpo)
}

fn reconstruction() -> Outcome {
    let dir = tempdir();
    let (sft, grpo) = donors(dir.path(), 1);
    let started = Instant::now();
    let v = extract(
        &grpo,
        &sft,
        dir.path().join("v.safetensors"),
        &ExtractOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let out = apply(
        &sft,
        &v,
        dir.path().join("out.safetensors"),
        &ApplyOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    let expected = blocks_by_name(&grpo);
    let got = blocks_by_name(&out);
    let (mut total, mut exact, mut worst) = (0usize, 0usize, 0u64);
    let mut dtypes = std::collections::BTreeSet::new();
    for (name, want) in &expected {
        let have = &got[name];
        dtypes.insert(want.meta.dtype);
        let reference = decode(want);
        for i in 0..reference.len() {
            let d = element_ulp(want.meta.dtype, have, &reference, i);
            worst = worst.max(d);
            exact += usize::from(d == 0);
            total += 1;
        }
    }
    let fraction = exact as f64 / total as f64;
    check(
        expected.len() >= 3
            && dtypes.len() >= 2
            && total >= RECONSTRUCTION_MIN_ELEMENTS
            && worst <= RECONSTRUCTION_MAX_ULP
            && fraction >= RECONSTRUCTION_MIN_EXACT
            && elapsed < RECONSTRUCTION_BUDGET,
        format!(
            "{} tensors, {total} elements, max {worst} ULP, {:.4}% bit-exact, {:.2?}",
            expected.len(),
            fraction * 100.0,
            elapsed
        ),
    )
}

fn all_zero(handle: &CheckpointHandle) -> bool {
    read_all(handle)
        .iter()
        .all(|b| decode_f32(b).unwrap().iter().all(|x| *x == 0.0))
}

fn identities() -> Outcome {
    let dir = tempdir();
    let (sft, grpo) = donors(dir.path(), 2);
    let p = |n: &str| dir.path().join(n);
    let mut failures = Vec::new();

    for (label, x) in [("sft", &sft), ("grpo", &grpo)] {
        let zero = extract(
            x,
            x,
            p(&format!("zero-{label}.safetensors")),
            &ExtractOptions::default(),
        )
        .unwrap();
        if !all_zero(zero.storage()) {
            failures.push(format!("extract({label},{label}) not zero"));
        }
    }

    let v = extract(&grpo, &sft, p("v.safetensors"), &ExtractOptions::default()).unwrap();
    let opts = ApplyOptions {
        alpha: Scalar::ZERO,
        ..ApplyOptions::default()
    };
    let same = apply(&sft, &v, p("alpha0.safetensors"), &opts).unwrap();
    if read_all(&same) != read_all(&sft) {
        failures.push("apply α=0 changed the target".into());
    }

    let interp = InterpolateOptions::default();
    let at1 = interpolate(&grpo, &sft, Scalar::ONE, p("l1.safetensors"), &interp).unwrap();
    let at0 = interpolate(&grpo, &sft, Scalar::ZERO, p("l0.safetensors"), &interp).unwrap();
    if read_all(&at1) != read_all(&grpo) {
        failures.push("interpolate λ=1 differs from a".into());
    }
    if read_all(&at0) != read_all(&sft) {
        failures.push("interpolate λ=0 differs from b".into());
    }

    let cancel = compose(
        &[(&v, Scalar::ONE), (&v, scalar(-1.0))],
        p("cancel.safetensors"),
        &ComposeOptions::default(),
    )
    .unwrap();
    if !all_zero(cancel.storage()) {
        failures.push("compose(v, −v) not zero".into());
    }

    check(
        failures.is_empty(),
        if failures.is_empty() {
            "zero vector, α=0 copy, λ endpoints, v−v all exact".into()
        } else {
            failures.join("; ")
        },
    )
}

fn ablation_symmetry() -> Outcome {
    let dir = tempdir();
    let layout = f32_layout();
    let mut r = rng(3);
    let mut base = BTreeMap::new();
    let sft = write_model(&dir.path().join("sft.safetensors"), &layout, |name, n| {
        let w = weights(&mut r, n, 0.05);
        base.insert(name.to_string(), w.clone());
        w
    });
    let grpo = write_model(&dir.path().join("grpo.safetensors"), &layout, |name, _| {
        fine_tune(&mut r, &base[name], 1e-3)
    });
    let target = write_model(&dir.path().join("target.safetensors"), &layout, |_, n| {
        weights(&mut r, n, 0.05)
    });
    let v = extract(
        &grpo,
        &sft,
        dir.path().join("v.safetensors"),
        &ExtractOptions::default(),
    )
    .unwrap();

    let plus = apply(
        &target,
        &v,
        dir.path().join("plus.safetensors"),
        &ApplyOptions::default(),
    )
    .unwrap();
    let minus = ApplyOptions {
        alpha: scalar(-1.0),
        ..ApplyOptions::default()
    };
    let back = apply(&plus, &v, dir.path().join("back.safetensors"), &minus).unwrap();

    let want = blocks_by_name(&target);
    let got = blocks_by_name(&back);
    let deltas = blocks_by_name(v.storage());
    let (mut total, mut over, mut worst, mut small_target) = (0usize, 0usize, 0u64, 0usize);
    for (name, t) in &want {
        let reference = decode(t);
        let delta = decode(&deltas[name]);
        for i in 0..reference.len() {
            let d = element_ulp(DType::F32, &got[name], &reference, i);
            worst = worst.max(d);
            over += usize::from(d > ABLATION_MAX_ULP);
            small_target += usize::from(delta[i].abs() > reference[i].abs());
            total += 1;
        }
    }
    check(
        worst <= ABLATION_MAX_ULP,
        format!(
            "{total} elements, max {worst} ULP, {over} over {ABLATION_MAX_ULP} ULP; {small_target} elements have |v| > |T|"
        ),
    )
}

fn sweep_run(recipe_dir: &Path, inputs: &Path, run: &str, threads: Option<usize>) -> Manifest {
    let recipe = sweep_recipe(
        inputs.join("grpo.safetensors"),
        inputs.join("sft.safetensors"),
        inputs.join("target.safetensors"),
        recipe_dir.join(run),
    );
    let planned = plan(recipe).unwrap();
    with_threads(threads, || execute(&planned))
        .unwrap()
        .unwrap()
}

fn scaling_sweep() -> Outcome {
    let dir = tempdir();
    let (sft, grpo) = donors(dir.path(), 4);
    let mut r = rng(40);
    let target = write_model(
        &dir.path().join("target.safetensors"),
        &mixed_layout(),
        |_, n| weights(&mut r, n, 0.05),
    );

    let runs = [
        ("run-a", None),
        ("run-b", None),
        ("run-c", None),
        ("one-thread", Some(1)),
        ("eight-threads", Some(8)),
    ];
    let manifests: Vec<_> = runs
        .iter()
        .map(|(name, threads)| sweep_run(dir.path(), dir.path(), name, *threads))
        .collect();
    let digests: Vec<_> = manifests.iter().map(Manifest::output_digests).collect();
    let deterministic = digests.windows(2).all(|w| w[0] == w[1]);

    let scaled: Vec<_> = manifests[0]
        .outputs
        .keys()
        .filter(|k| k.starts_with("scaled."))
        .cloned()
        .collect();
    let sft_blocks = blocks_by_name(&sft);
    let grpo_blocks = blocks_by_name(&grpo);
    let target_blocks = blocks_by_name(&target);
    let mut worst = 0u64;
    let mut checked = 0usize;
    for alpha in SWEEP_ALPHAS {
        let role = format!("scaled.alpha_{}", scalar(alpha));
        let Some(art) = manifests[0].outputs.get(&role) else {
            return Err(format!("missing output {role}; have {scaled:?}"));
        };
        let out = blocks_by_name(&open_checkpoint(&art.path).unwrap());
        for (name, t) in &target_blocks {
            let tv = decode(t);
            let sv = decode(&sft_blocks[name]);
            let gv = decode(&grpo_blocks[name]);
            let reference: Vec<f32> = (0..tv.len())
                .map(|i| fused(tv[i], alpha, gv[i] - sv[i]))
                .collect();
            for i in 0..tv.len() {
                worst = worst.max(element_ulp(t.meta.dtype, &out[name], &reference, i));
                checked += 1;
            }
        }
    }
    check(
        scaled.len() == SWEEP_ALPHAS.len() && worst <= SWEEP_MAX_ULP && deterministic,
        format!(
            "{} checkpoints, {checked} elements, max {worst} ULP, digests identical across {} runs (1 and 8 threads): {deterministic}",
            scaled.len(),
            runs.len()
        ),
    )
}

fn random_oracle(r: &mut impl Rng) -> (LossOracle, usize) {
    let dim = (10f64.powf(r.gen_range(0.0..=(LMC_MAX_DIM as f64).log10())) as usize)
        .clamp(1, LMC_MAX_DIM);
    let center: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let matrix = if dim <= 48 {
        let rows = dim + 2;
        let b: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| (0..rows).map(|k| b[k][i] * b[k][j]).sum())
                    .collect()
            })
            .collect();
        QuadraticMatrix::Dense(a)
    } else if r.gen_bool(0.5) {
        QuadraticMatrix::Diagonal((0..dim).map(|_| r.gen_range(0.0..2.0)).collect())
    } else {
        let rank = r.gen_range(1..=4);
        QuadraticMatrix::LowRank {
            diagonal: (0..dim).map(|_| r.gen_range(0.0..1.0)).collect(),
            factor: (0..rank)
                .map(|_| (0..dim).map(|_| r.gen_range(-0.1..0.1)).collect())
                .collect(),
        }
    };
    (LossOracle::quadratic(center, matrix).unwrap(), dim)
}

fn lmc_inequality() -> Outcome {
    let mut r = rng(5);
    let started = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut max_dim = 0;
    for _ in 0..LMC_ORACLES {
        let (oracle, dim) = random_oracle(&mut r);
        max_dim = max_dim.max(dim);
        let a: Vec<f64> = (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let report =
            lmc_sweep(&a, &b, &oracle, LMC_GRID_POINTS, LMC_EPSILON).map_err(|e| e.to_string())?;
        worst = worst.max(report.barrier);
    }
    let identity = QuadraticMatrix::Dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let oracle = LossOracle::quadratic(vec![0.0, 0.0], identity).unwrap();
    let worked = lmc_sweep(
        &[1.0, 0.0],
        &[0.0, 1.0],
        &oracle,
        LMC_GRID_POINTS,
        LMC_EPSILON,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worked_ok = (worked.barrier - LMC_WORKED_BARRIER).abs() <= LMC_WORKED_TOLERANCE;
    check(
        worst <= LMC_EPSILON && worked_ok && elapsed < LMC_BUDGET,
        format!(
            "{LMC_ORACLES} oracles up to dim {max_dim}: max barrier {worst:.3e}; worked example barrier {} (expected {LMC_WORKED_BARRIER} ± {LMC_WORKED_TOLERANCE:e}, path minimum {} vs endpoints {:?}); {:.2?}",
            worked.barrier,
            worked.losses.iter().cloned().fold(f64::INFINITY, f64::min),
            worked.endpoints,
            elapsed
        ),
    )
}

/// Independent first-match-wins evaluation of the rule shapes used below:
/// exact names and `*fragment*` globs.
fn rule_includes(rules: &[(String, bool)], name: &str) -> bool {
    for (pattern, include) in rules {
        let hit = match pattern.strip_prefix('*').and_then(|p| p.strip_suffix('*')) {
            Some(fragment) => name.contains(fragment),
            None => name == pattern,
        };
        if hit {
            return *include;
        }
    }
    true
}

/// Compares one apply output against the target under a per-element selection.
fn check_masked(
    target: &BTreeMap<String, TensorBlock>,
    vector: &BTreeMap<String, TensorBlock>,
    out: &BTreeMap<String, TensorBlock>,
    alpha: f32,
    selected: impl Fn(&str, usize) -> bool,
) -> (usize, usize, u64, Vec<String>) {
    let (mut kept, mut moved, mut worst) = (0usize, 0usize, 0u64);
    let mut errors = Vec::new();
    for (name, t) in target {
        let width = t.meta.dtype.width();
        let tv = decode(t);
        let dv = decode(&vector[name]);
        let reference: Vec<f32> = (0..tv.len()).map(|i| fused(tv[i], alpha, dv[i])).collect();
        for i in 0..tv.len() {
            if selected(name, i) {
                worst = worst.max(element_ulp(t.meta.dtype, &out[name], &reference, i));
                moved += 1;
            } else {
                if out[name].data[i * width..(i + 1) * width] != t.data[i * width..(i + 1) * width]
                {
                    errors.push(format!("{name}[{i}] changed although masked out"));
                }
                kept += 1;
            }
        }
    }
    (kept, moved, worst, errors)
}

fn mask_locality() -> Outcome {
    let dir = tempdir();
    let p = |n: String| dir.path().join(n);
    let layout = mixed_layout();
    let mut r = rng(6);
    let target = write_model(&p("target.safetensors".into()), &layout, |_, n| {
        weights(&mut r, n, 0.05)
    });
    let vector_handle = write_model(&p("v.safetensors".into()), &f32_layout(), |_, n| {
        weights(&mut r, n, 1e-3)
    });
    let vector = TaskVector::from_handle(vector_handle);
    let target_blocks = blocks_by_name(&target);
    let vector_blocks = blocks_by_name(vector.storage());
    let names: Vec<String> = target_blocks.keys().cloned().collect();
    let fragments = ["embed", "mlp", "self_attn", "norm", "lm_head", "layers.0"];

    let (mut kept, mut moved, mut worst) = (0, 0, 0u64);
    let mut errors = Vec::new();
    for trial in 0..8 {
        let alpha = [0.5f32, -1.0, 1.5, 2.0][trial % 4];
        let rules: Vec<(String, bool)> = (0..r.gen_range(1..=4))
            .map(|_| {
                let pattern = if r.gen_bool(0.5) {
                    names[r.gen_range(0..names.len())].clone()
                } else {
                    format!("*{}*", fragments[r.gen_range(0..fragments.len())])
                };
                (pattern, r.gen_bool(0.3))
            })
            .collect();
        let spec = MaskSpec::Rules(
            rules
                .iter()
                .map(|(pat, inc)| {
                    if *inc {
                        MaskRule::include(pat.clone())
                    } else {
                        MaskRule::exclude(pat.clone())
                    }
                })
                .collect(),
        );
        let opts = ApplyOptions {
            alpha: scalar(alpha),
            mask: spec,
            ..ApplyOptions::default()
        };
        let out = apply(
            &target,
            &vector,
            p(format!("rules-{trial}.safetensors")),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let (k, m, w, e) = check_masked(
            &target_blocks,
            &vector_blocks,
            &blocks_by_name(&out),
            alpha,
            |name, _| rule_includes(&rules, name),
        );
        kept += k;
        moved += m;
        worst = worst.max(w);
        errors.extend(e);
    }

    for trial in 0..4 {
        let alpha = [1.0f32, -0.5, 2.0, 0.75][trial];
        let density = r.gen_range(0.1..0.9);
        let mut bits: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mask_blocks = layout
            .iter()
            .map(|(name, _, shape)| {
                let n = shape.iter().product::<u64>() as usize;
                let m: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(density))).collect();
                bits.insert(name.to_string(), m.clone());
                TensorBlock::new(*name, DType::U8, shape.clone(), m).unwrap()
            })
            .collect();
        let mask_path = p(format!("mask-{trial}.safetensors"));
        write_blocks(mask_blocks, &mask_path, &WriteOptions::default()).unwrap();
        let opts = ApplyOptions {
            alpha: scalar(alpha),
            mask: MaskSpec::TensorFile(mask_path),
            ..ApplyOptions::default()
        };
        let out = apply(
            &target,
            &vector,
            p(format!("elements-{trial}.safetensors")),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let (k, m, w, e) = check_masked(
            &target_blocks,
            &vector_blocks,
            &blocks_by_name(&out),
            alpha,
            |name, i| bits[name][i] == 1,
        );
        kept += k;
        moved += m;
        worst = worst.max(w);
        errors.extend(e);
    }

    errors.truncate(5);
    check(
        errors.is_empty() && worst <= MASK_MAX_ULP && kept > 0 && moved > 0,
        format!(
            "12 masks: {kept} masked-out elements bit-identical, {moved} masked-in within {worst} ULP{}",
            if errors.is_empty() { String::new() } else { format!("; {}", errors.join("; ")) }
        ),
    )
}

fn file_bytes(handle: &CheckpointHandle) -> Vec<(String, Vec<u8>)> {
    handle
        .files()
        .into_iter()
        .map(|f| {
            (
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&f).unwrap(),
            )
        })
        .collect()
}

fn random_tensors(r: &mut impl Rng, count: usize) -> Vec<TensorBlock> {
    // Every tensor is 96 bytes so shard boundaries are predictable.
    let shapes: [(DType, &[u64]); 7] = [
        (DType::F32, &[24]),
        (DType::F32, &[4, 6]),
        (DType::BF16, &[48]),
        (DType::F16, &[2, 24]),
        (DType::F64, &[3, 4]),
        (DType::I8, &[96]),
        (DType::U8, &[8, 12]),
    ];
    (0..count)
        .map(|i| {
            let (dtype, shape) = shapes[r.gen_range(0..shapes.len())];
            let data: Vec<u8> = (0..96).map(|_| r.gen()).collect();
            TensorBlock::new(
                format!("blocks.{i:03}.w{}", r.gen_range(0..10)),
                dtype,
                shape.to_vec(),
                data,
            )
            .unwrap()
        })
        .collect()
}

fn container_round_trip() -> Outcome {
    let dir = tempdir();
    let mut r = rng(7);
    let mut failures = Vec::new();
    let mut shard_counts = Vec::new();
    for case in 0..ROUND_TRIP_CHECKPOINTS {
        let shards = match case {
            0 => 1,
            1 => 64,
            _ => r.gen_range(1..=64),
        };
        let per_shard = r.gen_range(1..=3);
        let blocks = random_tensors(&mut r, shards * per_shard);
        let metadata: BTreeMap<String, String> = (0..r.gen_range(0..4))
            .map(|i| (format!("key{i}"), format!("value {}", r.gen::<u32>())))
            .collect();
        let opts = WriteOptions::default()
            .with_max_shard_bytes((per_shard * 96) as u64)
            .with_metadata(metadata.clone());
        let first =
            write_blocks(blocks.clone(), dir.path().join(format!("c{case}/")), &opts).unwrap();
        let second =
            write_blocks(blocks.clone(), dir.path().join(format!("d{case}/")), &opts).unwrap();
        let reread = read_all(&first);
        let third =
            write_blocks(reread.clone(), dir.path().join(format!("e{case}/")), &opts).unwrap();
        let final_read = read_all(&open_checkpoint(third.path()).unwrap());

        let mut want = blocks.clone();
        want.sort_by(|a, b| a.meta.name.cmp(&b.meta.name));
        let same_payload = |got: &[TensorBlock]| {
            got.len() == want.len()
                && got.iter().zip(&want).all(|(g, w)| {
                    g.meta.name == w.meta.name
                        && g.meta.dtype == w.meta.dtype
                        && g.meta.shape == w.meta.shape
                        && g.data == w.data
                })
        };
        shard_counts.push(first.shards().len());
        if first.shards().len() != shards {
            failures.push(format!(
                "case {case}: {} shards, wanted {shards}",
                first.shards().len()
            ));
        }
        if !same_payload(&reread) || !same_payload(&final_read) {
            failures.push(format!("case {case}: payload changed"));
        }
        if first.metadata() != &metadata {
            failures.push(format!("case {case}: metadata changed"));
        }
        if file_bytes(&first) != file_bytes(&second) || file_bytes(&first) != file_bytes(&third) {
            failures.push(format!("case {case}: file bytes differ between writes"));
        }
    }

    let mut bf16_cases = 0usize;
    for pattern in 0..=u16::MAX {
        let exact = u32::from(pattern) << 16;
        for low in [0u32, 0x0001, 0x7FFF, 0x8000, 0x8001, 0xFFFF] {
            let x = f32::from_bits(exact | low);
            let (got, want) = (bf16_bits_from_f32(x), bf16_reference(x));
            if got != want {
                failures.push(format!(
                    "bf16({:#010x}) = {got:#06x}, reference {want:#06x}",
                    x.to_bits()
                ));
            }
            bf16_cases += 1;
        }
    }
    let all: Vec<u8> = (0..=u16::MAX).flat_map(|p| p.to_le_bytes()).collect();
    let widened =
        decode_f32(&TensorBlock::new("all", DType::BF16, vec![1 << 16], all).unwrap()).unwrap();
    for (pattern, got) in widened.iter().enumerate() {
        let want = bf16_to_f32(pattern as u16);
        if !(got.to_bits() == want.to_bits() || (got.is_nan() && want.is_nan())) {
            failures.push(format!("widen {pattern:#06x} gave {:#010x}", got.to_bits()));
        }
    }

    failures.truncate(5);
    check(
        failures.is_empty(),
        format!(
            "{ROUND_TRIP_CHECKPOINTS} checkpoints ({}–{} shards) byte-stable; {bf16_cases} BF16 roundings and 65536 widenings match the reference{}",
            shard_counts.iter().min().unwrap(),
            shard_counts.iter().max().unwrap(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

/// Fills a checkpoint tensor by tensor with cheap pseudo-random small values.
fn write_large(dest: &Path, specs: Vec<TensorSpec>, seed: u64) -> CheckpointHandle {
    let mut state = seed | 1;
    write_checkpoint(specs, dest, &WriteOptions::default(), |spec| {
        let n = (spec.byte_len() / spec.dtype.width() as u64) as usize;
        let mut out = Vec::with_capacity(spec.byte_len() as usize);
        for _ in 0..n {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let x = (state >> 40) as i32 as f32 * 1e-9;
            match spec.dtype {
                DType::F32 => out.extend_from_slice(&x.to_le_bytes()),
                DType::BF16 => out.extend_from_slice(&bf16_reference(x).to_le_bytes()),
                _ => unreachable!(),
            }
        }
        Ok(out)
    })
    .unwrap()
}

fn memory_bound() -> Outcome {
    let dir = tempdir();
    let mut target_specs = Vec::new();
    for i in 0..14 {
        target_specs.push(TensorSpec::new(
            format!("layers.{i:02}.mlp.weight"),
            DType::F32,
            vec![4096, 4096],
        ));
    }
    for i in 0..4 {
        target_specs.push(TensorSpec::new(
            format!("embed.{i}.weight"),
            DType::BF16,
            vec![2048, 4096],
        ));
    }
    for i in 0..64 {
        target_specs.push(TensorSpec::new(
            format!("layers.{i:02}.attn.weight"),
            DType::F32,
            vec![512, 512],
        ));
    }
    let total: u64 = target_specs.iter().map(TensorSpec::byte_len).sum();
    let largest = target_specs.iter().map(TensorSpec::byte_len).max().unwrap();
    let vector_specs: Vec<_> = target_specs
        .iter()
        .map(|s| TensorSpec::new(s.name.clone(), DType::F32, s.shape.clone()))
        .collect();

    let target = write_large(&dir.path().join("target/"), target_specs, 11);
    let vector =
        TaskVector::from_handle(write_large(&dir.path().join("vector/"), vector_specs, 12));
    let opts = ApplyOptions {
        alpha: scalar(0.5),
        ..ApplyOptions::default()
    };

    let baseline = reset_peak();
    let started = Instant::now();
    let out =
        apply(&target, &vector, dir.path().join("merged/"), &opts).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let peak = PEAK.load(Ordering::Relaxed).saturating_sub(baseline);
    check(
        total == MEMORY_CHECKPOINT_BYTES
            && largest == MEMORY_LARGEST_TENSOR_BYTES
            && out.len() == target.len()
            && peak <= MEMORY_PEAK_LIMIT
            && elapsed < MEMORY_BUDGET,
        format!(
            "{} MiB checkpoint, largest tensor {} MiB: peak transient {:.1} MiB (limit {} MiB), {:.2?}",
            total >> 20,
            largest >> 20,
            peak as f64 / (1 << 20) as f64,
            MEMORY_PEAK_LIMIT >> 20,
            elapsed
        ),
    )
}

/// Splits on `.`, `!` or `?` followed by whitespace, trimming each sentence.
fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|n| n.is_whitespace()) {
            out.push(current.trim().to_string());
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

fn perturbation_suite() -> Outcome {
    let mut r = rng(9);
    let records: Vec<ProblemRecord> = (0..PERTURB_PROBLEMS)
        .map(|_| {
            let (q, s, a) = word_problem(&mut r);
            ProblemRecord::new(q, a, s)
        })
        .collect();
    if let Some(bad) = records
        .iter()
        .position(|rec| !rec.inconsistent_annotations().is_empty())
    {
        return Err(format!("fixture {bad} is inconsistent"));
    }
    let config = PerturbConfig {
        seed: PERTURB_SEED,
        ..PerturbConfig::default()
    };
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    for (kind, pinned) in PERTURB_DIGESTS {
        let first = perturb_dataset(&records, kind, &config).map_err(|e| e.to_string())?;
        let second = perturb_dataset(&records, kind, &config).map_err(|e| e.to_string())?;
        let text = to_jsonl(&first.records).unwrap();
        if text != to_jsonl(&second.records).unwrap() || first.skipped != second.skipped {
            failures.push(format!("{}: repeated runs differ", kind.as_str()));
        }
        let digest = sha256_bytes(text.as_bytes());
        if digest != pinned {
            failures.push(format!(
                "{}: output digest {digest} differs from the pinned value",
                kind.as_str()
            ));
        }
        let skipped: Vec<usize> = first.skipped.iter().map(|s| s.index).collect();
        let originals = (0..records.len())
            .filter(|i| !skipped.contains(i))
            .map(|i| &records[i]);
        for (orig, out) in originals.zip(&first.records) {
            let rec = &out.record;
            match kind {
                Perturbation::HardLite => {
                    if !rec.inconsistent_annotations().is_empty()
                        || rec.annotations.len() != orig.annotations.len()
                    {
                        failures.push(format!("hard_lite inconsistent: {:?}", rec.solution));
                    }
                }
                Perturbation::NoiseDigit => {
                    if rec.answer != orig.answer || rec.solution != orig.solution {
                        failures.push(format!(
                            "noise_digit changed answer or solution: {:?}",
                            rec.question
                        ));
                    }
                    if !is_subsequence(&digit_runs(&orig.question), &digit_runs(&rec.question)) {
                        failures.push(format!(
                            "noise_digit altered digits: {:?} -> {:?}",
                            orig.question, rec.question
                        ));
                    }
                }
                Perturbation::SentenceShuffle => {
                    let (mut a, mut b) = (sentences(&orig.question), sentences(&rec.question));
                    let last_kept = a.last() == b.last();
                    a.sort();
                    b.sort();
                    if a != b
                        || !last_kept
                        || rec.answer != orig.answer
                        || rec.solution != orig.solution
                    {
                        failures.push(format!(
                            "sentence_shuffle broke {:?} -> {:?}",
                            orig.question, rec.question
                        ));
                    }
                }
            }
        }
        notes.push(format!(
            "{} {} kept/{} skipped",
            kind.as_str(),
            first.records.len(),
            skipped.len()
        ));
    }

    failures.truncate(5);
    check(
        failures.is_empty(),
        format!(
            "{PERTURB_PROBLEMS} problems: {}{}",
            notes.join(", "),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    )
}

fn vocab(tokens: &[(&str, u64)]) -> Vocab {
    tokens.iter().map(|(t, i)| (t.to_string(), *i)).collect()
}

fn compatibility_gate() -> Outcome {
    let dir = tempdir();
    let base = [
        ("embed.weight", DType::BF16, vec![32u64, 8]),
        ("layers.0.attn.weight", DType::F32, vec![8, 8]),
        ("layers.0.mlp.weight", DType::F32, vec![16, 8]),
        ("norm.weight", DType::F32, vec![8]),
    ];
    let model = |name: &str, edit: &dyn Fn(&mut TensorLayout)| {
        let mut layout: Vec<_> = base.iter().map(|(n, d, s)| (*n, *d, s.clone())).collect();
        edit(&mut layout);
        write_model(
            &dir.path().join(format!("{name}.safetensors")),
            &layout,
            |_, n| vec![0.25; n],
        )
    };
    let reference = model("reference", &|_| {});
    let words: Vec<(&str, u64)> = ["<s>", "</s>", "the", "a", "of", "to", "and", "in"]
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, i as u64))
        .collect();
    let base_vocab = vocab(&words);

    let tensor_fixtures: Vec<(&str, CheckpointHandle, MismatchKind)> = vec![
        (
            "shape: column count",
            model("shape-cols", &|l| l[2].2 = vec![16, 4]),
            MismatchKind::Shape,
        ),
        (
            "shape: rank",
            model("shape-rank", &|l| l[3].2 = vec![8, 1]),
            MismatchKind::Shape,
        ),
        (
            "shape: vocabulary rows",
            model("shape-vocab", &|l| l[0].2 = vec![33, 8]),
            MismatchKind::Shape,
        ),
        (
            "dtype: F32 vs BF16",
            model("dtype-bf16", &|l| l[1].1 = DType::BF16),
            MismatchKind::Dtype,
        ),
        (
            "dtype: BF16 vs F32",
            model("dtype-f32", &|l| l[0].1 = DType::F32),
            MismatchKind::Dtype,
        ),
        (
            "missing tensor",
            model("missing", &|l| {
                l.remove(2);
            }),
            MismatchKind::MissingInB,
        ),
        (
            "missing norm",
            model("missing-norm", &|l| {
                l.remove(3);
            }),
            MismatchKind::MissingInB,
        ),
        (
            "extra tensor",
            model("extra", &|l| {
                l.push(("lm_head.weight", DType::F32, vec![32, 8]))
            }),
            MismatchKind::MissingInA,
        ),
        (
            "extra layer",
            model("extra-layer", &|l| {
                l.push(("layers.1.mlp.weight", DType::F32, vec![16, 8]))
            }),
            MismatchKind::MissingInA,
        ),
    ];
    let mut swapped = words.clone();
    swapped.swap(2, 3);
    let swapped: Vec<(&str, u64)> = swapped
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (*t, i as u64))
        .collect();
    let mut grown = words.clone();
    grown.push(("<pad>", 8));
    let shrunk = &words[..7];
    let vocab_fixtures: Vec<(&str, Vocab, MismatchKind)> = vec![
        ("vocabulary id swap", vocab(&swapped), MismatchKind::TokenId),
        (
            "vocabulary size +1",
            vocab(&grown),
            MismatchKind::MissingInA,
        ),
        (
            "vocabulary size −1",
            vocab(shrunk),
            MismatchKind::MissingInB,
        ),
    ];

    let policy = CompatPolicy::default();
    let mut failures = Vec::new();
    let mut count = 0;
    for (label, other, kind) in &tensor_fixtures {
        let report = validate_pair(&reference, other, &policy);
        let kinds: Vec<_> = report.mismatches.iter().map(|m| m.kind).collect();
        if report.verdict != Verdict::Incompatible || !kinds.contains(kind) {
            failures.push(format!("{label}: {:?} {kinds:?}", report.verdict));
        }
        count += 1;
    }
    for (label, other, kind) in &vocab_fixtures {
        let report = validate_pair(&reference, &reference, &policy)
            .with_tokenizer(validate_tokenizer(&base_vocab, other));
        let kinds: Vec<_> = report
            .tokenizer
            .iter()
            .flat_map(|t| &t.differing)
            .map(|m| m.kind)
            .collect();
        if report.verdict != Verdict::Incompatible || !kinds.contains(kind) {
            failures.push(format!("{label}: {:?} {kinds:?}", report.verdict));
        }
        count += 1;
    }
    let twin = model("twin", &|_| {});
    let same = validate_pair(&reference, &twin, &policy)
        .with_tokenizer(validate_tokenizer(&base_vocab, &base_vocab));
    if same.verdict != Verdict::Compatible
        || !same.mismatches.is_empty()
        || same
            .tokenizer
            .as_ref()
            .is_some_and(|t| t.total_differences > 0)
    {
        failures.push(format!(
            "identical pair: {:?} with {} mismatches",
            same.verdict,
            same.mismatches.len()
        ));
    }
    check(
        failures.is_empty() && count == 12,
        format!(
            "{count} mismatch fixtures rejected with the expected kind; identical pair compatible{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("reconstruction oracle", reconstruction),
        ("zero and identity suite", identities),
        ("ablation symmetry", ablation_symmetry),
        ("scaling sweep", scaling_sweep),
        ("lmc inequality", lmc_inequality),
        ("mask locality", mask_locality),
        ("container round-trip", container_round_trip),
        ("memory bound", memory_bound),
        ("perturbation suite", perturbation_suite),
        ("compatibility gate", compatibility_gate),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("[{status}] {:>2}. {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
