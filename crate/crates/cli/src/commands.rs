use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use vecforge::compat::{load_vocab, validate_pair, validate_tokenizer};
use vecforge::lmclab::{flatten_checkpoint, lmc_sweep, LossOracle};
use vecforge::perturb::{
    perturb_dataset, read_jsonl, think_prefix, to_jsonl, PerturbConfig, Perturbation,
    PromptTemplate, TemplateId,
};
use vecforge::recipe::{self, Recipe};
use vecforge::tensorstore::{open_checkpoint, DType};
use vecforge::vectorops::{
    self, ApplyOptions, ComposeOptions, ExtractOptions, InterpolateOptions, Provenance, Scalar,
    TaskVector,
};
use vecforge::{Error, Result};

use crate::{is_checkpoint_path, stderr_is_terminal, Cli, Command, Exit, PerturbKind, Template};

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_input(path: Option<&Path>) -> Result<String> {
    let mut text = String::new();
    match path {
        Some(p) => {
            text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
        }
        None => {
            io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| Error::Io {
                    path: "<stdin>".into(),
                    source: e,
                })?;
        }
    }
    Ok(text)
}

fn parse_term(text: &str) -> Result<(String, Scalar)> {
    let (path, weight) = text
        .rsplit_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("term {text:?} must be PATH:WEIGHT")))?;
    Ok((path.to_string(), weight.parse()?))
}

fn load_theta(path: &Path) -> Result<Vec<f64>> {
    if is_checkpoint_path(path) {
        return flatten_checkpoint(&open_checkpoint(path)?);
    }
    let text = read_input(Some(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

pub fn run(cli: &Cli) -> Result<Exit> {
    let g = &cli.global;
    match &cli.command {
        Command::Extract {
            minuend,
            subtrahend,
            out,
            dataset_note,
            alpha_hint,
            created_at,
            policy,
            shards,
        } => {
            let opts = ExtractOptions {
                dtype: g.dtype.unwrap_or(DType::F32),
                policy: policy.policy(),
                dataset_note: dataset_note.clone(),
                alpha_hint: alpha_hint.clone(),
                created_at: created_at.clone(),
                max_shard_bytes: shards.max_shard_bytes.unwrap_or(u64::MAX),
            };
            let v = vectorops::extract(
                &open_checkpoint(minuend)?,
                &open_checkpoint(subtrahend)?,
                out,
                &opts,
            )?;
            eprintln!(
                "wrote vector {} ({} tensors)",
                v.storage().path().display(),
                v.storage().len()
            );
        }
        Command::Apply {
            target,
            vector,
            out,
            policy,
            shards,
        } => {
            let opts = ApplyOptions {
                alpha: g.alpha,
                mask: g.mask.clone(),
                policy: policy.policy(),
                output_dtype: g.dtype,
                max_shard_bytes: shards.max_shard_bytes.unwrap_or(u64::MAX),
            };
            let h = vectorops::apply(
                &open_checkpoint(target)?,
                &TaskVector::open(vector)?,
                out,
                &opts,
            )?;
            eprintln!("wrote {} (alpha {})", h.path().display(), g.alpha);
        }
        Command::Compose {
            terms,
            out,
            policy,
            shards,
        } => {
            let parsed = terms
                .iter()
                .map(|t| parse_term(t))
                .collect::<Result<Vec<_>>>()?;
            let vectors = parsed
                .iter()
                .map(|(p, _)| TaskVector::open(p))
                .collect::<Result<Vec<_>>>()?;
            let weighted: Vec<_> = vectors
                .iter()
                .zip(&parsed)
                .map(|(v, (_, w))| (v, *w))
                .collect();
            let opts = ComposeOptions {
                dtype: g.dtype.unwrap_or(DType::F32),
                policy: policy.policy(),
                max_shard_bytes: shards.max_shard_bytes.unwrap_or(u64::MAX),
            };
            let v = vectorops::compose(&weighted, out, &opts)?;
            eprintln!("wrote vector {}", v.storage().path().display());
        }
        Command::Interp {
            a,
            b,
            lambda,
            out,
            policy,
            shards,
        } => {
            let opts = InterpolateOptions {
                policy: policy.policy(),
                max_shard_bytes: shards.max_shard_bytes.unwrap_or(u64::MAX),
            };
            let h = vectorops::interpolate(
                &open_checkpoint(a)?,
                &open_checkpoint(b)?,
                *lambda,
                out,
                &opts,
            )?;
            eprintln!("wrote {} (lambda {lambda})", h.path().display());
        }
        Command::Validate {
            a,
            b,
            tokenizer_a,
            tokenizer_b,
            limit,
            policy,
        } => {
            let policy = policy.policy();
            policy.validate()?;
            let mut report = validate_pair(&open_checkpoint(a)?, &open_checkpoint(b)?, &policy);
            if let (Some(ta), Some(tb)) = (tokenizer_a, tokenizer_b) {
                report =
                    report.with_tokenizer(validate_tokenizer(&load_vocab(ta)?, &load_vocab(tb)?));
            }
            if g.json {
                print_json(&report)?;
            } else {
                print!("{}", report.render_table(*limit));
            }
            if !report.is_compatible() {
                return Ok(Exit::Incompatible);
            }
        }
        Command::Inspect { path, norms } => inspect(path, *norms, g.json)?,
        Command::RunRecipe {
            recipe: path,
            dry_run,
        } => {
            let plan = recipe::plan(Recipe::load(path)?)?;
            for w in &plan.warnings {
                eprintln!("warning: {w}");
            }
            if *dry_run {
                if g.json {
                    print_json(&plan.steps)?;
                } else {
                    for s in &plan.steps {
                        let roles: Vec<_> = s.outputs.iter().map(|o| o.role.as_str()).collect();
                        println!("step {}: {} -> {}", s.index, s.step.op(), roles.join(", "));
                    }
                }
                return Ok(Exit::Ok);
            }
            if stderr_is_terminal() {
                eprintln!(
                    "running {} steps into {}",
                    plan.steps.len(),
                    plan.output_dir().display()
                );
            }
            let manifest = recipe::execute(&plan)?;
            if g.json {
                print_json(&manifest)?;
            } else {
                for (role, h) in &manifest.outputs {
                    println!("{role}  {}  {}", h.digest, h.path.display());
                }
            }
        }
        Command::LmcSweep {
            oracle,
            theta_a,
            theta_b,
            points,
            epsilon,
            csv,
        } => {
            let oracle = LossOracle::from_json(&read_input(Some(oracle))?)?;
            let (ta, tb) = match (&oracle, theta_a, theta_b) {
                (LossOracle::CustomGrid { .. }, _, _) => (Vec::new(), Vec::new()),
                (_, Some(a), Some(b)) => (load_theta(a)?, load_theta(b)?),
                _ => {
                    return Err(Error::InvalidArgument(
                        "--theta-a and --theta-b are required for this oracle".into(),
                    ))
                }
            };
            let report = lmc_sweep(&ta, &tb, &oracle, *points, *epsilon)?;
            if let Some(p) = csv {
                write_file(p, report.to_csv().as_bytes())?;
            }
            if g.json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Perturb {
            kind,
            input,
            output,
            intensity,
            scale,
        } => {
            let kind = match kind {
                PerturbKind::HardLite => Perturbation::HardLite,
                PerturbKind::NoiseDigit => Perturbation::NoiseDigit,
                PerturbKind::SentenceShuffle => Perturbation::SentenceShuffle,
            };
            let config = PerturbConfig {
                seed: g.seed,
                intensity: *intensity,
                scale_factor: *scale,
            };
            config.validate()?;
            let records = match input {
                Some(p) => read_jsonl(BufReader::new(fs::File::open(p).map_err(|e| {
                    Error::Io {
                        path: p.clone(),
                        source: e,
                    }
                })?))?,
                None => read_jsonl(io::stdin().lock())?,
            };
            let out = perturb_dataset(&records, kind, &config)?;
            for s in &out.skipped {
                eprintln!("skipped record {}: {}", s.index, s.reason);
            }
            let text = to_jsonl(&out.records)?;
            match output {
                Some(p) => write_file(p, text.as_bytes())?,
                None => io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| Error::Io {
                        path: "<stdout>".into(),
                        source: e,
                    })?,
            }
        }
        Command::Prompt {
            template,
            template_file,
            text,
        } => {
            let template = match template_file {
                Some(p) => PromptTemplate::custom(read_input(Some(p))?)?,
                None => PromptTemplate::builtin(match template {
                    Template::Gsm8k => TemplateId::Gsm8k,
                    Template::Humaneval => TemplateId::HumanEval,
                }),
            };
            let prompt = match text {
                Some(t) => t.clone(),
                None => read_input(None)?,
            };
            let out = think_prefix(&prompt, &template);
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", out.text);
            if !out.text.ends_with('\n') {
                println!();
            }
        }
    }
    Ok(Exit::Ok)
}

fn inspect(path: &Path, norms: bool, json: bool) -> Result<()> {
    let handle = open_checkpoint(path)?;
    let provenance = Provenance::from_metadata(handle.metadata());
    let stats = if norms {
        Some(vectorops::norm_stats(&handle)?)
    } else {
        None
    };
    if json {
        let tensors: Vec<_> = handle
            .tensors()
            .map(|m| {
                serde_json::json!({
                    "name": m.name,
                    "dtype": m.dtype,
                    "shape": m.shape,
                    "shard": handle.shard_of(&m.name).ok().and_then(|s| s.path.file_name()).map(|n| n.to_string_lossy().into_owned()),
                })
            })
            .collect();
        return print_json(&serde_json::json!({
            "path": handle.path(),
            "sharded": handle.is_sharded(),
            "shards": handle.shards().len(),
            "total_params": handle.total_params(),
            "metadata": handle.metadata(),
            "provenance": provenance,
            "tensors": tensors,
            "norms": stats,
        }));
    }
    println!("path: {}", handle.path().display());
    println!(
        "shards: {}  tensors: {}  parameters: {}",
        handle.shards().len(),
        handle.len(),
        handle.total_params()
    );
    for (k, v) in handle.metadata() {
        println!("meta {k} = {v}");
    }
    let width = handle.names().map(str::len).max().unwrap_or(0);
    for m in handle.tensors() {
        println!("{:<width$}  {:<4}  {:?}", m.name, m.dtype.as_str(), m.shape);
    }
    if let Some(stats) = stats {
        for t in &stats.tensors {
            println!(
                "norm {:<width$}  l2 {:.6e}  max_abs {:.6e}",
                t.name, t.l2, t.max_abs
            );
        }
        println!("global l2 {:.6e}", stats.global_l2);
    }
    Ok(())
}
