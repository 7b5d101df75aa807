//! Command-line frontend for certificate synthesis and checking.

use anyhow::{anyhow, bail, Context, Result};
use certkit::cegis::{check_certificate, run_cegis};
use certkit::rules::compile_rules;
use certkit::verifier::smt::{check_smtlib_syntax, export_smtlib, SmtMode};
use certkit_cli::problem_file::{load_problem, LoadedProblem};
use certkit_cli::result_file::{
    build_result, problem_digest, verdict_record, ResultFile, VerdictRecord,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "certkit", version, about = "Neural certificate synthesis for dynamical systems")]
struct Cli {
    /// Override the problem file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Verifier worker threads (0 = library default).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Bit-reproducible mode: sequential verification, zeroed timings.
    #[arg(long, global = true)]
    sequential: bool,
    /// Machine-readable verdicts on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a certificate for a problem file.
    Synth {
        problem: PathBuf,
        /// Where to write the result file.
        #[arg(short, long, default_value = "result.toml")]
        out: PathBuf,
        /// Override the iteration budget.
        #[arg(long)]
        max_iters: Option<usize>,
        /// Override the training epochs per iteration.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-verify the weights in a result file against a problem file.
    Check { problem: PathBuf, result: PathBuf },
    /// Export one verification condition as an SMT-LIB 2 query.
    ExportSmt {
        problem: PathBuf,
        result: PathBuf,
        /// Condition id, e.g. stab/dec.
        #[arg(long)]
        vc: String,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print a CSV lattice of certificate (and controller) values.
    Grid {
        result: PathBuf,
        /// Points per axis.
        #[arg(long, default_value_t = 20)]
        resolution: usize,
    },
    /// Run every problem file in a directory and print a summary table.
    Bench { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Polynomial,
    Dreal,
}

impl From<Mode> for SmtMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Polynomial => SmtMode::Polynomial,
            Mode::Dreal => SmtMode::Dreal,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(cli: &Cli, path: &Path) -> Result<(String, LoadedProblem)> {
    let text = read(path)?;
    let mut loaded = load_problem(&text).with_context(|| path.display().to_string())?;
    if let Some(seed) = cli.seed {
        loaded.problem.seed = seed;
    }
    if let Some(workers) = cli.workers {
        loaded.config.verifier.workers = workers;
    }
    loaded.config.verifier.sequential = cli.sequential;
    loaded.config.verifier.seed = loaded.problem.seed;
    Ok((text, loaded))
}

fn print_verdicts(json: bool, status: &str, records: &[VerdictRecord]) {
    if json {
        let doc = serde_json::json!({ "status": status, "verdicts": records });
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    } else {
        println!("status: {status}");
        for r in records {
            let detail = match r.verdict.as_str() {
                "falsified" => format!(
                    " at {:?} (violation {:.3e})",
                    r.counterexample.as_deref().unwrap_or(&[]),
                    r.violation.unwrap_or(f64::NAN)
                ),
                "unknown" => format!(" ({} undecided boxes)", r.undecided.unwrap_or(0)),
                _ => String::new(),
            };
            println!("  {:<14} {}{detail}", r.id, r.verdict);
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth {
            problem,
            out,
            max_iters,
            epochs,
        } => {
            let (text, mut loaded) = load(cli, problem)?;
            if let Some(n) = max_iters {
                loaded.config.max_iterations = *n;
            }
            if let Some(n) = epochs {
                loaded.config.train.epochs = *n;
            }
            let start = Instant::now();
            let result = run_cegis(&loaded.problem, &loaded.config)
                .map_err(|e| anyhow!("synthesis failed: {e}"))?;
            let wall_ms = if cli.sequential {
                0
            } else {
                start.elapsed().as_millis() as u64
            };
            let file = build_result(&text, &result, wall_ms);
            std::fs::write(out, file.to_toml())
                .with_context(|| format!("writing {}", out.display()))?;
            print_verdicts(cli.json, &file.status, &file.verdicts);
            Ok(if result.certified { 0 } else { 1 })
        }
        Command::Check { problem, result } => {
            let (text, loaded) = load(cli, problem)?;
            let file = ResultFile::from_toml(&read(result)?)?;
            if file.problem_digest != problem_digest(&text) {
                eprintln!(
                    "warning: result was produced for a different problem file \
                     (digest mismatch); verdicts apply to the given problem"
                );
            }
            let cert = file.certificate_network()?;
            let ctrl = file.controller_network()?;
            let verdicts =
                check_certificate(&loaded.problem, &cert, ctrl.as_ref(), &loaded.config.verifier)
                    .map_err(|e| anyhow!("check failed: {e}"))?;
            let records: Vec<VerdictRecord> = verdicts
                .iter()
                .map(|(id, v)| verdict_record(id, v))
                .collect();
            let ok = verdicts.iter().all(|(_, v)| v.is_certified());
            print_verdicts(
                cli.json,
                if ok { "certified" } else { "not-certified" },
                &records,
            );
            Ok(if ok { 0 } else { 1 })
        }
        Command::ExportSmt {
            problem,
            result,
            vc,
            mode,
            out,
        } => {
            let (_, loaded) = load(cli, problem)?;
            let file = ResultFile::from_toml(&read(result)?)?;
            let cert = file.certificate_network()?;
            let ctrl = file.controller_network()?;
            let vcs = compile_rules(&loaded.problem, &cert, ctrl.as_ref())
                .map_err(|e| anyhow!("compiling conditions: {e}"))?;
            let condition = vcs.iter().find(|c| &c.id == vc).ok_or_else(|| {
                anyhow!(
                    "unknown condition id `{vc}`; valid ids: {}",
                    vcs.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join(", ")
                )
            })?;
            let text = export_smtlib(condition, (*mode).into())?;
            check_smtlib_syntax(&text).map_err(|e| anyhow!("internal export check: {e}"))?;
            std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(0)
        }
        Command::Grid { result, resolution } => {
            let file = ResultFile::from_toml(&read(result)?)?;
            let loaded = load_problem(&file.problem.text).context("embedded problem")?;
            let cert = file.certificate_network()?;
            let ctrl = file.controller_network()?;
            let n = loaded.problem.system.n_state;
            if !(1..=3).contains(&n) {
                bail!("grid export supports 1 to 3 state dimensions, problem has {n}");
            }
            if *resolution == 0 {
                bail!("resolution must be positive");
            }
            let axes: Vec<Vec<f64>> = loaded
                .problem
                .domain
                .base
                .intervals()
                .iter()
                .map(|iv| {
                    (0..*resolution)
                        .map(|k| {
                            if *resolution == 1 {
                                iv.midpoint()
                            } else {
                                iv.lo + (iv.hi - iv.lo) * k as f64 / (*resolution - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
            header.push("v".into());
            if ctrl.is_some() {
                header.extend((1..=loaded.problem.system.n_input).map(|i| format!("u{i}")));
            }
            println!("{}", header.join(","));
            let mut idx = vec![0usize; n];
            loop {
                let x: Vec<f64> = idx.iter().enumerate().map(|(d, &k)| axes[d][k]).collect();
                let v = cert
                    .forward_scalar(&x)
                    .map_err(|e| anyhow!("evaluating certificate: {e}"))?;
                let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
                row.push(format!("{v}"));
                if let Some(ctrl) = &ctrl {
                    let u = ctrl
                        .forward(&x)
                        .map_err(|e| anyhow!("evaluating controller: {e}"))?;
                    row.extend(u.iter().map(|v| format!("{v}")));
                }
                println!("{}", row.join(","));
                // Odometer increment over the lattice.
                let mut d = n;
                loop {
                    if d == 0 {
                        return Ok(0);
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < *resolution {
                        break;
                    }
                    idx[d] = 0;
                }
            }
        }
        Command::Bench { dir } => {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                bail!("no problem files (*.toml) in {}", dir.display());
            }
            println!(
                "{:<28} {:<14} {:>10} {:>12} {:>10}",
                "problem", "status", "iterations", "boxes", "wall_ms"
            );
            let mut errored = false;
            for path in &entries {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let outcome = (|| -> Result<(String, usize, usize, u64)> {
                    let (_, mut loaded) = load(cli, path)?;
                    loaded.config.verifier.sequential = cli.sequential;
                    let start = Instant::now();
                    let result = run_cegis(&loaded.problem, &loaded.config)
                        .map_err(|e| anyhow!("{e}"))?;
                    let wall = if cli.sequential {
                        0
                    } else {
                        start.elapsed().as_millis() as u64
                    };
                    let boxes = result
                        .verdicts
                        .iter()
                        .map(|(_, v)| match v {
                            certkit::verifier::Verdict::Certified { boxes_processed }
                            | certkit::verifier::Verdict::Unknown {
                                boxes_processed, ..
                            }
                            | certkit::verifier::Verdict::ResourceExhausted {
                                boxes_processed,
                            } => *boxes_processed,
                            certkit::verifier::Verdict::Falsified { .. } => 0,
                        })
                        .sum();
                    let status = if result.certified {
                        "certified"
                    } else {
                        "not-certified"
                    };
                    Ok((status.to_string(), result.iterations.len(), boxes, wall))
                })();
                match outcome {
                    Ok((status, iters, boxes, wall)) => println!(
                        "{name:<28} {status:<14} {iters:>10} {boxes:>12} {wall:>10}"
                    ),
                    Err(e) => {
                        errored = true;
                        println!("{name:<28} {:<14} {:>10} {:>12} {:>10}", "ERROR", "-", "-", "-");
                        eprintln!("{name}: {e:#}");
                    }
                }
            }
            Ok(if errored { 2 } else { 0 })
        }
    }
}
