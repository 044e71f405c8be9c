use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qvar::basis::{coarsening_matrix, decompose, reconstruct_grid, SchauderCoefficients};
use qvar::experiments::output::{curve_table, path_table, Table};
use qvar::experiments::{content_hash, run, ExperimentConfig, ExperimentId, RunOutput, SequenceSpec};
use qvar::partition::{coarsen_by_rule, CoarseningRule, RefiningSequence, SequenceJson};
use qvar::qv::{ab_weights, qv_from_coefficients, qv_matrix_direct, Method};
use qvar::synthesis::{sample_coefficients, CoefficientLaw, LawKind, LawSpec};

#[derive(Parser)]
#[command(name = "qvar", version, about = "Quadratic variation along refining partitions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config overlaid on the experiment defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; without it results go to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Deepest level to evaluate (also the truncation N)
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Clone)]
struct SeqArgs {
    /// dyadic, triadic, kadic:K, split[:F], mod3, or a path to a sequence JSON
    #[arg(long, default_value = "dyadic")]
    sequence: String,
}

#[derive(Subcommand)]
enum Command {
    /// Build a partition sequence and print its levels
    GenPartition {
        #[command(flatten)]
        seq: SeqArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize a path from a coefficient law
    Synth {
        #[command(flatten)]
        seq: SeqArgs,
        /// gaussian_iid, rademacher, uniform_scaled, deterministic_schied or constant:V
        #[arg(long, default_value = "gaussian_iid")]
        law: String,
        /// Time change such as phi:t^2
        #[arg(long)]
        weights: Option<String>,
        #[arg(long, default_value_t = 1)]
        dims: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Schauder coefficients of sampled values on the deepest level
    Decompose {
        #[command(flatten)]
        seq: SeqArgs,
        /// Path CSV with columns t, x1[, x2, ...]
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Quadratic variation of a path or of a coefficient file
    Qv {
        #[command(flatten)]
        seq: SeqArgs,
        /// Path CSV or coefficient JSON
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "direct")]
        method: QvMethod,
        /// Comma-separated evaluation times; default is the level grid
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Coarsen a sequence and print the coarse levels and transform matrix
    Coarsen {
        #[command(flatten)]
        seq: SeqArgs,
        #[arg(long, value_enum, default_value = "mod3")]
        rule: Rule,
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce one of the four figures
    Figure {
        #[arg(value_parser = ["fig1", "fig2", "fig3", "fig4"])]
        id: String,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo mean and spread of the level-n quadratic variation
    McQv {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo covariance of the synthesized path
    McCov {
        #[command(flatten)]
        common: Common,
    },
    /// Compare quadratic variation along a sequence and its coarsening
    McCoarsen {
        #[command(flatten)]
        common: Common,
    },
    /// Sup of level-to-level increments against the coefficient bound
    Increments {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full invariant suite
    Verify {
        /// Scale every a weight by 1 + FAULT in the oracle comparison
        #[arg(long)]
        fault: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum QvMethod {
    Direct,
    Coefficient,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Identity,
    Mod3,
    HalfLevel,
}

impl From<Rule> for CoarseningRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Identity => CoarseningRule::Identity,
            Rule::Mod3 => CoarseningRule::Mod3,
            Rule::HalfLevel => CoarseningRule::HalfLevel,
        }
    }
}

fn sequence_spec(text: &str) -> Result<SequenceSpec> {
    let (name, arg) = text.split_once(':').map_or((text, None), |(a, b)| (a, Some(b)));
    Ok(match (name, arg) {
        ("dyadic", None) => SequenceSpec::Dyadic,
        ("triadic", None) => SequenceSpec::Kadic { k: 3 },
        ("kadic", Some(k)) => SequenceSpec::Kadic { k: k.parse().context("k-adic base")? },
        ("split", None) => SequenceSpec::Split {
            fraction: qvar::partition::DEFAULT_SPLIT_FRACTION,
        },
        ("split", Some(f)) => SequenceSpec::Split {
            fraction: f.parse().context("split fraction")?,
        },
        ("mod3", None) => SequenceSpec::Mod3,
        _ if Path::new(text).exists() => SequenceSpec::File { path: text.into() },
        _ => bail!("unknown sequence '{text}'"),
    })
}

fn load_sequence(spec: &SequenceSpec, levels: usize) -> Result<RefiningSequence> {
    Ok(match spec {
        SequenceSpec::File { path } => {
            let doc: SequenceJson = serde_json::from_str(&fs::read_to_string(path)?)?;
            let seq = RefiningSequence::from_json(&doc)?;
            seq.truncate(levels.min(seq.depth()))?
        }
        other => other.build(levels)?,
    })
}

fn parse_law(name: &str, weights: Option<String>, seed: u64, n: usize) -> Result<CoefficientLaw> {
    let spec = match name.strip_prefix("constant:") {
        Some(v) => LawSpec {
            kind: "constant".into(),
            seed,
            n,
            weights,
            value: Some(v.parse().context("constant law value")?),
        },
        None => {
            LawKind::from_name(name)?;
            LawSpec {
                kind: name.into(),
                seed,
                n,
                weights,
                value: None,
            }
        }
    };
    Ok(CoefficientLaw::from_spec(&spec, 1.0)?)
}

/// Writes `body` to `out/name` or prints it.
fn emit(out: Option<&Path>, name: &str, body: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn with_meta(mut v: Value, meta: &[(String, String)]) -> Value {
    for (k, val) in meta {
        v[k] = Value::String(val.clone());
    }
    v
}

fn primitive_meta(args: &Value, seed: Option<u64>) -> Vec<(String, String)> {
    let mut m = vec![("config_hash".to_string(), content_hash(args))];
    if let Some(s) = seed {
        m.push(("seed".into(), s.to_string()));
    }
    m
}

/// Reads a path CSV and finds the level whose grid it samples.
fn read_path(path: &Path, seq: &RefiningSequence) -> Result<(Vec<Vec<f64>>, usize)> {
    let table = Table::parse(&fs::read_to_string(path)?)?;
    let times = table.column("t").context("path CSV needs a 't' column")?;
    let n = (0..=seq.depth())
        .find(|&n| seq.level(n).points().len() == times.len())
        .with_context(|| format!("{} rows match no level of the sequence", times.len()))?;
    if times.iter().zip(seq.level(n).points()).any(|(a, b)| (a - b).abs() > 1e-12) {
        bail!("path times do not match level {n} of the sequence");
    }
    let cols: Vec<Vec<f64>> = table
        .header
        .iter()
        .filter(|h| *h != "t")
        .map(|h| table.column(h).unwrap())
        .collect();
    if cols.is_empty() {
        bail!("path CSV has no value columns");
    }
    Ok((cols, n))
}

fn apply_overrides(cfg: &mut ExperimentConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(n) = c.levels {
        cfg.n = n;
        cfg.levels = match cfg.experiment {
            id if id.is_figure() => vec![n],
            ExperimentId::McCov => vec![n],
            ExperimentId::Increments => (0..n).collect(),
            ExperimentId::McQv | ExperimentId::McCoarsen => (n.saturating_sub(6).max(1)..=n).collect(),
            _ => (1..=n).collect(),
        };
    }
    if let Some(dir) = &c.out {
        cfg.out_dir = Some(dir.display().to_string());
    }
}

fn experiment(id: ExperimentId, c: &Common, fault: Option<f64>) -> Result<bool> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, Some(id))?,
        None => ExperimentConfig::defaults(id),
    };
    if cfg.experiment != id {
        bail!("config names experiment {} but the command runs {id}", cfg.experiment);
    }
    apply_overrides(&mut cfg, c);
    if fault.is_some() {
        cfg.fault = fault;
    }
    let result = run(&cfg)?;
    report(&result, c)?;
    Ok(result.passed())
}

fn report(result: &RunOutput, c: &Common) -> Result<()> {
    if let Some(dir) = &c.out {
        result.write_to(dir)?;
    }
    match c.format {
        Format::Json => print!("{}", result.report_json()),
        Format::Csv => {
            println!("name,passed,measured,threshold");
            for v in &result.verdicts {
                println!("{},{},{:.16e},{:.16e}", v.name, v.passed, v.measured, v.threshold);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenPartition { seq, common } => {
            let n = common.levels.unwrap_or(6);
            let s = load_sequence(&sequence_spec(&seq.sequence)?, n)?;
            let meta = primitive_meta(&json!({"cmd": "gen-partition", "sequence": seq.sequence, "levels": n}), None);
            match common.format {
                Format::Json => {
                    let v = with_meta(serde_json::to_value(s.to_json())?, &meta);
                    emit(common.out.as_deref(), "partition.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
                }
                Format::Csv => {
                    let mut t = Table::new(meta, &["level", "index", "t"]);
                    for (lvl, p) in s.levels().iter().enumerate() {
                        for (i, &x) in p.points().iter().enumerate() {
                            t.push(vec![lvl as f64, i as f64, x]);
                        }
                    }
                    emit(common.out.as_deref(), "partition.csv", &t.to_csv())?;
                }
            }
        }
        Command::Synth {
            seq,
            law,
            weights,
            dims,
            common,
        } => {
            let n = common.levels.unwrap_or(12);
            let seed = common.seed.unwrap_or(0);
            let s = load_sequence(&sequence_spec(&seq.sequence)?, n)?;
            let l = parse_law(&law, weights.clone(), seed, n)?;
            let c = sample_coefficients(&l, &s, n, seed, dims)?;
            let meta = primitive_meta(
                &json!({"cmd": "synth", "sequence": seq.sequence, "law": law, "weights": weights, "dims": dims, "N": n, "seed": seed}),
                Some(seed),
            );
            match common.format {
                Format::Json => {
                    let v = with_meta(serde_json::to_value(&c)?, &meta);
                    emit(common.out.as_deref(), "coefficients.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
                }
                Format::Csv => {
                    let x = reconstruct_grid(&c, &s, n)?;
                    let t = path_table(s.level(n).points(), &x, meta).with_meta("law", l.kind.name());
                    emit(common.out.as_deref(), "path.csv", &t.to_csv())?;
                }
            }
        }
        Command::Decompose { seq, input, common } => {
            let spec = sequence_spec(&seq.sequence)?;
            let deep = common.levels.unwrap_or(16);
            let s = load_sequence(&spec, deep)?;
            let (cols, n) = read_path(&input, &s)?;
            let c = decompose(&cols, &s, n)?;
            let meta = primitive_meta(&json!({"cmd": "decompose", "sequence": seq.sequence, "input": input}), None);
            let v = with_meta(serde_json::to_value(&c)?, &meta);
            emit(common.out.as_deref(), "coefficients.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
        }
        Command::Qv {
            seq,
            input,
            method,
            times,
            common,
        } => {
            let spec = sequence_spec(&seq.sequence)?;
            let text = fs::read_to_string(&input)?;
            let is_json = text.trim_start().starts_with('{');
            let (coeffs, big_n, s) = if is_json {
                let c: SchauderCoefficients = serde_json::from_str(&text)?;
                let s = load_sequence(&spec, c.n)?;
                (c.clone(), c.n, s)
            } else {
                let s = load_sequence(&spec, common.levels.map_or(16, |l| l.max(16)))?;
                let (cols, n) = read_path(&input, &s)?;
                (decompose(&cols, &s, n)?, n, s)
            };
            let s = s.truncate(big_n)?;
            let n = common.levels.unwrap_or(big_n);
            if n < 1 || n > big_n {
                bail!("level {n} outside 1..={big_n}");
            }
            let times = times.unwrap_or_else(|| s.level(n).points().to_vec());
            let curve = match method {
                QvMethod::Direct => {
                    let x = reconstruct_grid(&coeffs, &s, big_n)?;
                    qv_matrix_direct(&x, &s, big_n, n, &times)?
                }
                QvMethod::Coefficient => qv_from_coefficients(&coeffs, &ab_weights(&s, n, n, &times)?)?,
            };
            let meta = primitive_meta(
                &json!({"cmd": "qv", "sequence": seq.sequence, "input": input, "level": n, "method": match method { QvMethod::Direct => Method::Direct.as_str(), QvMethod::Coefficient => Method::Coefficient.as_str() }, "times": times}),
                None,
            );
            match common.format {
                Format::Json => {
                    let v = with_meta(serde_json::to_value(&curve)?, &meta);
                    emit(common.out.as_deref(), "qv.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
                }
                Format::Csv => emit(common.out.as_deref(), "qv.csv", &curve_table(&curve, meta).to_csv())?,
            }
        }
        Command::Coarsen { seq, rule, common } => {
            let n = common.levels.unwrap_or(6);
            let s = load_sequence(&sequence_spec(&seq.sequence)?, n)?;
            let map = coarsen_by_rule(&s, rule.into())?;
            let meta = primitive_meta(&json!({"cmd": "coarsen", "sequence": seq.sequence, "rule": CoarseningRule::from(rule), "levels": n}), None);
            let a = coarsening_matrix(&s, &map, n)?;
            let v = with_meta(serde_json::to_value(map.sigma.to_json())?, &meta);
            match common.format {
                Format::Json => {
                    let doc = json!({"sigma": v, "keep_indices": map.keep_indices});
                    emit(common.out.as_deref(), "coarsening.json", &(serde_json::to_string_pretty(&doc)? + "\n"))?;
                }
                Format::Csv => {
                    let mut body: String = meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
                    body.push_str(&a.to_csv());
                    emit(common.out.as_deref(), "transform.csv", &body)?;
                    if common.out.is_some() {
                        emit(common.out.as_deref(), "sigma.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
                    }
                }
            }
        }
        Command::Figure { id, common } => return experiment(id.parse()?, &common, None),
        Command::McQv { common } => return experiment(ExperimentId::McQv, &common, None),
        Command::McCov { common } => return experiment(ExperimentId::McCov, &common, None),
        Command::McCoarsen { common } => return experiment(ExperimentId::McCoarsen, &common, None),
        Command::Increments { common } => return experiment(ExperimentId::Increments, &common, None),
        Command::Verify { fault, common } => return experiment(ExperimentId::Verify, &common, fault),
    }
    Ok(true)
}
