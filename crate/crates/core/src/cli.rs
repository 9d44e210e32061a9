//! Command-line front end: strict JSON configs in, JSON or CSV results out.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{information_matrix, Design, TargetVector};
use crate::elfving::plot_boundary;
use crate::model::{build_model, gradcheck_model, ModelConfig, ModelSpec};
use crate::simulate::covariance_check;
use crate::solver::{solve, target_from_preset, Preset, SolveOptions};
use crate::verify::{trace_csv, verify_design, Sensitivity, DEFAULT_GRID, DEFAULT_TOL};

/// Exit status for a check that ran but did not pass.
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {field}: {message}")]
    Config {
        path: String,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Args(#[from] clap::Error),
}

/// Complete configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub solve: SolveOptions,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default)]
    pub simulate: SimulateOptions,
    #[serde(default)]
    pub elfving: ElfvingOptions,
}

/// A named preset or an explicit `c`, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTarget", into = "RawTarget")]
pub enum TargetConfig {
    Preset(Preset),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
}

impl TryFrom<RawTarget> for TargetConfig {
    type Error = String;

    fn try_from(raw: RawTarget) -> Result<Self, String> {
        let unexpected = |name: &str, present: bool| {
            if present {
                Err(format!("`{name}` does not apply to this target form"))
            } else {
                Ok(())
            }
        };
        match (raw.preset.as_deref(), raw.c) {
            (Some(_), Some(_)) => Err("give either `preset` or `c`, not both".into()),
            (None, None) => Err("missing `preset` or `c`".into()),
            (None, Some(c)) => {
                unexpected("e", raw.e.is_some())?;
                unexpected("index", raw.index.is_some())?;
                unexpected("v", raw.v.is_some())?;
                Ok(TargetConfig::Explicit(c))
            }
            (Some(name), None) => {
                let preset = match name {
                    "med" => {
                        unexpected("index", raw.index.is_some())?;
                        unexpected("v", raw.v.is_some())?;
                        Preset::Med {
                            e: raw.e.ok_or("preset `med` needs `e`")?,
                        }
                    }
                    "auc" => {
                        unexpected("e", raw.e.is_some())?;
                        unexpected("index", raw.index.is_some())?;
                        unexpected("v", raw.v.is_some())?;
                        Preset::Auc
                    }
                    "single" => {
                        unexpected("e", raw.e.is_some())?;
                        unexpected("v", raw.v.is_some())?;
                        Preset::Single {
                            index: raw.index.ok_or("preset `single` needs `index`")?,
                        }
                    }
                    "linear" => {
                        unexpected("e", raw.e.is_some())?;
                        unexpected("index", raw.index.is_some())?;
                        Preset::Linear {
                            v: raw.v.ok_or("preset `linear` needs `v`")?,
                        }
                    }
                    other => {
                        return Err(format!(
                            "unknown preset `{other}`, expected one of med, auc, single, linear"
                        ))
                    }
                };
                Ok(TargetConfig::Preset(preset))
            }
        }
    }
}

impl From<TargetConfig> for RawTarget {
    fn from(t: TargetConfig) -> Self {
        match t {
            TargetConfig::Explicit(c) => RawTarget {
                c: Some(c),
                ..RawTarget::default()
            },
            TargetConfig::Preset(p) => match p {
                Preset::Med { e } => RawTarget {
                    preset: Some("med".into()),
                    e: Some(e),
                    ..RawTarget::default()
                },
                Preset::Auc => RawTarget {
                    preset: Some("auc".into()),
                    ..RawTarget::default()
                },
                Preset::Single { index } => RawTarget {
                    preset: Some("single".into()),
                    index: Some(index),
                    ..RawTarget::default()
                },
                Preset::Linear { v } => RawTarget {
                    preset: Some("linear".into()),
                    v: Some(v),
                    ..RawTarget::default()
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub grid: usize,
    pub tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            grid: DEFAULT_GRID,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            n: 200,
            reps: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElfvingOptions {
    /// One-based coordinates to project onto.
    pub dims: Vec<usize>,
    pub n_x: usize,
    pub n_eps: usize,
}

impl Default for ElfvingOptions {
    fn default() -> Self {
        ElfvingOptions {
            dims: vec![1, 2],
            n_x: 201,
            n_eps: 32,
        }
    }
}

/// A validated configuration: the model is built and the target resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub model: ModelSpec,
    pub target: TargetVector,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let field = err.path().to_string();
        CliError::Config {
            path: path.display().to_string(),
            field: if field == "." { "(root)".into() } else { field },
            message: err.into_inner().to_string(),
        }
    })
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<Loaded, CliError> {
    let config: Config = parse_json(path, &read(path)?)?;
    let config_err = |field: &str, message: String| CliError::Config {
        path: path.display().to_string(),
        field: field.into(),
        message,
    };
    let model = build_model(&config.model).map_err(|e| {
        let text = e.to_string();
        match text.split_once(": ") {
            Some((field, rest)) if field.starts_with("model.") => config_err(field, rest.into()),
            _ => config_err("model", text),
        }
    })?;
    let target = match &config.target {
        TargetConfig::Explicit(c) => {
            if c.len() != model.p() {
                return Err(config_err(
                    "target.c",
                    format!("expected {} entries, got {}", model.p(), c.len()),
                ));
            }
            TargetVector::new(c.clone()).map_err(|e| config_err("target.c", e.to_string()))?
        }
        TargetConfig::Preset(p) => {
            target_from_preset(&model, p).map_err(|e| config_err("target", e.to_string()))?
        }
    };
    Ok(Loaded {
        config,
        model,
        target,
    })
}

/// Reads a design file; a `solve` result is accepted and its `design` used.
pub fn load_design(path: &Path) -> Result<Design, CliError> {
    let text = read(path)?;
    let value: serde_json::Value = parse_json(path, &text)?;
    if let Some(inner) = value.get("design") {
        parse_json(path, &inner.to_string())
    } else {
        parse_json(path, &text)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cdesign", version, about = "Locally c-optimal designs via the generalized Elfving set")]
struct Cli {
    /// Worker threads for grid evaluation and simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a locally c-optimal design.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_x: Option<usize>,
        #[arg(long)]
        n_eps: Option<usize>,
        #[arg(long)]
        max_rounds: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        merge_tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        verify_grid: Option<usize>,
    },
    /// Check a design against the equivalence theorem.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Also write the sensitivity function as CSV (`x,phi`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Emit Elfving-set plot data as CSV.
    Elfving {
        #[command(flatten)]
        common: Common,
        /// One-based coordinates, e.g. `1,2` or `1,2,3`.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        n_x: Option<usize>,
        #[arg(long)]
        n_eps: Option<usize>,
    },
    /// Information matrix, criterion and estimability of a design.
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
    },
    /// Compare forward-mode derivatives with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Monte Carlo check of the asymptotic variance.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Design to simulate; the optimal design is computed when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write fitted parameters per replication as CSV.
        #[arg(long)]
        estimates: Option<PathBuf>,
    },
}

struct Output {
    text: String,
    ok: bool,
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn invalid<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Invalid(e.to_string())
}

#[derive(Serialize)]
struct InfoReport {
    design: Design,
    information_matrix: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    rank: usize,
    estimable: bool,
    range_residual: f64,
    criterion: Option<f64>,
}

fn execute(command: Command) -> Result<(Output, Option<PathBuf>), CliError> {
    match command {
        Command::Solve {
            common,
            n_x,
            n_eps,
            max_rounds,
            tol,
            merge_tol,
            seed,
            verify_grid,
        } => {
            let loaded = load_config(&common.config)?;
            let mut opts = loaded.config.solve.clone();
            opts.n_x = n_x.unwrap_or(opts.n_x);
            opts.n_eps = n_eps.unwrap_or(opts.n_eps);
            opts.max_rounds = max_rounds.unwrap_or(opts.max_rounds);
            opts.tol = tol.unwrap_or(opts.tol);
            opts.merge_tol = merge_tol.or(opts.merge_tol);
            opts.seed = seed.unwrap_or(opts.seed);
            opts.verify_grid = verify_grid.unwrap_or(opts.verify_grid);
            let result = solve(&loaded.model, &loaded.target, &opts).map_err(invalid)?;
            let ok = result.converged;
            Ok((
                Output {
                    text: json(&result),
                    ok,
                },
                common.out,
            ))
        }
        Command::Verify {
            common,
            design,
            grid,
            tol,
            trace,
        } => {
            let loaded = load_config(&common.config)?;
            let design = load_design(&design)?;
            let grid = grid.unwrap_or(loaded.config.verify.grid);
            let tol = tol.unwrap_or(loaded.config.verify.tol);
            let cert =
                verify_design(&loaded.model, &design, &loaded.target, grid, tol).map_err(invalid)?;
            if let Some(path) = trace {
                let sens = Sensitivity::new(&loaded.model, &design, &loaded.target).map_err(invalid)?;
                let points = sens.trace(&loaded.model.grid(grid)).map_err(invalid)?;
                write_file(&path, &trace_csv(&points))?;
            }
            let ok = cert.pass;
            Ok((
                Output {
                    text: json(&cert),
                    ok,
                },
                common.out,
            ))
        }
        Command::Elfving {
            common,
            dims,
            n_x,
            n_eps,
        } => {
            let loaded = load_config(&common.config)?;
            let o = &loaded.config.elfving;
            let dims = dims.unwrap_or_else(|| o.dims.clone());
            if dims.contains(&0) {
                return Err(CliError::Invalid("--dims are one-based".into()));
            }
            let zero_based: Vec<usize> = dims.iter().map(|d| d - 1).collect();
            let data = plot_boundary(
                &loaded.model,
                &zero_based,
                n_x.unwrap_or(o.n_x),
                n_eps.unwrap_or(o.n_eps),
                &loaded.target,
            )
            .map_err(invalid)?;
            Ok((
                Output {
                    text: data.to_csv(),
                    ok: true,
                },
                common.out,
            ))
        }
        Command::Info { common, design } => {
            let loaded = load_config(&common.config)?;
            let design = load_design(&design)?;
            let info = information_matrix(&loaded.model, &design).map_err(invalid)?;
            let m = info.matrix();
            let report = InfoReport {
                information_matrix: (0..m.nrows())
                    .map(|i| m.row(i).iter().copied().collect())
                    .collect(),
                eigenvalues: info.eigenvalues().iter().copied().collect(),
                rank: info.rank(),
                estimable: info.estimable(&loaded.target),
                range_residual: info.range_residual(loaded.target.as_vector()),
                criterion: info.criterion(&loaded.target).ok(),
                design,
            };
            Ok((
                Output {
                    text: json(&report),
                    ok: true,
                },
                common.out,
            ))
        }
        Command::Gradcheck {
            common,
            samples,
            seed,
            step,
        } => {
            let loaded = load_config(&common.config)?;
            let report = gradcheck_model(&loaded.model, samples, seed, step);
            let ok = report.pass;
            Ok((
                Output {
                    text: json(&report),
                    ok,
                },
                common.out,
            ))
        }
        Command::Simulate {
            common,
            design,
            n,
            reps,
            seed,
            estimates,
        } => {
            let loaded = load_config(&common.config)?;
            let o = &loaded.config.simulate;
            let design = match design {
                Some(path) => load_design(&path)?,
                None => {
                    solve(&loaded.model, &loaded.target, &loaded.config.solve)
                        .map_err(invalid)?
                        .design
                }
            };
            let report = covariance_check(
                &loaded.model,
                &design,
                &loaded.target,
                n.unwrap_or(o.n),
                reps.unwrap_or(o.reps),
                seed.unwrap_or(o.seed),
            )
            .map_err(invalid)?;
            if let Some(path) = estimates {
                write_file(&path, &report.estimates_csv())?;
            }
            Ok((
                Output {
                    text: json(&report),
                    ok: true,
                },
                common.out,
            ))
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 1;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    if let Some(n) = cli.threads {
        // a global pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok((output, path)) => {
            let written = match path {
                Some(p) => write_file(&p, &output.text),
                None => stdout.write_all(output.text.as_bytes()).map_err(|e| CliError::Io {
                    path: "<stdout>".into(),
                    message: e.to_string(),
                }),
            };
            if let Err(e) = written {
                let _ = writeln!(stderr, "error: {e}");
                return 1;
            }
            if output.ok {
                0
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
