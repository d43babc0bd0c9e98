//! `simplexfm`: train, sample and evaluate simplex flow-matching models.
//!
//! Failures print one JSON line `{"error": {"kind": .., "message": ..}}` to
//! stderr. Usage and configuration errors exit with status 2, everything else
//! with 1.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simplex_flow::data::{parse_compositions, read_compositions, DatasetHandle};
use simplex_flow::density::{categorical_probabilities, log_density_simplex, sample, DivergenceConfig};
use simplex_flow::experiments::{run_experiment_to, ExperimentSpec};
use simplex_flow::flow::{train, TrainConfig};
use simplex_flow::geometry::{sphere_map, Bijection, BijectionKind};
use simplex_flow::model::ModelCheckpoint;
use simplex_flow::ode::SolverConfig;
use simplex_flow::Error;

#[derive(Parser)]
#[command(name = "simplexfm", version, about = "Flow matching on the probability simplex")]
struct Cli {
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "SIMPLEXFM_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes checkpoint.json and train_log.csv.
    Train {
        config: PathBuf,
    },
    /// Draw samples from a checkpoint; writes samples.csv.
    Sample {
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 10_000)]
        n: usize,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Log-densities of the compositions in a CSV file; writes density.json.
    Density {
        checkpoint: PathBuf,
        points: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        divergence: DivergenceArgs,
    },
    /// Categorical probabilities from the density at the component means;
    /// writes catprobs.json.
    Catprobs {
        checkpoint: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        divergence: DivergenceArgs,
    },
    /// Run an experiment grid; writes metrics.csv and manifest.json.
    Experiment {
        spec: PathBuf,
    },
    /// Map a CSV of compositions through a bijection and print the result.
    Transforms {
        #[arg(long, value_parser = parse_bijection)]
        bijection: BijectionKind,
        /// Input CSV; standard input when omitted.
        input: Option<PathBuf>,
        /// Write transformed.csv under --out instead of printing.
        #[arg(long)]
        save: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Euler,
    Dopri5,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_enum)]
    solver: Option<Method>,
    /// Euler steps.
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    atol: f64,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
}

impl SolverArgs {
    fn config(&self, default: Method) -> SolverConfig {
        match self.solver.unwrap_or(default) {
            Method::Euler => SolverConfig::euler(self.steps),
            Method::Dopri5 => SolverConfig::dopri5(self.atol, self.rtol),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DivMode {
    Auto,
    Exact,
    Hutchinson,
}

#[derive(Args)]
struct DivergenceArgs {
    #[arg(long, value_enum, default_value = "auto")]
    divergence: DivMode,
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

impl DivergenceArgs {
    fn config(&self) -> DivergenceConfig {
        match self.divergence {
            DivMode::Auto => DivergenceConfig::Auto,
            DivMode::Exact => DivergenceConfig::Exact,
            DivMode::Hutchinson => DivergenceConfig::Hutchinson { probes: self.probes },
        }
    }
}

fn parse_bijection(s: &str) -> Result<BijectionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidDimension(_) | Error::DimensionMismatch { .. } => "dimension",
        Error::Domain(_) => "domain",
        Error::Parameter(_) => "parameter",
        Error::Config(_) | Error::Json(_) => "config",
        Error::StaleCache => "internal",
        Error::Integration { .. } => "integration",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
    }
}

fn fail(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            fail("usage", e.kind().to_string().as_str());
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            fail("config", &e.to_string());
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            fail(kind, &e.to_string());
            if matches!(kind, "config" | "parse") {
                eprintln!("run `simplexfm --help` for usage");
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    Ok(std::fs::read_to_string(path)?)
}

/// The config document is a [`TrainConfig`] with an extra `data` entry.
fn parse_train_document(text: &str) -> Result<(TrainConfig, DatasetHandle), Error> {
    let mut doc: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let data = doc
        .as_object_mut()
        .and_then(|m| m.remove("data"))
        .ok_or_else(|| Error::Config("config needs a \"data\" entry".into()))?;
    let data: DatasetHandle = serde_json::from_value(data).map_err(|e| Error::Config(format!("data: {e}")))?;
    let cfg = TrainConfig::from_json(&doc.to_string())?;
    Ok((cfg, data))
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, Error> {
    ModelCheckpoint::load(path)
}

fn rng_for(cli: &Cli) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0))
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train { config } => {
            let (mut cfg, data) = parse_train_document(&read_text(config)?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
            let dataset = data.load(base, &mut data_rng)?;
            let model = train(&dataset.data, &cfg)?;
            std::fs::create_dir_all(&cli.out)?;
            model.checkpoint()?.save(&cli.out.join("checkpoint.json"))?;
            model.log.save_csv(&cli.out.join("train_log.csv"))?;
            if let Some(p) = dataset.truth {
                std::fs::write(cli.out.join("truth.json"), serde_json::to_string_pretty(&p)?)?;
            }
            println!("{}", cli.out.join("checkpoint.json").display());
        }
        Command::Sample { checkpoint, n, solver } => {
            let ck = load_checkpoint(checkpoint)?;
            let field = ck.field()?;
            let mut rng = rng_for(cli);
            let s = sample(&field, &ck.model, *n, &solver.config(Method::Euler), &mut rng)?;
            std::fs::create_dir_all(&cli.out)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(cli.out.join("samples.csv"))?);
            let header: Vec<String> = (1..=ck.model.parts).map(|i| format!("x{i}")).collect();
            write!(w, "{}", header.join(","))?;
            writeln!(w, "{}", if s.categories.is_some() { ",category" } else { "" })?;
            for (i, x) in s.compositions.iter().enumerate() {
                let row: Vec<String> = x.values().iter().map(|v| v.to_string()).collect();
                write!(w, "{}", row.join(","))?;
                match &s.categories {
                    Some(c) => writeln!(w, ",{}", c[i])?,
                    None => writeln!(w)?,
                }
            }
            w.flush()?;
            if s.projected > 0 {
                log::warn!("{} samples were projected back onto the simplex", s.projected);
            }
        }
        Command::Density { checkpoint, points, solver, divergence } => {
            let ck = load_checkpoint(checkpoint)?;
            let field = ck.field()?;
            let xs = read_compositions(points)?;
            let mut rng = rng_for(cli);
            let lq = log_density_simplex(&field, &ck.model, &xs, &solver.config(Method::Dopri5), &divergence.config(), &mut rng)?;
            let records: Vec<_> = xs
                .iter()
                .zip(&lq)
                .map(|(x, l)| serde_json::json!({ "x": x.values(), "log_q_theta": l }))
                .collect();
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join("density.json"), serde_json::to_string_pretty(&records)?)?;
        }
        Command::Catprobs { checkpoint, solver, divergence } => {
            let ck = load_checkpoint(checkpoint)?;
            let field = ck.field()?;
            let mut rng = rng_for(cli);
            let est = categorical_probabilities(&field, &ck.model, &solver.config(Method::Dopri5), &divergence.config(), &mut rng)?;
            std::fs::create_dir_all(&cli.out)?;
            let text = serde_json::to_string_pretty(&est)?;
            std::fs::write(cli.out.join("catprobs.json"), &text)?;
            println!("{}", serde_json::to_string(&est.normalized)?);
        }
        Command::Experiment { spec } => {
            let mut spec = ExperimentSpec::from_json(&read_text(spec)?)?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let out = match &spec.output_dir {
                Some(dir) => cli.out.join(dir),
                None => cli.out.clone(),
            };
            let report = run_experiment_to(&spec, &out)?;
            println!(
                "{} runs, {} failed, metrics in {}",
                report.manifest.runs,
                report.manifest.failures,
                out.join(&report.manifest.metrics_file).display()
            );
        }
        Command::Transforms { bijection, input, save } => {
            let xs = match input {
                Some(p) => read_compositions(p)?,
                None => parse_compositions(std::io::stdin().lock())?,
            };
            let parts = xs[0].parts();
            let mut rows = Vec::with_capacity(xs.len() + 1);
            let width = if *bijection == BijectionKind::Sphere { parts } else { parts - 1 };
            let mut header: Vec<String> = (1..=width).map(|i| format!("z{i}")).collect();
            header.push(if *bijection == BijectionKind::Sphere { "log_volume".into() } else { "log_abs_det".into() });
            rows.push(header.join(","));
            let map = (*bijection != BijectionKind::Sphere).then(|| Bijection::new(*bijection, parts)).transpose()?;
            for x in &xs {
                let (z, ld) = match &map {
                    Some(b) => {
                        let (z, ld) = b.forward(x)?;
                        (z.into_inner(), ld)
                    }
                    None => sphere_map(x),
                };
                let mut row: Vec<String> = z.iter().map(|v| v.to_string()).collect();
                row.push(ld.to_string());
                rows.push(row.join(","));
            }
            let text = rows.join("\n") + "\n";
            if *save {
                std::fs::create_dir_all(&cli.out)?;
                std::fs::write(cli.out.join("transformed.csv"), text)?;
            } else {
                print!("{text}");
            }
        }
    }
    Ok(())
}
