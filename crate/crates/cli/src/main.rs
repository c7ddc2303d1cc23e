use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use copronn::pipeline::{self, ExplanationsDocument, HyperParamOverrides, Method};
use copronn::store::{self, load_manifest};
use copronn::synth::{generate_corpus, write_corpus, SyntheticSpec};
use copronn::{Error, Manifest, Metric};

/// Concept-based explanations with concept prototypes and nearest neighbors.
#[derive(Debug, Parser)]
#[command(name = "copronn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth.
    Synth {
        /// Corpus spec (JSON). Omit to use the built-in wild-bee layout.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Prototype and sample noise for the built-in layout.
        #[arg(long, default_value_t = 0.3, conflicts_with = "spec")]
        sigma: f64,
        /// Seed for the built-in layout.
        #[arg(long, default_value_t = 0, conflicts_with = "spec")]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain samples and write explanations.json.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Unlabeled samples (embedding file); defaults to the manifest's samples.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Evaluate an explanations file against the manifest's ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several methods on the manifest's samples and compare them.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [MethodArg::Copronn, MethodArg::Tcav, MethodArg::Ibd])]
        methods: Vec<MethodArg>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Select the N highest-scoring concepts instead of thresholding.
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Copronn,
    Tcav,
    Ibd,
}

impl std::fmt::Display for MethodArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Copronn => Method::CoProNN,
            MethodArg::Tcav => Method::Tcav,
            MethodArg::Ibd => Method::Ibd,
        }
    }
}

impl RunArgs {
    fn load(&self) -> copronn::Result<Manifest> {
        let mut manifest = load_manifest(&self.manifest)?;
        HyperParamOverrides {
            k: self.k,
            t: self.t,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            top_n: self.top_n,
            metric: self.metric.map(|m| match m {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Cosine => Metric::Cosine,
            }),
        }
        .apply(&mut manifest)?;
        Ok(manifest)
    }
}

fn write_file(out: &Path, name: &str, body: &str) -> copronn::Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    store::write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

fn run(cli: Cli) -> copronn::Result<Vec<PathBuf>> {
    match cli.command {
        Command::Synth {
            spec,
            sigma,
            seed,
            out,
        } => {
            let spec = match spec {
                Some(path) => SyntheticSpec::load(&path)?,
                None => {
                    let spec = SyntheticSpec::wild_bees(sigma, seed);
                    spec.validate()?;
                    spec
                }
            };
            let corpus = generate_corpus(&spec)?;
            Ok(vec![write_corpus(&corpus, &out)?])
        }
        Command::Explain { run, samples } => {
            let manifest = run.load()?;
            let extra = samples
                .as_deref()
                .map(pipeline::load_unlabeled_samples)
                .transpose()?;
            let doc = pipeline::explain(&manifest, extra.as_deref())?;
            Ok(vec![write_file(&run.out, "explanations.json", &doc.to_json()?)?])
        }
        Command::Eval {
            manifest,
            predictions,
            out,
        } => {
            let manifest = load_manifest(&manifest)?;
            let doc = ExplanationsDocument::load(&predictions)?;
            let report = pipeline::evaluate_predictions(&manifest, &doc)?;
            pipeline::write_report(&report, &out)
        }
        Command::Compare { run, methods } => {
            let manifest = run.load()?;
            let mut selected: Vec<Method> = Vec::new();
            for m in methods.into_iter().map(Method::from) {
                if !selected.contains(&m) {
                    selected.push(m);
                }
            }
            let comparison = pipeline::compare(&manifest, &selected)?;
            pipeline::write_comparison(&comparison, &manifest.concept_names(), &run.out)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COPRONN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                info!("wrote {}", p.display());
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
