//! `cliquebatch` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure. `CBM_THREADS` sets the worker thread count (default 1).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use cliquebatch::batchopt::{self, BatchAssignment, BatchParams};
use cliquebatch::cliques::{self, CliqueAssignment, CliqueParams};
use cliquebatch::dataset::{self, EvalAnnotations, FeatureFormat, FeatureMatrix, SyntheticSpec};
use cliquebatch::eval;
use cliquebatch::pipeline::{self, PipelineConfig};
use cliquebatch::rng::{self, Stage};
use cliquebatch::similarity::{self, SimilarityMatrix};
use cliquebatch::trainer::{self, EmbeddingModel, TrainParams};
use cliquebatch::Error;

#[derive(Debug, Parser)]
#[command(name = "cliquebatch", version, about = "Unsupervised exemplar similarity learning")]
struct Cli {
    /// Seed for every random stage; overrides seeds in spec, params and config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature matrix.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// `.csv` for text, anything else for the binary format.
        #[arg(long)]
        out: PathBuf,
        /// Also write retrieval annotations derived from the ground-truth labels.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Whitened dot-product similarities.
    Similarity {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = similarity::DEFAULT_SHRINKAGE)]
        shrinkage: f64,
    },
    /// Grow and merge compact cliques.
    Cliques {
        #[arg(long)]
        similarity: PathBuf,
        /// Only used to check the sample count.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign cliques to batches.
    Batches {
        #[arg(long)]
        similarity: PathBuf,
        #[arg(long)]
        cliques: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Fail with exit code 3 instead of using the best iterate when CCCP does not settle.
        #[arg(long)]
        strict: bool,
    },
    /// Train the embedding network.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        cliques: PathBuf,
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the alternating rounds end to end.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-query ROC/AUC of a similarity matrix.
    Eval {
        #[arg(long)]
        similarity: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Per-query CSV.
        #[arg(long)]
        out: PathBuf,
        /// JSON summary; printed to stdout either way.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Exhaustive batch assignment for small instances.
    Oracle {
        #[arg(long)]
        similarity: PathBuf,
        #[arg(long)]
        cliques: PathBuf,
        #[arg(long)]
        b: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Lib(Error),
    Unsettled(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn load_features(path: &Path) -> Result<FeatureMatrix, Error> {
    dataset::load_features(path, FeatureFormat::from_path(path))
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out, annotations } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text).map_err(Error::from)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let (features, labels) = dataset::generate_synthetic(&spec)?;
            dataset::save_features(&features, &out, FeatureFormat::from_path(&out))?;
            if let Some(path) = annotations {
                EvalAnnotations::from_labels(&labels, None, spec.seed).save(path)?;
            }
        }
        Command::Similarity { features, out, shrinkage } => {
            let features = load_features(&features)?;
            let s = similarity::similarity_kernel(&similarity::whiten(&features, shrinkage)?);
            s.save(out)?;
        }
        Command::Cliques { similarity, features, params, out } => {
            let s = SimilarityMatrix::load(similarity)?;
            if let Some(f) = features {
                let n = load_features(&f)?.n_samples();
                if n != s.n() {
                    return Err(Error::ShapeMismatch(format!("{n} samples but a {}×{} similarity", s.n(), s.n())).into());
                }
            }
            let params: CliqueParams = read_json(params.as_deref())?;
            let assignment = cliques::build_cliques(&s, &params)?;
            log::info!("{} cliques", assignment.k());
            assignment.save(out)?;
        }
        Command::Batches { similarity, cliques, params, out, log, strict } => {
            let s = SimilarityMatrix::load(similarity)?;
            let c = CliqueAssignment::load(cliques)?;
            let mut params: BatchParams = read_json(params.as_deref())?;
            if let Some(seed) = seed {
                params.seed = seed;
            }
            let s_prime = batchopt::condition_psd(&batchopt::clique_similarity(&s, &c)?)?;
            let result = batchopt::cccp_solve(&s_prime, &c.membership(), &params)?;
            if let Some(path) = log {
                batchopt::write_cccp_log(&result.log, path)?;
            }
            if strict && !result.converged {
                return Err(Failure::Unsettled(result.iterations()));
            }
            batchopt::round_assignment(&result.relaxed, params.r)?.save(out)?;
        }
        Command::Train { features, cliques, batches, params, out, log } => {
            let features = load_features(&features)?;
            let c = CliqueAssignment::load(cliques)?;
            let x = BatchAssignment::load(batches)?;
            let mut params: TrainParams = read_json(params.as_deref())?;
            if let Some(seed) = seed {
                params.seed = seed;
            }
            let mut init = rng::stream(params.seed, 0, Stage::TrainInit);
            let model = EmbeddingModel::random(features.dim(), params.hidden, c.k(), &mut init);
            let mut sampling = rng::stream(params.seed, 0, Stage::TrainSampling);
            let outcome = trainer::train(model, &features, &c, &x, &params, &mut sampling)?;
            outcome.model.save(out)?;
            if let Some(path) = log {
                trainer::write_loss_log(&outcome.losses, path)?;
            }
        }
        Command::Pipeline { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let out = out
                .or_else(|| cfg.output_dir.as_ref().map(|d| base.join(d)))
                .ok_or_else(|| Error::InvalidParams("no output directory (--out or output_dir)".into()))?;
            let (features, annotations) = cfg.resolve_inputs(base)?;
            let result = pipeline::run_pipeline(&features, &cfg, annotations.as_ref(), Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&result.summary).map_err(Error::from)?);
        }
        Command::Eval { similarity, annotations, out, summary } => {
            let s = SimilarityMatrix::load(similarity)?;
            let ann = EvalAnnotations::load(annotations)?;
            let report = eval::evaluate_retrieval(&s, &ann)?;
            report.write_csv(out)?;
            if let Some(path) = summary {
                report.write_summary(path)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary()).map_err(Error::from)?);
        }
        Command::Oracle { similarity, cliques, b, r, params, out } => {
            let s = SimilarityMatrix::load(similarity)?;
            let c = CliqueAssignment::load(cliques)?;
            let params: BatchParams = read_json(params.as_deref())?;
            let s_prime = batchopt::condition_psd(&batchopt::clique_similarity(&s, &c)?)?;
            let res = batchopt::brute_force_batches(&s_prime, &c.membership(), b, r, &params)?;
            let summary = serde_json::json!({
                "objective": res.objective,
                "median_objective": res.median_objective,
                "evaluated": res.evaluated,
                "rows": res.assignment.rows(),
            });
            if let Some(path) = out {
                res.assignment.save(path)?;
            }
            println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
        }
    }
    Ok(())
}

fn init_threads() {
    let threads = std::env::var("CBM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Unsettled(iters)) => {
            eprintln!("error: CCCP did not settle within {iters} iterations");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
