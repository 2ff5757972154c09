//! Alternating rounds: similarities → cliques → batches → training →
//! imputed similarities, with every intermediate artifact written to disk.
//!
//! Output layout:
//!
//! ```text
//! <out>/round_<i>/{cliques.json, batches.json, model.bin, loss.csv, cccp.csv, similarity.bin}
//! <out>/diagnostics.csv   round,auc_if_labels,spectrum_k90,reliable_pairs_mean
//! <out>/summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::batchopt::{self, BatchAssignment, BatchParams, CccpResult};
use crate::cliques::{self, CliqueAssignment, CliqueParams};
use crate::dataset::{self, EvalAnnotations, FeatureFormat, FeatureMatrix, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng::{self, Stage};
use crate::similarity::{self, SimilarityMatrix};
use crate::trainer::{self, EmbeddingModel, LossRecord, TrainParams};

/// Cumulative spectral mass used for the concentration diagnostic.
pub const SPECTRUM_MASS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rounds: usize,
    pub seed: u64,
    pub shrinkage: f64,
    pub lower_q: f64,
    pub upper_q: f64,
    pub cliques: CliqueParams,
    pub batches: BatchParams,
    pub train: TrainParams,
    /// Generate the input instead of reading `features`.
    pub synthetic: Option<SyntheticSpec>,
    pub features: Option<PathBuf>,
    /// Retrieval ground truth. Synthetic inputs derive it from their labels.
    pub annotations: Option<PathBuf>,
    /// Cap on positives and negatives per query when deriving annotations.
    pub max_annotations_per_side: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            seed: 42,
            shrinkage: similarity::DEFAULT_SHRINKAGE,
            lower_q: similarity::DEFAULT_LOWER_Q,
            upper_q: similarity::DEFAULT_UPPER_Q,
            cliques: CliqueParams::default(),
            batches: BatchParams::default(),
            train: TrainParams::default(),
            synthetic: None,
            features: None,
            annotations: None,
            max_annotations_per_side: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidParams("rounds must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::InvalidParams("shrinkage must be in [0, 1]".into()));
        }
        if !(0.0 < self.lower_q && self.lower_q < self.upper_q && self.upper_q < 1.0) {
            return Err(Error::InvalidParams("need 0 < lower_q < upper_q < 1".into()));
        }
        self.cliques.validate()?;
        self.train.validate()?;
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Features and optional annotations named by the config. Relative paths
    /// resolve against `base`.
    pub fn resolve_inputs(&self, base: &Path) -> Result<(FeatureMatrix, Option<EvalAnnotations>)> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let (features, labels) = match (&self.synthetic, &self.features) {
            (Some(spec), None) => {
                let (f, labels) = dataset::generate_synthetic(spec)?;
                (f, Some(labels))
            }
            (None, Some(path)) => {
                let path = resolve(path);
                (dataset::load_features(&path, FeatureFormat::from_path(&path))?, None)
            }
            _ => {
                return Err(Error::InvalidParams(
                    "config needs exactly one of `synthetic` and `features`".into(),
                ))
            }
        };
        let annotations = match (&self.annotations, labels) {
            (Some(path), _) => Some(EvalAnnotations::load(resolve(path))?),
            (None, Some(labels)) => Some(EvalAnnotations::from_labels(
                &labels,
                self.max_annotations_per_side,
                self.seed,
            )),
            (None, None) => None,
        };
        if let Some(a) = &annotations {
            a.validate(features.n_samples())?;
        }
        Ok((features, annotations))
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub cliques: CliqueAssignment,
    pub batches: BatchAssignment,
    pub cccp: CccpResult,
    pub model: EmbeddingModel,
    pub losses: Vec<LossRecord>,
    pub embeddings: FeatureMatrix,
    pub similarity: SimilarityMatrix,
    /// Reliable pairs per batch, judged by the bands of the round's input `S`.
    pub reliable_pairs: eval::ReliablePairs,
}

/// One round from the current similarities. `inputs` are the (whitened)
/// features the network sees; `previous` is the last round's model, whose
/// hidden layer is kept while the output layer is re-initialized.
pub fn run_round(
    inputs: &FeatureMatrix,
    current: &SimilarityMatrix,
    config: &PipelineConfig,
    round: usize,
    previous: Option<EmbeddingModel>,
) -> Result<RoundOutput> {
    if current.n() != inputs.n_samples() {
        return Err(Error::ShapeMismatch(format!(
            "similarity over {} samples, features over {}",
            current.n(),
            inputs.n_samples()
        )));
    }
    let round_id = round as u64;
    let cliques = cliques::build_cliques(current, &config.cliques)?;
    let k = cliques.k();
    if k < 2 {
        return Err(Error::DegenerateProblem(format!(
            "{k} clique(s); the softmax needs at least two classes"
        )));
    }
    log::info!("round {round}: {k} cliques");

    let s_prime = batchopt::condition_psd(&batchopt::clique_similarity(current, &cliques)?)?;
    let batch_params = BatchParams {
        seed: rng::stream(config.seed, round_id, Stage::BatchInit).next_u64(),
        ..config.batches
    };
    let cccp = batchopt::cccp_solve(&s_prime, &cliques.membership(), &batch_params)?;
    let batches = batchopt::round_assignment(&cccp.relaxed, batch_params.r)?;
    log::info!(
        "round {round}: CCCP objective {:.6} after {} iterations",
        cccp.objective,
        cccp.iterations()
    );

    let mut init_rng = rng::stream(config.seed, round_id, Stage::TrainInit);
    let model = match previous {
        Some(mut m) if m.input_dim() == inputs.dim() && m.hidden_dim() == config.train.hidden => {
            m.reinit_head(k, &mut init_rng);
            m
        }
        _ => EmbeddingModel::random(inputs.dim(), config.train.hidden, k, &mut init_rng),
    };
    let mut sampling = rng::stream(config.seed, round_id, Stage::TrainSampling);
    let outcome = trainer::train(model, inputs, &cliques, &batches, &config.train, &mut sampling)?;
    let embeddings = trainer::embed(&outcome.model, inputs)?;
    let similarity = similarity::correlation_kernel(&embeddings)?;

    let bands = similarity::reliability_bands(current, config.lower_q, config.upper_q)?;
    let reliable_pairs = eval::reliable_pairs_per_batch(current, &cliques, &batches, &bands);
    Ok(RoundOutput {
        cliques,
        batches,
        cccp,
        model: outcome.model,
        losses: outcome.losses,
        embeddings,
        similarity,
        reliable_pairs,
    })
}

impl RoundOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cliques.save(dir.join("cliques.json"))?;
        self.batches.save(dir.join("batches.json"))?;
        self.model.save(dir.join("model.bin"))?;
        trainer::write_loss_log(&self.losses, dir.join("loss.csv"))?;
        batchopt::write_cccp_log(&self.cccp.log, dir.join("cccp.csv"))?;
        self.similarity.save(dir.join("similarity.bin"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub cliques: usize,
    /// Mean retrieval AUC of the round's output similarities.
    pub auc: Option<f64>,
    pub spectrum_k90: usize,
    pub reliable_pairs_mean: f64,
    pub cccp_iterations: usize,
    pub cccp_converged: bool,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_samples: usize,
    pub init_auc: Option<f64>,
    pub init_spectrum_k90: usize,
    pub rounds: Vec<RoundDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub embeddings: FeatureMatrix,
    pub similarity: SimilarityMatrix,
    pub summary: PipelineSummary,
}

fn k90(s: &SimilarityMatrix) -> Result<usize> {
    Ok(similarity::eigen_count_for_mass(&similarity::spectrum_cumulative(s)?, SPECTRUM_MASS))
}

fn mean_auc(s: &SimilarityMatrix, annotations: Option<&EvalAnnotations>) -> Result<Option<f64>> {
    annotations
        .map(|a| eval::evaluate_retrieval(s, a).map(|r| r.mean_auc))
        .transpose()
}

/// Whitened-feature similarities followed by `config.rounds` rounds. With
/// `out`, each round's artifacts, `diagnostics.csv` and `summary.json` are
/// written there.
pub fn run_pipeline(
    features: &FeatureMatrix,
    config: &PipelineConfig,
    annotations: Option<&EvalAnnotations>,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let whitened = similarity::whiten(features, config.shrinkage)?;
    let mut current = similarity::similarity_kernel(&whitened);
    let init_auc = mean_auc(&current, annotations)?;
    let init_k90 = k90(&current)?;
    log::info!("initial similarities: auc {init_auc:?}, k90 {init_k90}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut previous = None;
    let mut embeddings = whitened.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let output = run_round(&whitened, &current, config, round, previous.take())?;
        if let Some(dir) = out {
            output.write(&dir.join(format!("round_{round}")))?;
        }
        let diag = RoundDiagnostics {
            round,
            cliques: output.cliques.k(),
            auc: mean_auc(&output.similarity, annotations)?,
            spectrum_k90: k90(&output.similarity)?,
            reliable_pairs_mean: output.reliable_pairs.mean,
            cccp_iterations: output.cccp.iterations(),
            cccp_converged: output.cccp.converged,
            final_loss: output.losses.last().map(|r| r.loss),
        };
        log::info!(
            "round {round}: auc {:?}, k90 {}, reliable pairs {:.2}",
            diag.auc,
            diag.spectrum_k90,
            diag.reliable_pairs_mean
        );
        rounds.push(diag);
        current = output.similarity;
        embeddings = output.embeddings;
        previous = Some(output.model);
    }

    let summary = PipelineSummary {
        n_samples: features.n_samples(),
        init_auc,
        init_spectrum_k90: init_k90,
        rounds,
    };
    if let Some(dir) = out {
        write_diagnostics(&summary, &dir.join("diagnostics.csv"))?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(PipelineOutput {
        embeddings,
        similarity: current,
        summary,
    })
}

pub fn write_diagnostics(summary: &PipelineSummary, path: &Path) -> Result<()> {
    let mut out = String::from("round,auc_if_labels,spectrum_k90,reliable_pairs_mean\n");
    for r in &summary.rounds {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.round, auc, r.spectrum_k90, r.reliable_pairs_mean));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
