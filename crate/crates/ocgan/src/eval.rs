//! Novelty scoring, ROC/AUC, and protocol/ablation experiment runners.
//!
//! A test image's novelty score is its evaluation-mode reconstruction MSE.
//! Out-of-class examples (label 0) are the detection positives: AUC is the
//! probability that a random out-of-class score exceeds a random in-class
//! score, ties at half weight — the Mann–Whitney statistic. The emitted ROC
//! curve is tie-aware, so its trapezoidal area matches exactly.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{build_split, DataError, ImageBatch, RawDataset, SplitPlan};
use crate::model::{reconstruction_errors, ModelConfig, ModelError, Networks};
use crate::nn::ParameterStore;
use crate::training::{train, Ablation, TrainConfig, Trainer, TrainError};
use crate::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores must contain both labels to compute AUC")]
    DegenerateLabels,
    #[error("novelty score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> EvalError {
    let context = context.into();
    move |source| EvalError::Io { context, source }
}

/// One scored test example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    /// Reconstruction MSE; higher means more novel.
    pub score: f64,
    /// 1 = in-class, 0 = out-of-class.
    pub label: u8,
}

/// Threshold-sweep ROC curve from `(0,0)` to `(1,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false_positive_rate, true_positive_rate)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AucResult {
    pub auc: f64,
    /// Detection positives: out-of-class examples.
    pub n_pos: usize,
    /// Detection negatives: in-class examples.
    pub n_neg: usize,
}

/// Novelty score of a single image: `MSE(image, De(En(image)))`,
/// evaluation mode, no noise.
pub fn novelty_score<R: Real>(
    nets: &Networks,
    store: &ParameterStore<R>,
    image: &ImageBatch<R>,
) -> f64 {
    assert_eq!(image.len(), 1, "novelty_score takes a single image");
    reconstruction_errors(nets, store, image.data())[0]
}

/// Novelty scores for a whole batch (identical to per-image scoring).
pub fn score_batch<R: Real>(
    nets: &Networks,
    store: &ParameterStore<R>,
    images: &ImageBatch<R>,
    labels: &[u8],
) -> Result<Vec<ScoreRecord>, EvalError> {
    let errors = reconstruction_errors(nets, store, images.data());
    let mut records = Vec::with_capacity(errors.len());
    for (i, (&score, &label)) in errors.iter().zip(labels.iter()).enumerate() {
        if !score.is_finite() {
            return Err(EvalError::NonFiniteScore(i));
        }
        records.push(ScoreRecord { score, label });
    }
    Ok(records)
}

/// Mann–Whitney AUC with tie handling, plus the tie-aware ROC curve.
pub fn compute_auc(records: &[ScoreRecord]) -> Result<(RocCurve, AucResult), EvalError> {
    let n_out = records.iter().filter(|r| r.label == 0).count();
    let n_in = records.len() - n_out;
    if n_out == 0 || n_in == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    for (i, r) in records.iter().enumerate() {
        if !r.score.is_finite() {
            return Err(EvalError::NonFiniteScore(i));
        }
    }

    // Rank-sum with average ranks over ties (ascending scores).
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));
    let mut rank_sum_out = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // Ranks i+1 ..= j share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for r in &sorted[i..j] {
            if r.label == 0 {
                rank_sum_out += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_out - (n_out * (n_out + 1)) as f64 / 2.0;
    let auc = u / (n_out as f64 * n_in as f64);

    // Tie-aware sweep, descending thresholds; ties advance in one step.
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize; // out-of-class called novel
    let mut fp = 0usize; // in-class called novel
    let mut i = sorted.len();
    while i > 0 {
        let score = sorted[i - 1].score;
        while i > 0 && sorted[i - 1].score == score {
            if sorted[i - 1].label == 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        points.push((fp as f64 / n_in as f64, tp as f64 / n_out as f64));
    }

    Ok((
        RocCurve { points },
        AucResult {
            auc,
            n_pos: n_out,
            n_neg: n_in,
        },
    ))
}

/// Everything a single protocol run produces.
pub struct ProtocolOutcome<R: Real> {
    pub records: Vec<ScoreRecord>,
    pub roc: RocCurve,
    pub auc: AucResult,
    pub trainer: Trainer<R>,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_sha256: &'a str,
    dataset_seed: u64,
    train_seed: u64,
    known_class: u8,
    protocol: String,
    ablation: &'a str,
    iterations: usize,
    best_val_mse: Option<f64>,
    auc: f64,
    n_pos: usize,
    n_neg: usize,
    wall_clock_seconds: f64,
}

/// Hash of the fully resolved run configuration, for the summary document.
pub fn config_hash(
    model: &ModelConfig,
    train_config: &TrainConfig,
    plan: &SplitPlan,
) -> Result<String, serde_json::Error> {
    let doc = serde_json::json!({
        "model": model,
        "train": train_config,
        "split": plan,
    });
    let text = crate::jsonio::to_sorted_string(&doc)?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<(), EvalError> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(io_ctx(format!("create {}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "index,score,label").map_err(io_ctx("write scores"))?;
    for (i, r) in records.iter().enumerate() {
        writeln!(out, "{},{},{}", i, r.score, r.label).map_err(io_ctx("write scores"))?;
    }
    Ok(())
}

pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<(), EvalError> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(io_ctx(format!("create {}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "fpr,tpr").map_err(io_ctx("write roc"))?;
    for (fpr, tpr) in &roc.points {
        writeln!(out, "{fpr},{tpr}").map_err(io_ctx("write roc"))?;
    }
    Ok(())
}

/// Build the split, train, score the test set with the best checkpoint, and
/// (optionally) write `scores.csv`, `roc.csv`, and `summary.json`.
pub fn run_protocol<R: Real>(
    pool: &RawDataset,
    test_pool: Option<&RawDataset>,
    plan: &SplitPlan,
    model_config: &ModelConfig,
    train_config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<ProtocolOutcome<R>, EvalError> {
    let started = Instant::now();
    let split = build_split::<R>(pool, test_pool, plan)?;
    let trainer = train(&split, model_config, train_config.clone())?;
    let records = score_batch(
        trainer.networks(),
        trainer.best_parameters(),
        &split.test_images,
        &split.test_labels,
    )?;
    let (roc, auc) = compute_auc(&records)?;
    let wall_seconds = started.elapsed().as_secs_f64();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_ctx(format!("create {}", dir.display())))?;
        write_scores_csv(&dir.join("scores.csv"), &records)?;
        write_roc_csv(&dir.join("roc.csv"), &roc)?;
        let hash = config_hash(model_config, trainer.config(), plan)?;
        let best = trainer.best_val_mse();
        let summary = RunSummary {
            config_sha256: &hash,
            dataset_seed: plan.seed,
            train_seed: trainer.config().seed,
            known_class: plan.known_class,
            protocol: plan.protocol.to_string(),
            ablation: trainer.config().ablation.label(),
            iterations: trainer.iteration(),
            best_val_mse: best.is_finite().then_some(best),
            auc: auc.auc,
            n_pos: auc.n_pos,
            n_neg: auc.n_neg,
            wall_clock_seconds: wall_seconds,
        };
        crate::jsonio::write_sorted(&dir.join("summary.json"), &summary)
            .map_err(io_ctx("write summary.json"))?;
    }

    Ok(ProtocolOutcome {
        records,
        roc,
        auc,
        trainer,
        wall_seconds,
    })
}

/// Mean AUC per ablation variant, in the ladder's fixed row order.
pub const ABLATION_LADDER: [Ablation; 4] = [
    Ablation::AeOnly,
    Ablation::AeLatentDisc,
    Ablation::AeBothDiscs,
    Ablation::Full,
];

pub struct AblationRow {
    pub ablation: Ablation,
    pub mean_auc: f64,
    pub per_class: Vec<(u8, f64)>,
}

/// Run every ladder variant over the given classes with a matched budget.
pub fn run_ablation<R: Real>(
    pool: &RawDataset,
    test_pool: Option<&RawDataset>,
    classes: &[u8],
    plan_template: &SplitPlan,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for &ablation in &ABLATION_LADDER {
        let mut per_class = Vec::new();
        for &class in classes {
            let plan = SplitPlan {
                known_class: class,
                ..plan_template.clone()
            };
            let config = TrainConfig {
                ablation,
                ..train_config.clone()
            };
            let run_dir = out_dir.map(|d| d.join(format!("{}-class{}", ablation.label(), class)));
            let outcome =
                run_protocol::<R>(pool, test_pool, &plan, model_config, config, run_dir.as_deref())?;
            per_class.push((class, outcome.auc.auc));
        }
        let mean_auc = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
        rows.push(AblationRow {
            ablation,
            mean_auc,
            per_class,
        });
    }
    if let Some(dir) = out_dir {
        use std::io::Write;
        let path = dir.join("ablation.csv");
        let file =
            std::fs::File::create(&path).map_err(io_ctx(format!("create {}", path.display())))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "variant,mean_auc").map_err(io_ctx("write ablation"))?;
        for row in &rows {
            writeln!(out, "{},{}", row.ablation.label(), row.mean_auc)
                .map_err(io_ctx("write ablation"))?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, label: u8) -> ScoreRecord {
        ScoreRecord { score, label }
    }

    #[test]
    fn perfect_separation_gives_auc_one() {
        let records = vec![rec(0.9, 0), rec(0.1, 1)];
        let (_, auc) = compute_auc(&records).unwrap();
        assert_eq!(auc.auc, 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let records = vec![rec(0.5, 0), rec(0.5, 1), rec(0.5, 0), rec(0.5, 1)];
        let (roc, auc) = compute_auc(&records).unwrap();
        assert!((auc.auc - 0.5).abs() < 1e-15);
        assert!((roc.trapezoid_area() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pairwise_example_from_hand_count() {
        // out {0.8, 0.3}, in {0.4, 0.2}: 3 of 4 pairs correctly ordered.
        let records = vec![rec(0.8, 0), rec(0.3, 0), rec(0.4, 1), rec(0.2, 1)];
        let (_, auc) = compute_auc(&records).unwrap();
        assert!((auc.auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_label_input_is_degenerate() {
        let records = vec![rec(0.8, 1), rec(0.3, 1)];
        assert!(matches!(
            compute_auc(&records),
            Err(EvalError::DegenerateLabels)
        ));
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let records = vec![
            rec(0.9, 0),
            rec(0.7, 1),
            rec(0.7, 0),
            rec(0.3, 1),
            rec(0.1, 1),
        ];
        let (roc, _) = compute_auc(&records).unwrap();
        assert_eq!(*roc.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
        for w in roc.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
    }
}
