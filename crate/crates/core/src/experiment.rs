//! Evaluation protocol: repeated random train/test splits, per-class
//! accuracies, and six-number summaries over simulation runs.
//!
//! A within-domain experiment draws a fresh 75/25 split per run (seeded as
//! base_seed + run index), trains a model on the larger part, and scores the
//! held-out part. A transfer experiment keeps the test corpus fixed and
//! retrains per run, so variation comes only from training stochasticity.
//! Independent runs may execute in parallel; aggregation is keyed by run
//! index and therefore independent of scheduling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClassLabel;
use crate::model::{train, ModelError, TrainConfig};
use crate::raster::GrayscaleImage;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("summarize needs a nonempty value list")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How each run's train/test split is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.25,
            stratified: false,
            seed: 0,
        }
    }
}

/// Accuracy overall and per true class on one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Correct classification rate among truly collusive items.
    pub true_positive_rate: f64,
    /// Correct classification rate among truly competitive items.
    pub true_negative_rate: f64,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EvalMetrics {
    pub fn from_outcomes(outcomes: &[(ClassLabel, ClassLabel)]) -> Self {
        let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
        for &(truth, predicted) in outcomes {
            match (truth, predicted) {
                (ClassLabel::Collusive, ClassLabel::Collusive) => tp += 1,
                (ClassLabel::Collusive, ClassLabel::Competitive) => fne += 1,
                (ClassLabel::Competitive, ClassLabel::Competitive) => tn += 1,
                (ClassLabel::Competitive, ClassLabel::Collusive) => fp += 1,
            }
        }
        let n_pos = tp + fne;
        let n_neg = tn + fp;
        EvalMetrics {
            accuracy: (tp + tn) as f64 / (n_pos + n_neg) as f64,
            true_positive_rate: tp as f64 / n_pos as f64,
            true_negative_rate: tn as f64 / n_neg as f64,
            true_positives: tp,
            true_negatives: tn,
            false_positives: fp,
            false_negatives: fne,
        }
    }
}

/// Six order statistics of a value list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub minimum: f64,
    pub first_quartile: f64,
    pub median: f64,
    pub mean: f64,
    pub third_quartile: f64,
    pub maximum: f64,
}

/// Quantile by linear interpolation between order statistics at position
/// 1 + (n-1)q; `values` must be sorted ascending.
fn quantile_sorted(values: &[f64], q: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[n - 1]
    }
}

/// Minimum, quartiles, median, mean, and maximum of a value list.
pub fn summarize(values: &[f64]) -> Result<SummaryStats, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(SummaryStats {
        minimum: sorted[0],
        first_quartile: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        mean,
        third_quartile: quantile_sorted(&sorted, 0.75),
        maximum: sorted[sorted.len() - 1],
    })
}

/// Aggregated accuracy distributions over the simulation runs, one row per
/// outcome class plus the overall rate, mirrored by [`SimulationSummary::to_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub overall: SummaryStats,
    pub collusive: SummaryStats,
    pub competitive: SummaryStats,
    pub runs: usize,
    /// Evaluated corpus sizes: all graphs, collusive, competitive.
    pub observations: [usize; 3],
    /// Per-run metrics in run order, for downstream inspection.
    pub per_run: Vec<EvalMetrics>,
}

impl SimulationSummary {
    fn from_runs(per_run: Vec<EvalMetrics>, observations: [usize; 3]) -> Self {
        let overall: Vec<f64> = per_run.iter().map(|m| m.accuracy).collect();
        let tpr: Vec<f64> = per_run.iter().map(|m| m.true_positive_rate).collect();
        let tnr: Vec<f64> = per_run.iter().map(|m| m.true_negative_rate).collect();
        SimulationSummary {
            overall: summarize(&overall).expect("runs nonempty"),
            collusive: summarize(&tpr).expect("runs nonempty"),
            competitive: summarize(&tnr).expect("runs nonempty"),
            runs: per_run.len(),
            observations,
            per_run,
        }
    }

    /// Aligned plain-text table with the columns Minimum, 1st quartile,
    /// Median, Mean, 3rd quartile, Maximum, Observations.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12}{:>9}{:>14}{:>8}{:>8}{:>14}{:>9}{:>14}\n",
            "", "Minimum", "1st quartile", "Median", "Mean", "3rd quartile", "Maximum",
            "Observations"
        ));
        for (name, stats, obs) in [
            ("All graphs", &self.overall, self.observations[0]),
            ("Collusion", &self.collusive, self.observations[1]),
            ("Competition", &self.competitive, self.observations[2]),
        ] {
            out.push_str(&format!(
                "{:<12}{:>9.3}{:>14.3}{:>8.3}{:>8.3}{:>14.3}{:>9.3}{:>14}\n",
                name,
                stats.minimum,
                stats.first_quartile,
                stats.median,
                stats.mean,
                stats.third_quartile,
                stats.maximum,
                obs
            ));
        }
        out
    }

    /// Machine-readable CSV with the same rows and columns as the table.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("metric,minimum,first_quartile,median,mean,third_quartile,maximum,observations\n");
        for (name, stats, obs) in [
            ("all_graphs", &self.overall, self.observations[0]),
            ("collusion", &self.collusive, self.observations[1]),
            ("competition", &self.competitive, self.observations[2]),
        ] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                name,
                stats.minimum,
                stats.first_quartile,
                stats.median,
                stats.mean,
                stats.third_quartile,
                stats.maximum,
                obs
            ));
        }
        out
    }
}

/// Full protocol configuration for repeated simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub n_runs: usize,
    /// Worker threads for independent runs; 1 = serial reference mode.
    /// Results are identical for any value.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            n_runs: 20,
            jobs: 1,
        }
    }
}

fn class_counts(images: &[(GrayscaleImage, ClassLabel)]) -> (usize, usize) {
    let pos = images
        .iter()
        .filter(|(_, l)| *l == ClassLabel::Collusive)
        .count();
    (pos, images.len() - pos)
}

/// Draw one train/test split over item indices. The test fold always holds
/// round(test_fraction * n) items; a fold missing one class is redrawn with
/// the next seed (logged) up to 100 attempts.
pub fn split_indices(
    labels: &[ClassLabel],
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ExperimentError> {
    let n = labels.len();
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(ExperimentError::InsufficientData(format!(
            "test fraction {} leaves an empty fold for {n} items",
            spec.test_fraction
        )));
    }

    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let test: Vec<usize> = if spec.stratified {
            stratified_test_indices(labels, n_test, &mut rng)
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n_test);
            idx
        };
        let mut is_test = vec![false; n];
        for &i in &test {
            is_test[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();

        let test_has_both = test.iter().any(|&i| labels[i] == ClassLabel::Collusive)
            && test.iter().any(|&i| labels[i] == ClassLabel::Competitive);
        let train_pos = train
            .iter()
            .filter(|&&i| labels[i] == ClassLabel::Collusive)
            .count();
        let train_ok = train_pos >= 2 && train.len() - train_pos >= 2;
        if test_has_both && train_ok {
            if attempt > 0 {
                log::warn!("degenerate split redrawn {attempt} time(s) from seed {seed}");
            }
            return Ok((train, test));
        }
    }
    Err(ExperimentError::InsufficientData(
        "could not draw a split with both classes in both folds".into(),
    ))
}

/// Per-class test allocation by largest remainder, summing exactly to
/// `n_test`.
fn stratified_test_indices(
    labels: &[ClassLabel],
    n_test: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let frac = n_test as f64 / labels.len() as f64;
    let classes = [ClassLabel::Collusive, ClassLabel::Competitive];
    let mut per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| {
            (0..labels.len())
                .filter(|&i| labels[i] == *c)
                .collect::<Vec<_>>()
        })
        .collect();
    let targets: Vec<f64> = per_class.iter().map(|v| v.len() as f64 * frac).collect();
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let mut leftover = n_test - counts.iter().sum::<usize>();
    // Distribute the remainder by descending fractional part, class order
    // breaking ties.
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in &order {
        if leftover == 0 {
            break;
        }
        if counts[c] < per_class[c].len() {
            counts[c] += 1;
            leftover -= 1;
        }
    }
    let mut test = Vec::with_capacity(n_test);
    for (c, items) in per_class.iter_mut().enumerate() {
        items.shuffle(rng);
        test.extend(items.iter().take(counts[c]));
    }
    test
}

fn evaluate(
    model: &crate::model::CnnModel,
    images: &[(GrayscaleImage, ClassLabel)],
    indices: &[usize],
) -> Result<EvalMetrics, ExperimentError> {
    let mut outcomes = Vec::with_capacity(indices.len());
    for &i in indices {
        let (_, predicted) = model.predict(&images[i].0)?;
        outcomes.push((images[i].1, predicted));
    }
    Ok(EvalMetrics::from_outcomes(&outcomes))
}

fn run_indexed<F>(n_runs: usize, jobs: usize, run_one: F) -> Result<Vec<EvalMetrics>, ExperimentError>
where
    F: Fn(usize) -> Result<EvalMetrics, ExperimentError> + Sync,
{
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            (0..n_runs)
                .into_par_iter()
                .map(&run_one)
                .collect::<Result<Vec<_>, _>>()
        })
    } else {
        (0..n_runs).map(run_one).collect()
    }
}

/// Repeated within-domain evaluation: per run, draw a split with seed
/// base_seed + run, train on the training fold, and score the held-out fold.
pub fn run_within_domain(
    images: &[(GrayscaleImage, ClassLabel)],
    cfg: &ExperimentConfig,
) -> Result<SimulationSummary, ExperimentError> {
    let (n_pos, n_neg) = class_counts(images);
    if n_pos < 2 || n_neg < 2 {
        return Err(ExperimentError::InsufficientData(format!(
            "corpus needs both classes, got {n_pos} collusive / {n_neg} competitive"
        )));
    }
    let labels: Vec<ClassLabel> = images.iter().map(|(_, l)| *l).collect();

    let run_one = |r: usize| -> Result<EvalMetrics, ExperimentError> {
        let run_seed = cfg.split.seed.wrapping_add(r as u64);
        let (train_idx, test_idx) = split_indices(&labels, &cfg.split, run_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let train_seed: u64 = rng.gen();

        let train_images: Vec<(GrayscaleImage, ClassLabel)> = train_idx
            .iter()
            .map(|&i| (images[i].0.clone(), images[i].1))
            .collect();
        let mut train_cfg = cfg.train;
        train_cfg.seed = train_seed;
        let (model, _) = train(&train_images, &train_cfg)?;
        evaluate(&model, images, &test_idx)
    };

    let per_run = run_indexed(cfg.n_runs, cfg.jobs, run_one)?;
    Ok(SimulationSummary::from_runs(
        per_run,
        [images.len(), n_pos, n_neg],
    ))
}

/// Transfer evaluation: per run, train on the whole training corpus with a
/// fresh seed and score the whole (fixed) test corpus.
pub fn run_transfer(
    train_images: &[(GrayscaleImage, ClassLabel)],
    test_images: &[(GrayscaleImage, ClassLabel)],
    cfg: &ExperimentConfig,
) -> Result<SimulationSummary, ExperimentError> {
    let (train_pos, train_neg) = class_counts(train_images);
    if train_pos < 2 || train_neg < 2 {
        return Err(ExperimentError::InsufficientData(
            "training corpus needs at least 2 images per class".into(),
        ));
    }
    let (test_pos, test_neg) = class_counts(test_images);
    if test_pos == 0 || test_neg == 0 {
        return Err(ExperimentError::InsufficientData(
            "test corpus needs both classes".into(),
        ));
    }
    let all_test: Vec<usize> = (0..test_images.len()).collect();

    let run_one = |r: usize| -> Result<EvalMetrics, ExperimentError> {
        let run_seed = cfg.split.seed.wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let train_seed: u64 = rng.gen();
        let mut train_cfg = cfg.train;
        train_cfg.seed = train_seed;
        let (model, _) = train(train_images, &train_cfg)?;
        evaluate(&model, test_images, &all_test)
    };

    let per_run = run_indexed(cfg.n_runs, cfg.jobs, run_one)?;
    Ok(SimulationSummary::from_runs(
        per_run,
        [test_images.len(), test_pos, test_neg],
    ))
}
