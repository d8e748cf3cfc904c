//! Stratified k-fold evaluation of classifiers over tasks and feature
//! sources, with support-weighted precision, recall and F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{TaskId, TaskLabeling};
use crate::error::{Error, Result};
use crate::features::{common_universe, FeatureMatrix, FeatureSource};
use crate::kgraph::Family;
use crate::learn::{self, Classifier, Labels, TrainConfig};
use crate::matrix::DenseMatrix;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_SEED: u64 = 42;

// ---------------------------------------------------------------------------
// Folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold index of each sample, in sample order.
    pub assignments: Vec<usize>,
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Stratification key of each sample: the class name, or the sorted label
/// set joined by `|` for multi-label tasks.
pub fn strata_keys(labels: &Labels) -> Vec<String> {
    match labels {
        Labels::Single { y, .. } => y.iter().map(|c| c.to_string()).collect(),
        Labels::Multi { y, .. } => y
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &on)| on)
                    .map(|(c, _)| c.to_string())
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect(),
    }
}

/// Deterministic stratified partition into `k` folds. With `groups`, all
/// samples of a group land in one fold and stratification counts groups,
/// each group taking the stratum of its first sample.
pub fn stratified_kfold(strata: &[String], k: usize, seed: u64, groups: Option<&[String]>) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {k}")));
    }
    let n = strata.len();
    let units: Vec<Vec<usize>> = match groups {
        None => (0..n).map(|i| vec![i]).collect(),
        Some(g) => {
            if g.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: g.len(),
                    context: " group ids".into(),
                });
            }
            let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, id) in g.iter().enumerate() {
                by_group.entry(id).or_default().push(i);
            }
            by_group.into_values().collect()
        }
    };
    if units.len() < k {
        let what = if groups.is_some() { "groups" } else { "samples" };
        return Err(Error::Validation(format!(
            "{} {what} cannot be split into {k} folds",
            units.len()
        )));
    }
    let mut by_stratum: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (u, members) in units.iter().enumerate() {
        by_stratum.entry(strata[members[0]].as_str()).or_default().push(u);
    }
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; n];
    let mut offset = 0;
    for (stratum, mut members) in by_stratum {
        if members.len() < k {
            warnings.push(format!(
                "stratum '{stratum}' has {} unit(s), fewer than {k} folds",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for (j, u) in members.iter().enumerate() {
            let fold = (offset + j) % k;
            for &i in &units[*u] {
                assignments[i] = fold;
            }
        }
        offset += members.len();
    }
    if !warnings.is_empty() {
        log::debug!("fold plan: {}", warnings.join("; "));
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Support-weighted precision, recall and F1. Multi-label scores are per
/// label and weighted by each label's positive count. Undefined ratios are 0.
pub fn weighted_prf(y_true: &Labels, y_pred: &Labels) -> Result<PrfScores> {
    if y_true.is_empty() {
        return Err(Error::Validation("cannot score an empty prediction set".into()));
    }
    if y_true.len() != y_pred.len() || y_true.classes() != y_pred.classes() || y_true.is_multi() != y_pred.is_multi() {
        return Err(Error::Validation("true and predicted labels differ in shape".into()));
    }
    let k = y_true.classes();
    let (mut tp, mut fp, mut fneg) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    match (y_true, y_pred) {
        (Labels::Single { y: t, .. }, Labels::Single { y: p, .. }) => {
            for (&a, &b) in t.iter().zip(p) {
                if a == b {
                    tp[a] += 1;
                } else {
                    fneg[a] += 1;
                    fp[b] += 1;
                }
            }
        }
        (Labels::Multi { y: t, .. }, Labels::Multi { y: p, .. }) => {
            for (a, b) in t.iter().zip(p) {
                for c in 0..k {
                    match (a[c], b[c]) {
                        (true, true) => tp[c] += 1,
                        (true, false) => fneg[c] += 1,
                        (false, true) => fp[c] += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        _ => unreachable!("shape checked above"),
    }
    let total: usize = (0..k).map(|c| tp[c] + fneg[c]).sum();
    let mut out = PrfScores::default();
    if total == 0 {
        return Ok(out);
    }
    for c in 0..k {
        let support = tp[c] + fneg[c];
        if support == 0 {
            continue;
        }
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], support);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let w = support as f64 / total as f64;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tasks

/// One task's labels row-aligned with one feature matrix.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskId,
    pub source: FeatureSource,
    pub sample_ids: Vec<String>,
    pub x: DenseMatrix,
    pub classes: Vec<String>,
    pub labels: Labels,
    /// Statue of each sample, used for grouped folds.
    pub groups: Vec<String>,
}

impl TaskData {
    pub fn new(
        labeling: &TaskLabeling,
        matrix: &FeatureMatrix,
        image_to_statue: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let aligned = common_universe(&[matrix], labeling)?;
        let groups = aligned
            .sample_ids
            .iter()
            .map(|id| image_to_statue.get(id).cloned().unwrap_or_else(|| id.clone()))
            .collect();
        let m = aligned.matrices.into_iter().next().expect("one matrix in, one out");
        Ok(Self {
            task: labeling.task,
            source: matrix.source(),
            sample_ids: aligned.sample_ids,
            x: m.matrix().clone(),
            classes: aligned.classes,
            labels: aligned.labels,
            groups,
        })
    }

    /// Copy with labels permuted among statues (or samples, without
    /// grouping). Every sample of a statue receives the same shuffled label.
    pub fn shuffled(&self, seed: u64, grouped: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.sample_ids.len();
        let unit_of: Vec<String> = if grouped {
            self.groups.clone()
        } else {
            self.sample_ids.clone()
        };
        let mut first: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, u) in unit_of.iter().enumerate() {
            first.entry(u).or_insert(i);
        }
        let units: Vec<&str> = first.keys().copied().collect();
        let mut donors: Vec<usize> = first.values().copied().collect();
        donors.shuffle(&mut rng);
        let donor_of: BTreeMap<&str, usize> = units.into_iter().zip(donors).collect();
        let source: Vec<usize> = (0..n).map(|i| donor_of[unit_of[i].as_str()]).collect();
        let labels = self.labels.select(&source);
        Self {
            labels,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub folds: usize,
    pub seed: u64,
    /// Keep every statue's images in one fold.
    pub grouped: bool,
    pub train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            seed: DEFAULT_SEED,
            grouped: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub scores: PrfScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskId,
    pub source: FeatureSource,
    pub classifier: Classifier,
    pub folds: Vec<FoldScore>,
    pub skipped_folds: Vec<(usize, String)>,
    pub mean: PrfScores,
    /// Population standard deviation across evaluated folds.
    pub std: PrfScores,
    pub sample_count: usize,
    pub class_support: Vec<(String, usize)>,
    pub metadata: BTreeMap<String, String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Whether a training split is usable: every class present for single-label
/// tasks, at least one sample otherwise.
fn training_gap(labels: &Labels) -> Option<String> {
    match labels {
        Labels::Single { .. } => {
            let missing: Vec<usize> = labels
                .supports()
                .iter()
                .enumerate()
                .filter(|(_, &n)| n == 0)
                .map(|(c, _)| c)
                .collect();
            (!missing.is_empty()).then(|| format!("training split lacks class index(es) {missing:?}"))
        }
        Labels::Multi { .. } => labels.is_empty().then(|| "training split is empty".to_string()),
    }
}

pub fn run_task(data: &TaskData, classifier: Classifier, cfg: &EvalConfig) -> Result<TaskResult> {
    if data.labels.classes() < 2 && !data.labels.is_multi() {
        return Err(Error::Validation(format!(
            "{} on {}: only {} class present",
            data.task.as_str(),
            data.source,
            data.labels.classes()
        )));
    }
    let strata = strata_keys(&data.labels);
    let groups = cfg.grouped.then_some(data.groups.as_slice());
    let plan = stratified_kfold(&strata, cfg.folds, cfg.seed, groups)?;
    let outcomes: Vec<Result<std::result::Result<PrfScores, String>>> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let train_idx = plan.train_indices(fold);
            let test_idx = plan.test_indices(fold);
            if test_idx.is_empty() {
                return Ok(Err("empty test fold".to_string()));
            }
            let y_train = data.labels.select(&train_idx);
            if let Some(gap) = training_gap(&y_train) {
                return Ok(Err(gap));
            }
            let model = learn::train(classifier, &data.x.select_rows(&train_idx), &y_train, &cfg.train)?;
            let pred = model.predict(&data.x.select_rows(&test_idx))?;
            Ok(Ok(weighted_prf(&data.labels.select(&test_idx), &pred)?))
        })
        .collect();
    let mut folds = Vec::new();
    let mut skipped_folds = Vec::new();
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            Ok(scores) => folds.push(FoldScore { fold, scores }),
            Err(reason) => {
                log::warn!(
                    "{} / {} / {}: fold {fold} skipped: {reason}",
                    data.task.as_str(),
                    data.source,
                    classifier
                );
                skipped_folds.push((fold, reason));
            }
        }
    }
    if folds.is_empty() {
        return Err(Error::Validation(format!(
            "{} on {}: every fold was skipped",
            data.task.as_str(),
            data.source
        )));
    }
    let stat = |f: fn(&PrfScores) -> f64| mean_std(&folds.iter().map(|s| f(&s.scores)).collect::<Vec<_>>());
    let (p, r, f) = (stat(|s| s.precision), stat(|s| s.recall), stat(|s| s.f1));
    let supports = data.labels.supports();
    let mut metadata = BTreeMap::new();
    metadata.insert("folds".into(), cfg.folds.to_string());
    metadata.insert("fold_seed".into(), cfg.seed.to_string());
    metadata.insert("grouped_folds".into(), cfg.grouped.to_string());
    metadata.insert("standardize".into(), cfg.train.standardize.to_string());
    metadata.insert("class_weighted".into(), cfg.train.class_weighted.to_string());
    metadata.insert("penalty_c".into(), cfg.train.penalty_c.to_string());
    metadata.insert("multi_label_threshold".into(), "0.5".into());
    metadata.insert("score".into(), "mean and population std over evaluated folds".into());
    if !plan.warnings.is_empty() {
        metadata.insert("fold_warnings".into(), plan.warnings.join("; "));
    }
    Ok(TaskResult {
        task: data.task,
        source: data.source,
        classifier,
        folds,
        skipped_folds,
        mean: PrfScores {
            precision: p.0,
            recall: r.0,
            f1: f.0,
        },
        std: PrfScores {
            precision: p.1,
            recall: r.1,
            f1: f.1,
        },
        sample_count: data.sample_ids.len(),
        class_support: data.classes.iter().cloned().zip(supports).collect(),
        metadata,
    })
}

/// Labeling with label sets permuted among statues, the label-shuffle
/// control. Every image of a statue takes the labels of one donor statue.
/// Images without a statue entry count as their own statue.
pub fn shuffled_labeling(
    labeling: &TaskLabeling,
    image_to_statue: &BTreeMap<String, String>,
    seed: u64,
) -> TaskLabeling {
    let unit = |id: &String| image_to_statue.get(id).cloned().unwrap_or_else(|| id.clone());
    let mut first: BTreeMap<String, &String> = BTreeMap::new();
    for id in labeling.labels.keys() {
        first.entry(unit(id)).or_insert(id);
    }
    let units: Vec<&String> = first.keys().collect();
    let mut donors: Vec<&String> = first.values().copied().collect();
    donors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let donor_of: BTreeMap<&String, &String> = units.into_iter().zip(donors).collect();
    let labels = labeling
        .labels
        .keys()
        .map(|id| (id.clone(), labeling.labels[donor_of[&unit(id)]].clone()))
        .collect();
    TaskLabeling {
        labels,
        ..labeling.clone()
    }
}

/// Weighted F1 of always predicting the most frequent class (or, for
/// multi-label tasks, each label's majority polarity).
pub fn majority_baseline_f1(labels: &Labels) -> Result<f64> {
    let supports = labels.supports();
    let pred = match labels {
        Labels::Single { classes, y } => Labels::Single {
            classes: *classes,
            y: vec![learn::argmax(&supports.iter().map(|&s| s as f64).collect::<Vec<_>>()); y.len()],
        },
        Labels::Multi { classes, y } => {
            let row: Vec<bool> = supports.iter().map(|&s| 2 * s > y.len()).collect();
            Labels::Multi {
                classes: *classes,
                y: vec![row; y.len()],
            }
        }
    };
    Ok(weighted_prf(labels, &pred)?.f1)
}

// ---------------------------------------------------------------------------
// Suites

/// Which tasks each graph embedding may serve. By default a graph source is
/// barred from tasks whose label family is one of the graph's attributes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Eligibility {
    pub overrides: BTreeMap<FeatureSource, BTreeSet<TaskId>>,
}

impl Eligibility {
    pub fn allows(&self, source: FeatureSource, task: TaskId) -> std::result::Result<(), String> {
        if let Some(allowed) = self.overrides.get(&source) {
            return if allowed.contains(&task) {
                Ok(())
            } else {
                Err(format!("{task} not in the allowed task list for {source}", task = task.as_str()))
            };
        }
        let Some(include_time) = source.graph_time() else {
            return Ok(());
        };
        match Family::of_task(task) {
            Some(f) if Family::graph_families(include_time).contains(&f) => {
                Err(format!("{} labels are attributes of the {source} graph", f))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Evaluated { result: TaskResult },
    Ineligible { reason: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub task: TaskId,
    pub source: FeatureSource,
    pub classifier: Classifier,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub cells: Vec<SuiteCell>,
}

/// Evaluates the full task × source × classifier grid. Cells run in
/// parallel; the output order is fixed (source, classifier, task).
pub fn run_suite(
    tasks: &[TaskLabeling],
    matrices: &[FeatureMatrix],
    classifiers: &[Classifier],
    image_to_statue: &BTreeMap<String, String>,
    eligibility: &Eligibility,
    cfg: &EvalConfig,
) -> SuiteResult {
    let mut grid = Vec::new();
    for m in matrices {
        for &c in classifiers {
            for t in tasks {
                grid.push((m, c, t));
            }
        }
    }
    let mut cells: Vec<SuiteCell> = grid
        .into_par_iter()
        .map(|(m, c, t)| {
            let status = match eligibility.allows(m.source(), t.task) {
                Err(reason) => CellStatus::Ineligible { reason },
                Ok(()) => match TaskData::new(t, m, image_to_statue).and_then(|d| run_task(&d, c, cfg)) {
                    Ok(result) => CellStatus::Evaluated { result },
                    Err(e) => {
                        log::warn!("{} / {} / {c}: {e}", t.task.as_str(), m.source());
                        CellStatus::Failed { error: e.to_string() }
                    }
                },
            };
            SuiteCell {
                task: t.task,
                source: m.source(),
                classifier: c,
                status,
            }
        })
        .collect();
    cells.sort_by_key(|c| (c.source, c.classifier, c.task));
    if !cells.iter().any(|c| !matches!(c.status, CellStatus::Ineligible { .. })) {
        log::warn!("no eligible task/source/classifier combination to evaluate");
    }
    SuiteResult { cells }
}

impl SuiteResult {
    pub fn evaluated(&self) -> impl Iterator<Item = &TaskResult> {
        self.cells.iter().filter_map(|c| match &c.status {
            CellStatus::Evaluated { result } => Some(result),
            _ => None,
        })
    }

    /// Per-fold CSV `task,source,classifier,fold,precision_w,recall_w,f1_w`.
    pub fn write_results_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(["task", "source", "classifier", "fold", "precision_w", "recall_w", "f1_w"])
            .map_err(wrap)?;
        for r in self.evaluated() {
            for f in &r.folds {
                w.write_record([
                    r.task.as_str().to_string(),
                    r.source.to_string(),
                    r.classifier.to_string(),
                    f.fold.to_string(),
                    format!("{:.6}", f.scores.precision),
                    format!("{:.6}", f.scores.recall),
                    format!("{:.6}", f.scores.f1),
                ])
                .map_err(wrap)?;
            }
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
    }

    /// One row per grid cell with status, sample count, and fold mean/std.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record([
            "task",
            "source",
            "classifier",
            "status",
            "samples",
            "folds_evaluated",
            "precision_mean",
            "precision_std",
            "recall_mean",
            "recall_std",
            "f1_mean",
            "f1_std",
            "note",
        ])
        .map_err(wrap)?;
        for c in &self.cells {
            let mut row = vec![c.task.as_str().to_string(), c.source.to_string(), c.classifier.to_string()];
            match &c.status {
                CellStatus::Evaluated { result: r } => {
                    row.extend([
                        "evaluated".to_string(),
                        r.sample_count.to_string(),
                        r.folds.len().to_string(),
                        format!("{:.6}", r.mean.precision),
                        format!("{:.6}", r.std.precision),
                        format!("{:.6}", r.mean.recall),
                        format!("{:.6}", r.std.recall),
                        format!("{:.6}", r.mean.f1),
                        format!("{:.6}", r.std.f1),
                        r.skipped_folds
                            .iter()
                            .map(|(f, why)| format!("fold {f} skipped: {why}"))
                            .collect::<Vec<_>>()
                            .join("; "),
                    ]);
                }
                CellStatus::Ineligible { reason } => {
                    row.extend(["ineligible".to_string()]);
                    row.extend(std::iter::repeat_n(String::new(), 8));
                    row.push(reason.clone());
                }
                CellStatus::Failed { error } => {
                    row.extend(["failed".to_string()]);
                    row.extend(std::iter::repeat_n(String::new(), 8));
                    row.push(error.clone());
                }
            }
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
    }

    /// Text table of mean weighted F1: one row per source and classifier, one
    /// column per task. Ineligible cells show "—", failed cells "error".
    pub fn render_table(&self) -> String {
        let tasks: BTreeSet<TaskId> = self.cells.iter().map(|c| c.task).collect();
        let rows: BTreeSet<(FeatureSource, Classifier)> =
            self.cells.iter().map(|c| (c.source, c.classifier)).collect();
        let lookup: BTreeMap<(FeatureSource, Classifier, TaskId), &CellStatus> = self
            .cells
            .iter()
            .map(|c| ((c.source, c.classifier, c.task), &c.status))
            .collect();
        let mut header = vec!["Method".to_string(), "Clf".to_string()];
        header.extend(tasks.iter().map(|t| t.short().to_string()));
        let mut table = vec![header];
        for &(s, c) in &rows {
            let mut line = vec![s.display_name().to_string(), c.as_str().to_uppercase()];
            for &t in &tasks {
                line.push(match lookup.get(&(s, c, t)) {
                    Some(CellStatus::Evaluated { result }) => {
                        format!("{:.2} ± {:.2}", result.mean.f1, result.std.f1)
                    }
                    Some(CellStatus::Ineligible { .. }) => "—".to_string(),
                    Some(CellStatus::Failed { .. }) => "error".to_string(),
                    None => String::new(),
                });
            }
            table.push(line);
        }
        let ncols = table[0].len();
        let widths: Vec<usize> = (0..ncols)
            .map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (ncols - 1)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::LabelMode;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Per-class confusion-matrix oracle; independent of `weighted_prf`.
    fn brute_force(t: &Labels, p: &Labels) -> PrfScores {
        let k = t.classes();
        let columns: Vec<(Vec<bool>, Vec<bool>)> = (0..k)
            .map(|c| match (t, p) {
                (Labels::Single { y: a, .. }, Labels::Single { y: b, .. }) => {
                    (a.iter().map(|&v| v == c).collect(), b.iter().map(|&v| v == c).collect())
                }
                (Labels::Multi { y: a, .. }, Labels::Multi { y: b, .. }) => {
                    (a.iter().map(|r| r[c]).collect(), b.iter().map(|r| r[c]).collect())
                }
                _ => unreachable!(),
            })
            .collect();
        let mut cm = vec![[[0u32; 2]; 2]; k];
        for (c, (a, b)) in columns.iter().enumerate() {
            for (x, y) in a.iter().zip(b) {
                cm[c][*x as usize][*y as usize] += 1;
            }
        }
        let supports: Vec<f64> = cm.iter().map(|m| (m[1][0] + m[1][1]) as f64).collect();
        let total: f64 = supports.iter().sum();
        let mut out = PrfScores::default();
        if total == 0.0 {
            return out;
        }
        for c in 0..k {
            let (tp, fp, fneg) = (cm[c][1][1] as f64, cm[c][0][1] as f64, cm[c][1][0] as f64);
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            out.precision += supports[c] / total * p;
            out.recall += supports[c] / total * r;
            out.f1 += supports[c] / total * f;
        }
        out
    }

    #[test]
    fn hand_computed_case() {
        let t = Labels::Single { classes: 2, y: vec![0, 0, 1, 1] };
        let p = Labels::Single { classes: 2, y: vec![0, 1, 1, 1] };
        let s = weighted_prf(&t, &p).unwrap();
        assert_abs_diff_eq!(s.precision, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.recall, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s.f1, (2.0 / 3.0 + 0.8) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.f1, 0.733_333_333_333_333_3, epsilon = 1e-12);
        assert_eq!(weighted_prf(&t, &t).unwrap(), PrfScores { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn multi_label_miss_has_zero_recall() {
        let t = Labels::Multi { classes: 2, y: vec![vec![true, false]] };
        let p = Labels::Multi { classes: 2, y: vec![vec![false, false]] };
        assert_eq!(weighted_prf(&t, &p).unwrap().recall, 0.0);
        assert!(weighted_prf(&Labels::Single { classes: 2, y: vec![] }, &Labels::Single { classes: 2, y: vec![] }).is_err());
    }

    fn random_pair(rng: &mut ChaCha8Rng, multi: bool) -> (Labels, Labels) {
        let n = rng.random_range(2..=200);
        let k = rng.random_range(2..=10);
        if multi {
            let mut draw = || -> Vec<Vec<bool>> {
                (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.3)).collect()).collect()
            };
            let (a, b) = (draw(), draw());
            (Labels::Multi { classes: k, y: a }, Labels::Multi { classes: k, y: b })
        } else {
            let a = (0..n).map(|_| rng.random_range(0..k)).collect();
            let b = (0..n).map(|_| rng.random_range(0..k)).collect();
            (Labels::Single { classes: k, y: a }, Labels::Single { classes: k, y: b })
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for i in 0..300 {
            let (t, p) = random_pair(&mut rng, i % 2 == 1);
            let (a, b) = (weighted_prf(&t, &p).unwrap(), brute_force(&t, &p));
            assert_abs_diff_eq!(a.precision, b.precision, epsilon = 1e-12);
            assert_abs_diff_eq!(a.recall, b.recall, epsilon = 1e-12);
            assert_abs_diff_eq!(a.f1, b.f1, epsilon = 1e-12);
        }
    }

    #[test]
    fn balanced_weighted_f1_equals_macro_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let k = rng.random_range(2..6);
            let t: Vec<usize> = (0..k * 7).map(|i| i % k).collect();
            let p: Vec<usize> = t.iter().map(|_| rng.random_range(0..k)).collect();
            let (t, p) = (Labels::Single { classes: k, y: t }, Labels::Single { classes: k, y: p });
            let weighted = weighted_prf(&t, &p).unwrap().f1;
            let macro_f1: f64 = (0..k)
                .map(|c| {
                    let one = |l: &Labels| match l {
                        Labels::Single { y, .. } => Labels::Single {
                            classes: 2,
                            y: y.iter().map(|&v| (v == c) as usize).collect(),
                        },
                        _ => unreachable!(),
                    };
                    let (tc, pc) = (one(&t), one(&p));
                    let Labels::Single { y: ty, .. } = &tc else { unreachable!() };
                    let Labels::Single { y: py, .. } = &pc else { unreachable!() };
                    let tp = ty.iter().zip(py).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
                    let pp = py.iter().filter(|&&b| b == 1).count() as f64;
                    let ap = ty.iter().filter(|&&a| a == 1).count() as f64;
                    if tp == 0.0 { 0.0 } else { 2.0 * tp / (pp + ap) }
                })
                .sum::<f64>()
                / k as f64;
            assert_abs_diff_eq!(weighted, macro_f1, epsilon = 1e-12);
        }
    }

    fn keys(v: &[usize]) -> Vec<String> {
        v.iter().map(|c| c.to_string()).collect()
    }

    #[test]
    fn fold_examples() {
        let plan = stratified_kfold(&keys(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]), 5, 42, None).unwrap();
        for f in 0..5 {
            let members = plan.test_indices(f);
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|&&i| i < 5).count(), 1);
        }
        let plan = stratified_kfold(&keys(&[0; 7]), 5, 1, None).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| plan.test_indices(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        let groups: Vec<String> = ["a", "a", "a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
        let plan = stratified_kfold(&keys(&[0; 8]), 5, 3, Some(&groups)).unwrap();
        assert!(plan.assignments[..3].iter().all(|&f| f == plan.assignments[0]));

        assert!(stratified_kfold(&keys(&[0, 1, 0, 1]), 5, 0, None).is_err());
        let small = stratified_kfold(&keys(&[0, 0, 0, 0, 0, 0, 1, 1]), 5, 0, None).unwrap();
        assert_eq!(small.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn folds_are_balanced_partitions(
            labels in proptest::collection::vec(0usize..4, 5..120),
            group_size in 1usize..4,
            seed in any::<u64>(),
        ) {
            let strata = keys(&labels);
            let plan = stratified_kfold(&strata, 5, seed, None).unwrap();
            prop_assert_eq!(plan.assignments.len(), labels.len());
            for c in 0..4 {
                let counts: Vec<usize> = (0..5)
                    .map(|f| (0..labels.len()).filter(|&i| labels[i] == c && plan.assignments[i] == f).count())
                    .collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
            let groups: Vec<String> = (0..labels.len()).map(|i| format!("g{}", i / group_size)).collect();
            let strata_g: Vec<String> = (0..labels.len()).map(|i| strata[i - i % group_size].clone()).collect();
            if let Ok(plan) = stratified_kfold(&strata_g, 5, seed, Some(&groups)) {
                for i in 0..labels.len() {
                    prop_assert_eq!(plan.assignments[i], plan.assignments[i - i % group_size]);
                }
            }
        }
    }

    fn separable_data(n_per: usize, seed: u64) -> TaskData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for c in 0..3 {
            for i in 0..n_per {
                ids.push(format!("c{c}_{i:03}"));
                let mut v = vec![0.0; 6];
                v[c] = 5.0;
                v.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
                rows.push(v);
                y.push(c);
            }
        }
        TaskData {
            task: TaskId::T1Style,
            source: FeatureSource::Iconometry,
            groups: ids.clone(),
            sample_ids: ids,
            x: DenseMatrix::from_rows(6, &rows),
            classes: vec!["China".into(), "Heian".into(), "Kamakura".into()],
            labels: Labels::Single { classes: 3, y },
        }
    }

    #[test]
    fn separable_cohort_scores_high_and_shuffle_does_not() {
        let data = separable_data(20, 1);
        let cfg = EvalConfig::default();
        // 48 training samples give the network few updates at the default rate.
        let fast = EvalConfig {
            train: TrainConfig {
                adam: crate::learn::AdamConfig { lr: 1e-2, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        };
        for (c, cfg) in [(Classifier::Svm, &cfg), (Classifier::Nn, &fast)] {
            let r = run_task(&data, c, cfg).unwrap();
            assert!(r.mean.f1 >= 0.95, "{c}: {}", r.mean.f1);
            assert_eq!(r.folds.len(), 5);
            assert_eq!(r.sample_count, 60);
        }
        let shuffled = data.shuffled(5, false);
        let r = run_task(&shuffled, Classifier::Svm, &cfg).unwrap();
        assert!(r.mean.f1 < 0.7, "{}", r.mean.f1);
        let base = majority_baseline_f1(&data.labels).unwrap();
        assert_abs_diff_eq!(base, (1.0 / 3.0) * (2.0 * (1.0 / 3.0) / (1.0 + 1.0 / 3.0)), epsilon = 1e-12);
    }

    #[test]
    fn run_task_is_deterministic() {
        let data = separable_data(8, 3);
        let cfg = EvalConfig {
            train: TrainConfig { epochs: 30, ..Default::default() },
            ..Default::default()
        };
        for c in Classifier::ALL {
            assert_eq!(run_task(&data, c, &cfg).unwrap(), run_task(&data, c, &cfg).unwrap());
        }
    }

    fn labeling(task: TaskId, ids: &[String], y: &[usize]) -> TaskLabeling {
        TaskLabeling {
            task,
            mode: LabelMode::SingleLabel,
            labels: ids
                .iter()
                .zip(y)
                .map(|(id, c)| (id.clone(), BTreeSet::from([format!("k{c}")])))
                .collect(),
        }
    }

    #[test]
    fn suite_covers_the_grid_and_marks_graph_cells() {
        let data = separable_data(10, 2);
        let Labels::Single { y, .. } = &data.labels else { unreachable!() };
        let tasks = vec![
            labeling(TaskId::T1Style, &data.sample_ids, y),
            labeling(TaskId::T2Dimensions, &data.sample_ids, y),
        ];
        let icon = FeatureMatrix::new(FeatureSource::Iconometry, data.sample_ids.clone(), data.x.clone()).unwrap();
        let mut graph_rows = DenseMatrix::zeros(data.sample_ids.len(), 128);
        for i in 0..graph_rows.rows() {
            graph_rows.row_mut(i)[..6].copy_from_slice(data.x.row(i));
        }
        let graph = FeatureMatrix::new(FeatureSource::GraphKg, data.sample_ids.clone(), graph_rows).unwrap();
        let cfg = EvalConfig {
            train: TrainConfig { epochs: 20, ..Default::default() },
            ..Default::default()
        };
        let suite = run_suite(
            &tasks,
            &[icon, graph],
            &Classifier::ALL,
            &BTreeMap::new(),
            &Eligibility::default(),
            &cfg,
        );
        assert_eq!(suite.cells.len(), 8);
        let ineligible: Vec<_> = suite
            .cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Ineligible { .. }))
            .map(|c| (c.source, c.task))
            .collect();
        assert_eq!(ineligible, vec![(FeatureSource::GraphKg, TaskId::T2Dimensions); 2]);
        let table = suite.render_table();
        assert!(table.contains('—'), "{table}");
        assert!(table.contains("Node2Vec_KG"));

        let mut csv_out = Vec::new();
        suite.write_results_csv(&mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("task,source,classifier,fold,precision_w,recall_w,f1_w\n"));
        assert_eq!(text.lines().count(), 1 + 6 * 5);
    }

    #[test]
    fn default_graph_eligibility() {
        let e = Eligibility::default();
        assert!(e.allows(FeatureSource::GraphKg, TaskId::T1Style).is_ok());
        assert!(e.allows(FeatureSource::GraphKg, TaskId::T3Century).is_ok());
        assert!(e.allows(FeatureSource::GraphKgTime, TaskId::T3Century).is_err());
        assert!(e.allows(FeatureSource::GraphKgTime, TaskId::T1Style).is_ok());
        for t in [TaskId::T2Dimensions, TaskId::T4StatueType, TaskId::T5_3StoneType] {
            assert!(e.allows(FeatureSource::GraphKg, t).is_err());
            assert!(e.allows(FeatureSource::Iconometry, t).is_ok());
        }
        let custom = Eligibility {
            overrides: BTreeMap::from([(FeatureSource::GraphKg, BTreeSet::from([TaskId::T2Dimensions]))]),
        };
        assert!(custom.allows(FeatureSource::GraphKg, TaskId::T2Dimensions).is_ok());
        assert!(custom.allows(FeatureSource::GraphKg, TaskId::T1Style).is_err());
    }

    #[test]
    fn shuffled_labeling_keeps_statues_together() {
        let mut labels = BTreeMap::new();
        let mut i2s = BTreeMap::new();
        for s in 0..12 {
            for k in 0..3 {
                let id = format!("s{s}_{k}");
                labels.insert(id.clone(), BTreeSet::from([format!("c{}", s % 3)]));
                i2s.insert(id, format!("s{s}"));
            }
        }
        let lab = TaskLabeling {
            task: TaskId::T1Style,
            mode: LabelMode::SingleLabel,
            labels,
        };
        let sh = shuffled_labeling(&lab, &i2s, 5);
        assert_eq!(sh, shuffled_labeling(&lab, &i2s, 5));
        assert_ne!(sh.labels, lab.labels);
        for s in 0..12 {
            let a = &sh.labels[&format!("s{s}_0")];
            assert!((1..3).all(|k| &sh.labels[&format!("s{s}_{k}")] == a));
        }
        let count = |l: &TaskLabeling, c: &str| l.labels.values().filter(|v| v.contains(c)).count();
        for c in ["c0", "c1", "c2"] {
            assert_eq!(count(&sh, c), count(&lab, c));
        }
    }
}
