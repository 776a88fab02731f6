use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logreg::{fit_logreg, LogReg, LogRegOptions};
use super::{default_l2_grid, ProbeDataset, TargetSpec};
use crate::error::{Error, Result};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub l2_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub logreg: LogRegOptions,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2_grid: default_l2_grid(),
            folds: 3,
            seed: 0,
            logreg: LogRegOptions::default(),
        }
    }
}

/// Percent-scale metrics of one evaluation. `acc2`/`acc8` are `None` when
/// there are at most 2 or 8 classes, where they would be trivially 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub acc1: f64,
    pub acc2: Option<f64>,
    pub acc8: Option<f64>,
    /// Macro one-vs-rest average precision.
    pub average_precision: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub std: f64,
}

impl Metric {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std: if std.is_finite() { std } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub classes: usize,
    /// Original labels dropped for having fewer examples than folds.
    pub dropped_classes: Vec<usize>,
    pub acc1: Metric,
    pub acc2: Option<Metric>,
    pub acc8: Option<Metric>,
    pub average_precision: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub averaging: String,
    pub best_l2: f64,
    /// The selected L2 strength is the first or last grid point.
    pub boundary: bool,
    /// `(l2, mean validation acc@1)` in grid order.
    pub grid_scores: Vec<(f64, f64)>,
    /// Every fit reached the gradient tolerance.
    pub converged: bool,
    pub folds: Vec<FoldMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub target: TargetSpec,
    pub model: LogReg,
    /// Compact class index to original label.
    pub class_labels: Vec<usize>,
    pub report: ProbeReport,
}

/// Fold index per row. Within each class, rows are shuffled and dealt
/// round-robin, continuing where the previous class stopped, so per-class
/// fold counts differ by at most one.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for rows in by_class.iter_mut() {
        rows.shuffle(&mut rng);
        for &r in rows.iter() {
            fold[r] = next % folds;
            next += 1;
        }
    }
    fold
}

/// Rank of the true class among row probabilities, ties ordered by class
/// index.
fn true_rank(row: &[f64], y: usize) -> usize {
    let pt = row[y];
    row.iter()
        .enumerate()
        .filter(|&(c, &p)| p > pt || (p == pt && c < y))
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    best
}

fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positive[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Some(ap)
}

pub(crate) fn metrics(proba: ArrayView2<f64>, y: &[usize]) -> FoldMetrics {
    let classes = proba.ncols();
    let n = y.len();
    let mut hits = [0usize; 3];
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (row, &yi) in proba.rows().into_iter().zip(y) {
        let row = row.as_slice().expect("contiguous rows");
        let rank = true_rank(row, yi);
        for (h, m) in hits.iter_mut().zip([1, 2, 8]) {
            *h += usize::from(rank < m);
        }
        let p = argmax(row);
        pred_count[p] += 1;
        true_count[yi] += 1;
        tp[p] += usize::from(p == yi);
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    let present: Vec<usize> = (0..classes).filter(|&c| true_count[c] > 0).collect();
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut f1 = Vec::new();
    let mut aps = Vec::new();
    for &c in &present {
        let p = if pred_count[c] > 0 { tp[c] as f64 / pred_count[c] as f64 } else { 0.0 };
        let r = tp[c] as f64 / true_count[c] as f64;
        prec.push(p);
        rec.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        let col: Vec<f64> = proba.column(c).to_vec();
        let pos: Vec<bool> = y.iter().map(|&yi| yi == c).collect();
        aps.extend(average_precision(&col, &pos));
    }
    let macro_pct = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len().max(1) as f64;
    FoldMetrics {
        acc1: pct(hits[0]),
        acc2: (classes > 2).then(|| pct(hits[1])),
        acc8: (classes > 8).then(|| pct(hits[2])),
        average_precision: macro_pct(&aps),
        precision: macro_pct(&prec),
        recall: macro_pct(&rec),
        f1: macro_pct(&f1),
    }
}

fn rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn aggregate(target: &TargetSpec, classes: usize, dropped: Vec<usize>, folds: Vec<FoldMetrics>) -> ProbeReport {
    let col = |f: fn(&FoldMetrics) -> f64| Metric::of(&folds.iter().map(f).collect::<Vec<_>>());
    let opt = |f: fn(&FoldMetrics) -> Option<f64>| {
        let v: Option<Vec<f64>> = folds.iter().map(f).collect();
        v.map(|v| Metric::of(&v))
    };
    ProbeReport {
        target: target.name(),
        classes,
        dropped_classes: dropped,
        acc1: col(|m| m.acc1),
        acc2: opt(|m| m.acc2),
        acc8: opt(|m| m.acc8),
        average_precision: col(|m| m.average_precision),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        f1: col(|m| m.f1),
        averaging: "macro".into(),
        best_l2: f64::NAN,
        boundary: false,
        grid_scores: Vec::new(),
        converged: true,
        folds,
    }
}

/// Stratified k-fold grid search over L2 strength, selecting by mean
/// validation acc@1, then a refit on all rows at the selected strength.
pub fn train_probe(dataset: &ProbeDataset, target: TargetSpec, opts: &ProbeOptions) -> Result<TrainedProbe> {
    dataset.validate()?;
    if opts.folds < 2 {
        return Err(Error::Param("at least 2 folds are required".into()));
    }
    if opts.l2_grid.is_empty() {
        return Err(Error::Param("empty L2 grid".into()));
    }
    let raw = dataset.labels(target)?;
    let max_label = raw.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; max_label];
    raw.iter().for_each(|&l| counts[l] += 1);
    let dropped: Vec<usize> = (0..max_label).filter(|&c| counts[c] > 0 && counts[c] < opts.folds).collect();
    let class_labels: Vec<usize> = (0..max_label).filter(|&c| counts[c] >= opts.folds).collect();
    if class_labels.len() < 2 {
        return Err(Error::DegenerateTarget(format!(
            "target {} has {} usable class(es)",
            target.name(),
            class_labels.len()
        )));
    }
    let mut compact = vec![usize::MAX; max_label];
    for (i, &c) in class_labels.iter().enumerate() {
        compact[c] = i;
    }
    let keep: Vec<usize> = (0..raw.len()).filter(|&i| compact[raw[i]] != usize::MAX).collect();
    let x = rows(dataset.features.view(), &keep);
    let y: Vec<usize> = keep.iter().map(|&i| compact[raw[i]]).collect();
    let classes = class_labels.len();
    let fold_of = stratified_folds(&y, opts.folds, opts.seed);

    // Strongest penalty first so each fit starts from a nearby solution.
    let mut grid_order: Vec<usize> = (0..opts.l2_grid.len()).collect();
    grid_order.sort_by(|&a, &b| opts.l2_grid[b].total_cmp(&opts.l2_grid[a]));
    let mut per_grid: Vec<Vec<FoldMetrics>> = vec![Vec::new(); opts.l2_grid.len()];
    let mut converged = true;
    for f in 0..opts.folds {
        let train_idx: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != f).collect();
        let val_idx: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == f).collect();
        let xt = rows(x.view(), &train_idx);
        let yt: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
        let xv = rows(x.view(), &val_idx);
        let yv: Vec<usize> = val_idx.iter().map(|&i| y[i]).collect();
        let mut warm: Option<LogReg> = None;
        for &g in &grid_order {
            let (model, info) = fit_logreg(xt.view(), &yt, classes, opts.l2_grid[g], &opts.logreg, warm.as_ref())?;
            converged &= info.converged;
            per_grid[g].push(metrics(model.predict_proba(xv.view())?.view(), &yv));
            warm = Some(model);
        }
    }
    let grid_scores: Vec<(f64, f64)> = opts
        .l2_grid
        .iter()
        .zip(&per_grid)
        .map(|(&l2, m)| (l2, m.iter().map(|f| f.acc1).sum::<f64>() / m.len() as f64))
        .collect();
    let mut best = 0;
    for (i, s) in grid_scores.iter().enumerate() {
        if s.1 > grid_scores[best].1 {
            best = i;
        }
    }
    let best_l2 = opts.l2_grid[best];
    let lo = opts.l2_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = opts.l2_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (model, info) = fit_logreg(x.view(), &y, classes, best_l2, &opts.logreg, None)?;
    converged &= info.converged;
    let mut report = aggregate(&target, classes, dropped, per_grid.swap_remove(best));
    report.best_l2 = best_l2;
    report.boundary = opts.l2_grid.len() > 1 && (best_l2 == lo || best_l2 == hi);
    report.grid_scores = grid_scores;
    report.converged = converged;
    Ok(TrainedProbe {
        target,
        model,
        class_labels,
        report,
    })
}

/// Metrics of a fitted probe on `dataset`; rows whose label the probe never
/// saw are skipped. Standard deviations are zero.
pub fn evaluate(probe: &TrainedProbe, dataset: &ProbeDataset) -> Result<ProbeReport> {
    dataset.validate()?;
    if dataset.dim() != probe.model.dim() {
        return Err(Error::Config(format!(
            "probe expects {} features, dataset has {}",
            probe.model.dim(),
            dataset.dim()
        )));
    }
    let raw = dataset.labels(probe.target)?;
    let keep: Vec<usize> = (0..raw.len()).filter(|&i| probe.class_labels.contains(&raw[i])).collect();
    if keep.is_empty() {
        return Err(Error::DegenerateTarget("no rows with a known label".into()));
    }
    let y: Vec<usize> = keep
        .iter()
        .map(|&i| probe.class_labels.iter().position(|&c| c == raw[i]).expect("kept"))
        .collect();
    let x = rows(dataset.features.view(), &keep);
    let m = metrics(probe.model.predict_proba(x.view())?.view(), &y);
    let mut report = aggregate(&probe.target, probe.class_labels.len(), Vec::new(), vec![m]);
    report.best_l2 = probe.model.l2;
    report.converged = probe.report.converged;
    Ok(report)
}
