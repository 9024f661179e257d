use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use super::{DescriptorDatabase, Hit};
use crate::error::{Error, Result};
use crate::model::{GlobalDescriptor, OverlapTransformer};
use crate::pointcloud::{apply_pose, PointCloud, Pose};
use crate::range_image::{project_cloud, ProjectionConfig};
use crate::training::{OverlapTable, POSITIVE_OVERLAP};

/// Recall is reported for every N in `1..=MAX_RECALL_N`.
pub const MAX_RECALL_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopClosingOptions {
    /// Scans at most this many indices older than the query are skipped.
    pub exclusion: usize,
    pub overlap_threshold: f64,
}

impl Default for LoopClosingOptions {
    fn default() -> Self {
        Self {
            exclusion: 100,
            overlap_threshold: POSITIVE_OVERLAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub f1max: f64,
    /// N to recall@N; holds `1..=MAX_RECALL_N` and the 1% cutoff.
    pub recall_at: BTreeMap<usize, f64>,
    /// N used for recall@1%: `ceil(0.01 * database size)`.
    pub one_percent_n: usize,
    /// `(precision, recall)`, starting at `(1, 0)`, by increasing threshold.
    pub pr_curve: Vec<(f64, f64)>,
    /// Queries that were searched.
    pub n_queries: usize,
    /// Searched queries with at least one true reference.
    pub n_evaluable: usize,
}

impl EvalResult {
    pub fn recall_at_1(&self) -> f64 {
        self.recall_at[&1]
    }

    pub fn recall_at_1_percent(&self) -> f64 {
        self.recall_at[&self.one_percent_n]
    }
}

/// What one query retrieved.
struct Outcome {
    top1_distance: f64,
    top1_true: bool,
    /// Rank (0-based) of the first true reference, if any exists.
    first_true: Option<usize>,
}

fn outcome(hits: &[Hit], is_true: impl Fn(&Hit) -> bool) -> Outcome {
    Outcome {
        top1_distance: hits[0].distance,
        top1_true: is_true(&hits[0]),
        first_true: hits.iter().position(is_true),
    }
}

/// PR curve, AUC and F1max from each query's top-1 `(distance, correct)`
/// and the number of queries that have a true reference.
///
/// A query is accepted when its top-1 distance is at most the threshold;
/// the sweep visits every distinct top-1 distance. Precision is correct
/// accepts over accepts, recall is correct accepts over `n_positive`. The
/// AUC integrates precision over recall with the trapezoid rule from the
/// `(1, 0)` anchor.
pub fn pr_metrics(top1: &[(f64, bool)], n_positive: usize) -> Result<(Vec<(f64, f64)>, f64, f64)> {
    if n_positive == 0 {
        return Err(Error::NoEvaluableQueries);
    }
    let mut sorted = top1.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = vec![(1.0, 0.0)];
    let (mut tp, mut accepted) = (0usize, 0usize);
    let mut f1max = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == d {
            accepted += 1;
            tp += usize::from(sorted[i].1);
            i += 1;
        }
        let p = tp as f64 / accepted as f64;
        let r = tp as f64 / n_positive as f64;
        if p + r > 0.0 {
            f1max = f1max.max(2.0 * p * r / (p + r));
        }
        curve.push((p, r));
    }
    let auc = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].0 + w[1].0) * (w[1].1 - w[0].1))
        .sum::<f64>();
    Ok((curve, auc, f1max))
}

fn summarize(outcomes: &[Outcome], db_size: usize) -> Result<EvalResult> {
    let n_evaluable = outcomes.iter().filter(|o| o.first_true.is_some()).count();
    let top1: Vec<(f64, bool)> = outcomes.iter().map(|o| (o.top1_distance, o.top1_true)).collect();
    let (pr_curve, auc, f1max) = pr_metrics(&top1, n_evaluable)?;
    let one_percent_n = (db_size as f64 * 0.01).ceil().max(1.0) as usize;
    let recall = |n: usize| {
        outcomes.iter().filter(|o| o.first_true.is_some_and(|r| r < n)).count() as f64 / n_evaluable as f64
    };
    let recall_at = (1..=MAX_RECALL_N)
        .chain(std::iter::once(one_percent_n))
        .map(|n| (n, recall(n)))
        .collect();
    Ok(EvalResult {
        auc,
        f1max,
        recall_at,
        one_percent_n,
        pr_curve,
        n_queries: outcomes.len(),
        n_evaluable,
    })
}

/// Loop closing over a sequence: database row `i` queries every row more
/// than `exclusion` rows older. Rows are taken in stream order and overlap
/// is looked up by scan id. A retrieval is correct when its overlap with
/// the query exceeds the threshold.
pub fn evaluate_loop_closing(
    db: &DescriptorDatabase,
    table: &OverlapTable,
    opts: &LoopClosingOptions,
) -> Result<EvalResult> {
    let thr = opts.overlap_threshold;
    let outcomes = (0..db.len())
        .into_par_iter()
        .filter(|&i| i > opts.exclusion)
        .map(|i| {
            let q = db.meta(i).scan_id;
            let hits = db.query(db.row(i), db.len(), Some(i - opts.exclusion..db.len()))?;
            Ok(outcome(&hits, |h| table.overlap(q, h.scan_id) > thr))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(&outcomes, db.len())
}

/// Place recognition of separate queries, each given as `(scan_id,
/// descriptor)`, against the whole database. Queries without any true
/// reference in the database still count as false accepts in the PR sweep
/// but are left out of recall.
pub fn evaluate_place_recognition(
    db: &DescriptorDatabase,
    queries: &[(usize, GlobalDescriptor)],
    table: &OverlapTable,
    overlap_threshold: f64,
) -> Result<EvalResult> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let outcomes = queries
        .par_iter()
        .map(|(q, d)| {
            let hits = db.query(&d.values, db.len(), None)?;
            Ok(outcome(&hits, |h| table.overlap(*q, h.scan_id) > overlap_threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(&outcomes, db.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawSweepPoint {
    pub angle_deg: f64,
    pub recall_at_1: f64,
    /// Whether the rotation is a whole number of image columns.
    pub pixel_aligned: bool,
}

/// The twelve angles 0, 30, ..., 330 degrees.
pub fn default_yaw_angles() -> Vec<f64> {
    (0..12).map(|k| f64::from(k) * 30.0).collect()
}

/// Rotates every query cloud about the sensor z axis by each angle,
/// re-extracts its descriptor and reports recall@1 against the unrotated
/// database.
pub fn yaw_sweep_eval(
    model: &OverlapTransformer<f32>,
    db: &DescriptorDatabase,
    queries: &[(usize, PointCloud)],
    cfg: &ProjectionConfig,
    table: &OverlapTable,
    angles_deg: &[f64],
) -> Result<Vec<YawSweepPoint>> {
    angles_deg
        .iter()
        .map(|&angle| {
            let rot = Pose::yaw_rotation(angle.to_radians());
            let images = queries
                .iter()
                .map(|(_, c)| project_cloud(&apply_pose(c, &rot), cfg))
                .collect::<Result<Vec<_>>>()?;
            let descs = model.descriptors(&images)?;
            let qs: Vec<(usize, GlobalDescriptor)> = queries.iter().map(|(id, _)| *id).zip(descs).collect();
            let eval = evaluate_place_recognition(db, &qs, table, POSITIVE_OVERLAP)?;
            let cols = angle * cfg.w as f64 / 360.0;
            Ok(YawSweepPoint {
                angle_deg: angle,
                recall_at_1: eval.recall_at_1(),
                pixel_aligned: (cols - cols.round()).abs() < 1e-9,
            })
        })
        .collect()
}

/// CSV `precision,recall`.
pub fn write_pr_csv<W: Write>(out: W, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["precision", "recall"])?;
    for (p, r) in curve {
        w.write_record([format!("{p:e}"), format!("{r:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `n,recall` over every N in `recall_at`.
pub fn write_recall_csv<W: Write>(out: W, result: &EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "recall"])?;
    for (n, r) in &result.recall_at {
        w.write_record([n.to_string(), format!("{r:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `angle_deg,recall_at_1,pixel_aligned`.
pub fn write_yaw_csv<W: Write>(out: W, points: &[YawSweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["angle_deg", "recall_at_1", "pixel_aligned"])?;
    for p in points {
        w.write_record([p.angle_deg.to_string(), format!("{:e}", p.recall_at_1), p.pixel_aligned.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
