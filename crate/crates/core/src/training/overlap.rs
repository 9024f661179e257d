use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, Pose};
use crate::range_image::{compute_overlap, project_cloud, reproject, ProjectionConfig, RangeImage};

/// Overlap fractions for ordered scan pairs `(query, reference)` whose
/// poses lie within a candidate radius. Absent pairs count as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverlapTable {
    n_scans: usize,
    values: BTreeMap<(usize, usize), f64>,
    /// Pairs whose overlap could not be computed and were stored as 0.
    pub failures: usize,
}

impl OverlapTable {
    pub fn new(n_scans: usize) -> Self {
        Self {
            n_scans,
            values: BTreeMap::new(),
            failures: 0,
        }
    }

    pub fn n_scans(&self) -> usize {
        self.n_scans
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, query: usize, reference: usize, overlap: f64) -> Result<()> {
        if query >= self.n_scans || reference >= self.n_scans {
            return Err(Error::invalid(
                "overlap table",
                format!("pair ({query}, {reference}) outside {} scans", self.n_scans),
            ));
        }
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::invalid("overlap table", format!("overlap {overlap} outside [0, 1]")));
        }
        self.values.insert((query, reference), overlap);
        Ok(())
    }

    pub fn get(&self, query: usize, reference: usize) -> Option<f64> {
        self.values.get(&(query, reference)).copied()
    }

    /// Stored value, or 0 for pairs beyond the candidate radius.
    pub fn overlap(&self, query: usize, reference: usize) -> f64 {
        self.get(query, reference).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    /// References other than `query` with overlap above `threshold`.
    pub fn positives(&self, query: usize, threshold: f64) -> Vec<usize> {
        self.values
            .range((query, 0)..(query + 1, 0))
            .filter(|(&(_, j), &v)| j != query && v > threshold)
            .map(|(&(_, j), _)| j)
            .collect()
    }

    /// References other than `query` with overlap at most `threshold`,
    /// including every pair absent from the table.
    pub fn negatives(&self, query: usize, threshold: f64) -> Vec<usize> {
        (0..self.n_scans)
            .filter(|&j| j != query && self.overlap(query, j) <= threshold)
            .collect()
    }

    /// CSV with header `i,j,overlap`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "overlap"])?;
        for (i, j, v) in self.iter() {
            w.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`OverlapTable::write_csv`]. The scan count
    /// is `n_scans` when given, otherwise one past the largest index.
    pub fn read_csv<R: Read>(input: R, n_scans: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["i", "j", "overlap"] {
            return Err(Error::format("overlap table", "expected header i,j,overlap"));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
            let i: usize = parse(0)
                .parse()
                .map_err(|_| Error::format("overlap table", format!("bad index '{}'", parse(0))))?;
            let j: usize = parse(1)
                .parse()
                .map_err(|_| Error::format("overlap table", format!("bad index '{}'", parse(1))))?;
            let v: f64 = parse(2)
                .parse()
                .map_err(|_| Error::format("overlap table", format!("bad overlap '{}'", parse(2))))?;
            rows.push((i, j, v));
        }
        let inferred = rows.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
        let n = n_scans.unwrap_or(inferred);
        if inferred > n {
            return Err(Error::format("overlap table", format!("index beyond {n} scans")));
        }
        let mut table = Self::new(n);
        for (i, j, v) in rows {
            table.insert(i, j, v)?;
        }
        Ok(table)
    }
}

/// Overlap of every ordered pair of scans whose positions are at most
/// `candidate_radius` apart, including each scan with itself.
///
/// Query images are projected once; each pair reprojects the reference into
/// the query frame. Pairs that fail (nothing of the reference visible, or
/// an image without valid pixels) are stored as 0 and counted in
/// [`OverlapTable::failures`].
pub fn build_overlap_table(
    poses: &[Pose],
    clouds: &[PointCloud],
    cfg: &ProjectionConfig,
    delta: f64,
    candidate_radius: f64,
) -> Result<OverlapTable> {
    cfg.validate()?;
    if poses.len() != clouds.len() {
        return Err(Error::invalid(
            "build_overlap_table",
            format!("{} poses but {} clouds", poses.len(), clouds.len()),
        ));
    }
    if poses.len() < 2 {
        return Err(Error::invalid("build_overlap_table", "need at least 2 scans"));
    }
    if !(delta > 0.0) || !(candidate_radius >= 0.0) {
        return Err(Error::invalid("build_overlap_table", "delta must be positive and radius non-negative"));
    }
    let images: Vec<Option<RangeImage>> = clouds.par_iter().map(|c| project_cloud(c, cfg).ok()).collect();
    let rows: Vec<Vec<(usize, f64, bool)>> = (0..poses.len())
        .into_par_iter()
        .map(|i| {
            (0..poses.len())
                .filter(|&j| poses[i].distance_to(&poses[j]) <= candidate_radius)
                .map(|j| {
                    let value = images[i].as_ref().ok_or(Error::EmptyRangeImage).and_then(|q| {
                        let r = reproject(&clouds[j], &poses[j], &poses[i], cfg)?;
                        compute_overlap(q, &r, delta)
                    });
                    match value {
                        Ok(v) => (j, v, true),
                        Err(_) => (j, 0.0, false),
                    }
                })
                .collect()
        })
        .collect();
    let mut table = OverlapTable::new(poses.len());
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v, ok) in row {
            table.insert(i, j, v)?;
            table.failures += usize::from(!ok);
        }
    }
    if table.failures > 0 {
        warn!("{} scan pairs had no computable overlap and were set to 0", table.failures);
    }
    Ok(table)
}
