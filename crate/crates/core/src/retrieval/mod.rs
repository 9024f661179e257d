//! Descriptor database, exact nearest-neighbor search and loop-closure
//! metrics.

mod metrics;

use std::collections::HashSet;
use std::io::{Read, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::GlobalDescriptor;
use crate::pointcloud::io::{format_pose, parse_pose};
use crate::pointcloud::Pose;
use crate::tensor::checkpoint::{read_u32, write_u32};

pub use metrics::{
    evaluate_loop_closing, evaluate_place_recognition, pr_metrics, write_pr_csv, write_recall_csv, write_yaw_csv,
    default_yaw_angles, yaw_sweep_eval, EvalResult, LoopClosingOptions, YawSweepPoint, MAX_RECALL_N,
};

pub const DB_MAGIC: &[u8; 4] = b"LPRD";

/// Rows must have unit norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMeta {
    /// Index of the scan in its sequence; unique within a database.
    pub scan_id: usize,
    pub pose: Pose,
    /// Seconds.
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Row in the database.
    pub row: usize,
    pub scan_id: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDatabase {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<DescriptorMeta>,
    ids: HashSet<usize>,
}

/// Euclidean distance accumulated in `f64`.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl DescriptorDatabase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            meta: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn from_descriptors(descriptors: &[GlobalDescriptor], meta: Vec<DescriptorMeta>) -> Result<Self> {
        if descriptors.len() != meta.len() {
            return Err(Error::invalid(
                "descriptor database",
                format!("{} descriptors but {} metadata rows", descriptors.len(), meta.len()),
            ));
        }
        let dim = descriptors.first().map_or(0, GlobalDescriptor::dim);
        let mut db = Self::new(dim);
        for (d, m) in descriptors.iter().zip(meta) {
            db.push(d, m)?;
        }
        Ok(db)
    }

    /// Appends a row; checks dimension, unit norm and id uniqueness.
    pub fn push(&mut self, d: &GlobalDescriptor, meta: DescriptorMeta) -> Result<()> {
        if d.dim() != self.dim {
            return Err(Error::Shape {
                op: "descriptor database",
                lhs: vec![d.dim()],
                rhs: vec![self.dim],
            });
        }
        if (d.norm() - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(
                "descriptor database",
                format!("descriptor for scan {} has norm {}", meta.scan_id, d.norm()),
            ));
        }
        if !self.ids.insert(meta.scan_id) {
            return Err(Error::invalid(
                "descriptor database",
                format!("duplicate scan id {}", meta.scan_id),
            ));
        }
        self.data.extend_from_slice(&d.values);
        self.meta.push(meta);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> &DescriptorMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[DescriptorMeta] {
        &self.meta
    }

    pub fn descriptor(&self, i: usize) -> GlobalDescriptor {
        GlobalDescriptor {
            values: self.row(i).to_vec(),
        }
    }

    /// The `top_k` nearest rows by Euclidean distance, ascending, ties by
    /// lower scan id. Rows inside `exclude` are skipped.
    pub fn query(&self, q: &[f32], top_k: usize, exclude: Option<Range<usize>>) -> Result<Vec<Hit>> {
        if q.len() != self.dim {
            return Err(Error::Shape {
                op: "query",
                lhs: vec![q.len()],
                rhs: vec![self.dim],
            });
        }
        let excluded = |i: usize| exclude.as_ref().is_some_and(|r| r.contains(&i));
        let mut hits: Vec<Hit> = (0..self.len())
            .filter(|&i| !excluded(i))
            .map(|i| Hit {
                row: i,
                scan_id: self.meta[i].scan_id,
                distance: euclidean(q, self.row(i)),
            })
            .collect();
        if hits.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let order = |a: &Hit, b: &Hit| a.distance.total_cmp(&b.distance).then(a.scan_id.cmp(&b.scan_id));
        let k = top_k.min(hits.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// `LPRD`, `u32` count, `u32` dim, the `f32` rows, then a CSV block
    /// `scan_id,timestamp,pose` with the pose as twelve space-separated numbers.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DB_MAGIC)?;
        write_u32(&mut out, self.len())?;
        write_u32(&mut out, self.dim)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scan_id", "timestamp", "pose"])?;
        for m in &self.meta {
            w.write_record([m.scan_id.to_string(), format!("{:e}", m.timestamp), format_pose(&m.pose)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DB_MAGIC {
            return Err(Error::format("descriptor database", "bad magic"));
        }
        let count = read_u32(&mut input)?;
        let dim = read_u32(&mut input)?;
        let mut bytes = vec![0u8; count * dim * 4];
        input.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut rdr = csv::Reader::from_reader(input);
        let mut db = Self::new(dim);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::format("descriptor database", "metadata rows need 3 fields"));
            }
            let scan_id = rec[0]
                .parse()
                .map_err(|_| Error::format("descriptor database", format!("bad scan id '{}'", &rec[0])))?;
            let timestamp = rec[1]
                .parse()
                .map_err(|_| Error::format("descriptor database", format!("bad timestamp '{}'", &rec[1])))?;
            let pose = parse_pose(&rec[2])?;
            if row >= count {
                return Err(Error::format("descriptor database", "more metadata rows than descriptors"));
            }
            let d = GlobalDescriptor {
                values: data[row * dim..(row + 1) * dim].to_vec(),
            };
            db.push(&d, DescriptorMeta { scan_id, pose, timestamp })?;
        }
        if db.len() != count {
            return Err(Error::format(
                "descriptor database",
                format!("{count} descriptors but {} metadata rows", db.len()),
            ));
        }
        Ok(db)
    }
}
