//! On-disk layout of a generated sequence:
//!
//! ```text
//! run.cfg          effective configuration
//! poses.txt        one 3x4 pose per line
//! manifest.csv     index,file,timestamp,pattern,direction,revisit_of
//! scans/000000.lprc
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use lpr_core::pointcloud::io::{read_poses, read_scan, write_poses, write_scan};
use lpr_core::pointcloud::{Frame, Pattern, PointCloud, Pose};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "run.cfg";
pub const POSES_FILE: &str = "poses.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCAN_DIR: &str = "scans";

/// Seconds between consecutive scans.
pub const SCAN_PERIOD: f64 = 0.1;

pub fn scan_file(index: usize) -> String {
    format!("{SCAN_DIR}/{index:06}.lprc")
}

pub fn write_dataset(dir: &Path, cfg: &RunConfig, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir.join(SCAN_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    for f in frames {
        let path = dir.join(scan_file(f.index));
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_scan(&mut out, &f.cloud)?;
        out.flush()?;
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    let mut out = BufWriter::new(File::create(dir.join(POSES_FILE))?);
    write_poses(&mut out, &poses)?;
    out.flush()?;

    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    w.write_record(["index", "file", "timestamp", "pattern", "direction", "revisit_of"])?;
    for f in frames {
        w.write_record([
            f.index.to_string(),
            scan_file(f.index),
            format!("{:.1}", f.index as f64 * SCAN_PERIOD),
            cfg.pattern.to_string(),
            f.direction.to_string(),
            f.revisit_of.map_or_else(String::new, |r| r.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub timestamp: f64,
    pub pattern: Pattern,
    pub direction: String,
    pub revisit_of: Option<usize>,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ctx = || format!("{} row {}", path.display(), row + 1);
        if rec.len() != 6 {
            bail!("{}: expected 6 fields", ctx());
        }
        let index: usize = rec[0].parse().with_context(ctx)?;
        if index != row {
            bail!("{}: index {} out of order", ctx(), index);
        }
        entries.push(ManifestEntry {
            index,
            file: rec[1].to_string(),
            timestamp: rec[2].parse().with_context(ctx)?,
            pattern: rec[3].parse().with_context(ctx)?,
            direction: rec[4].to_string(),
            revisit_of: if rec[5].is_empty() { None } else { Some(rec[5].parse().with_context(ctx)?) },
        });
    }
    Ok(entries)
}

/// A generated sequence read back from disk.
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub poses: Vec<Pose>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let poses_path = dir.join(POSES_FILE);
        let file = File::open(&poses_path).with_context(|| format!("reading {}", poses_path.display()))?;
        let poses = read_poses(BufReader::new(file)).with_context(|| format!("in {}", poses_path.display()))?;
        if poses.len() != entries.len() {
            bail!("{} poses but {} manifest rows", poses.len(), entries.len());
        }
        let clouds = entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let file = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
                read_scan(BufReader::new(file)).with_context(|| format!("in {}", path.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            poses,
            clouds,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}
