use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{debug, info};
use lpr_core::model::{encode_image, load_checkpoint, save_checkpoint, sidecar_path, OverlapTransformer};
use lpr_core::pointcloud::{generate_trajectory, PointCloud, SyntheticWorld};
use lpr_core::range_image::{project_cloud, ProjectionConfig};
use lpr_core::retrieval::{
    evaluate_loop_closing, evaluate_place_recognition, write_pr_csv, write_recall_csv, write_yaw_csv,
    yaw_sweep_eval, DescriptorDatabase, DescriptorMeta, EvalResult,
};
use lpr_core::training::{build_overlap_table, train as train_model, write_loss_csv, LossRecord, OverlapTable};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{write_dataset, Dataset, CONFIG_FILE};
use crate::svg::line_chart;

pub const CHECKPOINT_FILE: &str = "model.lprw";
pub const LOSS_FILE: &str = "loss.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";
pub const DB_FILE: &str = "db.lprd";
pub const PR_FILE: &str = "pr_curve.csv";
pub const RECALL_FILE: &str = "recall_at.csv";
pub const RECALL_SVG: &str = "recall_at.svg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const YAW_FILE: &str = "yaw_sweep.csv";

/// Marks errors found while validating inputs, before any output exists.
#[derive(Debug)]
pub struct InputError;

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}

fn validate<T>(f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().context(InputError)
}

/// Options shared by every subcommand.
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// `--config` if given, else the data directory's `run.cfg`, else defaults;
/// `--seed` overrides the seed.
fn resolve_config(g: &Globals, data: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, data.map(|d| d.join(CONFIG_FILE))) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) if path.exists() => RunConfig::load(&path)?,
        _ => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Parses `a..b` into a half-open scan index range.
pub fn parse_range(text: &str) -> Result<Range<usize>, String> {
    let (a, b) = text.split_once("..").ok_or_else(|| format!("expected START..END, got '{text}'"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start '{a}'"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end '{b}'"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn check_range(range: &Range<usize>, len: usize) -> Result<()> {
    if range.end > len {
        bail!("scan range {}..{} exceeds the {} scans available", range.start, range.end, len);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<OverlapTransformer<f32>> {
    let (config, params) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(OverlapTransformer::from_parts(config, params)?)
}

fn check_model_matches(model: &OverlapTransformer<f32>, proj: &ProjectionConfig) -> Result<()> {
    let (mh, mw) = (model.config.h, model.config.w);
    if (mh, mw) != (proj.h, proj.w) {
        bail!(
            "checkpoint expects {mh} x {mw} range images but scans project to {} x {}",
            proj.h,
            proj.w
        );
    }
    Ok(())
}

fn read_db(path: &Path) -> Result<DescriptorDatabase> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    DescriptorDatabase::read(BufReader::new(file)).with_context(|| format!("in {}", path.display()))
}

fn read_table(path: &Path) -> Result<OverlapTable> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    OverlapTable::read_csv(BufReader::new(file), None).with_context(|| format!("in {}", path.display()))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn table_for(cfg: &RunConfig, ds: &Dataset) -> Result<OverlapTable> {
    info!("building overlap table over {} scans", ds.len());
    let table = build_overlap_table(&ds.poses, &ds.clouds, &cfg.projection(), cfg.delta(), cfg.candidate_radius)?;
    info!("{} overlap pairs, {} failed", table.len(), table.failures);
    Ok(table)
}

pub fn generate(g: &Globals) -> Result<()> {
    let cfg = validate(|| resolve_config(g, None))?;
    let world = SyntheticWorld::generate(&cfg.world())?;
    let frames = generate_trajectory(&world, &cfg.trajectory(), &cfg.scan())?;
    write_dataset(&g.out, &cfg, &frames)?;
    println!("generated {} scans ({}) in {}", frames.len(), cfg.pattern, g.out.display());
    Ok(())
}

pub fn train(g: &Globals, data: &Path) -> Result<()> {
    let (cfg, ds, inputs, n) = validate(|| {
        let cfg = resolve_config(g, Some(data))?;
        let ds = Dataset::load(data)?;
        let n = if cfg.train_scans == 0 { ds.len() } else { cfg.train_scans };
        if n > ds.len() || n < 2 {
            bail!("train_scans = {n} but the data set has {} scans", ds.len());
        }
        let proj = cfg.projection();
        let inputs = ds.clouds[..n]
            .par_iter()
            .map(|c| project_cloud(c, &proj).map(|img| encode_image::<f32>(&img)))
            .collect::<lpr_core::Result<Vec<_>>>()?;
        Ok((cfg, ds, inputs, n))
    })?;
    fs::create_dir_all(&g.out)?;
    let checkpoint = g.out.join(CHECKPOINT_FILE);
    remove_checkpoint(&checkpoint)?;

    let table = build_overlap_table(
        &ds.poses[..n],
        &ds.clouds[..n],
        &cfg.projection(),
        cfg.delta(),
        cfg.candidate_radius,
    )?;
    table.write_csv(create_file(&g.out.join(OVERLAP_FILE))?)?;
    info!("overlap table: {} pairs over {n} scans, {} failed", table.len(), table.failures);

    let mut model = OverlapTransformer::<f32>::new(cfg.model_config()?, cfg.seed)?;
    let mut history: Vec<LossRecord> = Vec::new();
    let result = train_model(&mut model, &inputs, &table, &cfg.train_config(), |r| {
        debug!("step {} loss {:.6} raw {:.6}", r.step, r.clamped_loss, r.raw_loss);
        history.push(*r);
    });
    write_loss_csv(create_file(&g.out.join(LOSS_FILE))?, &history)?;
    let report = match result {
        Ok(report) => report,
        Err(e) => {
            remove_checkpoint(&checkpoint)?;
            return Err(e.into());
        }
    };
    save_checkpoint(&checkpoint, &model.config, &model.params)?;
    let last = history.last().map_or(f64::NAN, |r| r.clamped_loss);
    println!(
        "trained {} steps, final loss {last:.6}, {} queries skipped; checkpoint {}",
        history.len(),
        report.skipped_queries,
        checkpoint.display()
    );
    Ok(())
}

fn remove_checkpoint(path: &Path) -> Result<()> {
    for p in [path.to_path_buf(), sidecar_path(path)] {
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

pub fn extract(g: &Globals, checkpoint: &Path, data: &Path, range: Option<Range<usize>>, db_name: &str) -> Result<()> {
    let (cfg, model, ds, range) = validate(|| {
        let cfg = resolve_config(g, Some(data))?;
        let model = load_model(checkpoint)?;
        check_model_matches(&model, &cfg.projection())?;
        let ds = Dataset::load(data)?;
        let range = range.unwrap_or(0..ds.len());
        check_range(&range, ds.len())?;
        Ok((cfg, model, ds, range))
    })?;
    let proj = cfg.projection();
    let timed = range
        .clone()
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let img = project_cloud(&ds.clouds[i], &proj)?;
            let d = model.descriptor(&img)?;
            Ok((d, start.elapsed().as_secs_f64()))
        })
        .collect::<lpr_core::Result<Vec<_>>>()?;
    let (descs, times): (Vec<_>, Vec<_>) = timed.into_iter().unzip();
    let meta = range
        .clone()
        .map(|i| DescriptorMeta {
            scan_id: i,
            pose: ds.poses[i],
            timestamp: ds.entries[i].timestamp,
        })
        .collect();
    let db = DescriptorDatabase::from_descriptors(&descs, meta)?;
    fs::create_dir_all(&g.out)?;
    let path = g.out.join(db_name);
    let mut out = create_file(&path)?;
    db.write(&mut out)?;
    out.flush()?;
    let (mean, std) = mean_std(&times);
    println!(
        "extracted {} descriptors of dimension {} to {}",
        db.len(),
        db.dim(),
        path.display()
    );
    println!("per-scan extraction time: mean {:.3} ms, stddev {:.3} ms", mean * 1e3, std * 1e3);
    Ok(())
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate(
    g: &Globals,
    db_path: &Path,
    queries: Option<&Path>,
    table: Option<&Path>,
    data: Option<&Path>,
    svg: bool,
) -> Result<()> {
    let (cfg, db, queries, table, ds) = validate(|| {
        let cfg = resolve_config(g, data)?;
        let db = read_db(db_path)?;
        let queries = queries.map(read_db).transpose()?;
        let (table, ds) = match (table, data) {
            (Some(t), _) => (Some(read_table(t)?), None),
            (None, Some(d)) => (None, Some(Dataset::load(d)?)),
            (None, None) => bail!("evaluate needs --table or --data for ground-truth overlaps"),
        };
        if let Some(q) = &queries {
            if q.dim() != db.dim() {
                bail!("query descriptors have dimension {} but the database has {}", q.dim(), db.dim());
            }
        }
        Ok((cfg, db, queries, table, ds))
    })?;
    let table = match (table, ds) {
        (Some(t), _) => t,
        (None, Some(ds)) => table_for(&cfg, &ds)?,
        (None, None) => unreachable!("checked during validation"),
    };
    let result = match &queries {
        Some(q) => {
            let qs: Vec<_> = (0..q.len()).map(|i| (q.meta(i).scan_id, q.descriptor(i))).collect();
            evaluate_place_recognition(&db, &qs, &table, cfg.positive_threshold)?
        }
        None => evaluate_loop_closing(&db, &table, &cfg.loop_closing())?,
    };
    fs::create_dir_all(&g.out)?;
    write_pr_csv(create_file(&g.out.join(PR_FILE))?, &result.pr_curve)?;
    write_recall_csv(create_file(&g.out.join(RECALL_FILE))?, &result)?;
    write_metrics(create_file(&g.out.join(METRICS_FILE))?, &result)?;
    if svg {
        let points: Vec<(f64, f64)> = result
            .recall_at
            .iter()
            .filter(|(&n, _)| n <= lpr_core::retrieval::MAX_RECALL_N)
            .map(|(&n, &r)| (n as f64, r))
            .collect();
        fs::write(g.out.join(RECALL_SVG), line_chart("Recall@N", "N", "recall", &points))?;
    }
    println!(
        "{} queries ({} with a true match): AUC {:.4}, F1max {:.4}, recall@1 {:.4}, recall@1% {:.4}",
        result.n_queries,
        result.n_evaluable,
        result.auc,
        result.f1max,
        result.recall_at_1(),
        result.recall_at_1_percent()
    );
    Ok(())
}

fn write_metrics<W: Write>(out: W, r: &EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    let rows = [
        ("auc", r.auc.to_string()),
        ("f1max", r.f1max.to_string()),
        ("recall_at_1", r.recall_at_1().to_string()),
        ("recall_at_1_percent", r.recall_at_1_percent().to_string()),
        ("one_percent_n", r.one_percent_n.to_string()),
        ("n_queries", r.n_queries.to_string()),
        ("n_evaluable", r.n_evaluable.to_string()),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_yaw(
    g: &Globals,
    checkpoint: &Path,
    db_path: &Path,
    data: &Path,
    queries: Option<Range<usize>>,
    table: Option<&Path>,
    angles: &[f64],
) -> Result<()> {
    let (cfg, model, db, ds, query_ids, table) = validate(|| {
        let cfg = resolve_config(g, Some(data))?;
        let model = load_model(checkpoint)?;
        check_model_matches(&model, &cfg.projection())?;
        let db = read_db(db_path)?;
        if db.dim() != model.config.d_output {
            bail!("database dimension {} but the model outputs {}", db.dim(), model.config.d_output);
        }
        let ds = Dataset::load(data)?;
        let query_ids: Vec<usize> = match queries {
            Some(r) => {
                check_range(&r, ds.len())?;
                r.collect()
            }
            None => {
                let in_db: HashSet<usize> = db.metas().iter().map(|m| m.scan_id).collect();
                (0..ds.len()).filter(|i| !in_db.contains(i)).collect()
            }
        };
        if query_ids.is_empty() {
            bail!("no query scans: every scan is in the database");
        }
        if angles.iter().any(|a| !a.is_finite()) {
            bail!("yaw angles must be finite");
        }
        let table = table.map(read_table).transpose()?;
        Ok((cfg, model, db, ds, query_ids, table))
    })?;
    let table = match table {
        Some(t) => t,
        None => table_for(&cfg, &ds)?,
    };
    let qs: Vec<(usize, PointCloud)> = query_ids.iter().map(|&i| (i, ds.clouds[i].clone())).collect();
    let points = yaw_sweep_eval(&model, &db, &qs, &cfg.projection(), &table, angles)?;
    fs::create_dir_all(&g.out)?;
    write_yaw_csv(create_file(&g.out.join(YAW_FILE))?, &points)?;
    for p in &points {
        println!(
            "{:>6.1} deg  recall@1 {:.4}{}",
            p.angle_deg,
            p.recall_at_1,
            if p.pixel_aligned { "" } else { "  (not pixel-aligned)" }
        );
    }
    Ok(())
}

