//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 4 7` runs a subset. The report exits 0
//! unless `LPR_ACCEPTANCE_STRICT` is set, in which case any FAIL exits 1.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lpr_core::model::{encode_image, Bound, GlobalDescriptor, ModelConfig, ModelParams, OverlapTransformer};
use lpr_core::pointcloud::{
    apply_pose, generate_trajectory, simulate_scan, Frame, Pattern, Point3, PointCloud, Pose, ScanConfig,
    SyntheticWorld, TrajectorySpec, WorldSpec,
};
use lpr_core::range_image::{
    column_shift, compute_overlap, default_delta, project_cloud, reproject, yaw_to_shift, ProjectionConfig, RangeImage,
    SENTINEL,
};
use lpr_core::retrieval::{
    default_yaw_angles, evaluate_loop_closing, evaluate_place_recognition, euclidean, yaw_sweep_eval,
    DescriptorDatabase, DescriptorMeta, EvalResult, LoopClosingOptions,
};
use lpr_core::tensor::{Real, Tape, Tensor};
use lpr_core::training::{
    build_overlap_table, lazy_triplet_terms, train, OverlapTable, TrainConfig, CANDIDATE_RADIUS, POSITIVE_OVERLAP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Helpers shared by several criteria.

fn random_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

/// Circular shift along `axis`: output index `j` takes input `(j - s) mod n`.
fn roll<T: Real>(t: &Tensor<T>, axis: usize, s: usize) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.clone();
    for o in 0..outer {
        for j in 0..n {
            let src = (j + n - s % n) % n;
            for r in 0..inner {
                out.data_mut()[(o * n + j) * inner + r] = t.data()[(o * n + src) * inner + r];
            }
        }
    }
    out
}

fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

/// Moves every parameter off its initial value so biases are exercised and
/// no unit sits on a ReLU kink.
fn jitter<T: Real>(params: &mut ModelParams<T>, rng: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v = *v + T::lit(rng.random_range(-0.1..0.1));
        }
    }
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> RangeImage {
    let pc = ProjectionConfig::new(cfg.w, cfg.h, 15.0, 15.0, 50.0).unwrap();
    let data = (0..cfg.h * cfg.w)
        .map(|_| if rng.random_bool(0.2) { SENTINEL } else { rng.random_range(0.5f32..50.0) })
        .collect();
    RangeImage::from_data(&pc, data).unwrap()
}

fn poses_and_clouds(frames: &[Frame]) -> (Vec<Pose>, Vec<PointCloud>) {
    (frames.iter().map(|f| f.pose).collect(), frames.iter().map(|f| f.cloud.clone()).collect())
}

/// The pairs of `table` with both scans below `n`.
fn restrict(table: &OverlapTable, n: usize) -> OverlapTable {
    let mut out = OverlapTable::new(n);
    for (i, j, v) in table.iter().filter(|&(i, j, _)| i < n && j < n) {
        out.insert(i, j, v).unwrap();
    }
    out
}

fn database(descs: &[GlobalDescriptor], poses: &[Pose]) -> DescriptorDatabase {
    let meta = (0..descs.len())
        .map(|i| DescriptorMeta {
            scan_id: i,
            pose: poses[i],
            timestamp: i as f64 * 0.1,
        })
        .collect();
    DescriptorDatabase::from_descriptors(descs, meta).unwrap()
}

fn mean_time(d: Duration, n: usize) -> f64 {
    d.as_secs_f64() * 1e3 / n as f64
}

// 1. Projection and shift algebra.

fn c1_projection_shift() -> Outcome {
    let start = Instant::now();
    let cfg = ProjectionConfig::new(900, 64, 15.0, 15.0, 100.0).unwrap();
    let scan = ScanConfig::new(64, 900, 15.0, 15.0, 100.0);
    let world = SyntheticWorld::generate(&WorldSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut same, mut total, mut worst) = (0usize, 0usize, 1.0f64);
    for c in 0..100 {
        // Alternate uniform random clouds and ray-cast scans at random poses.
        let cloud = if c % 2 == 0 {
            let points = (0..20_000)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-60.0..60.0),
                        rng.random_range(-60.0..60.0),
                        rng.random_range(-8.0..8.0),
                    )
                })
                .collect();
            PointCloud::new(points, "random")
        } else {
            let pose = Pose::from_yaw_translation(rng.random_range(-PI..PI), [rng.random_range(0.0..400.0), 0.0, 1.8]);
            simulate_scan(&world, &pose, &scan).unwrap()
        };
        let base = project_cloud(&cloud, &cfg).unwrap();
        for _ in 0..20 {
            let k = rng.random_range(1..cfg.w);
            let theta = 2.0 * PI * k as f64 / cfg.w as f64;
            let rotated = project_cloud(&apply_pose(&cloud, &Pose::yaw_rotation(theta)), &cfg).unwrap();
            let shifted = column_shift(&base, yaw_to_shift(theta, cfg.w).unwrap());
            let (mut s, mut t) = (0usize, 0usize);
            for (&a, &b) in rotated.data().iter().zip(shifted.data()) {
                if a != SENTINEL || b != SENTINEL {
                    t += 1;
                    s += (a == b) as usize;
                }
            }
            worst = worst.min(s as f64 / t as f64);
            same += s;
            total += t;
        }
    }
    let frac = same as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        frac >= 0.99 && secs < 60.0,
        format!("agreement {frac:.5} over 2000 rotations (worst case {worst:.5}) in {secs:.1} s; need >= 0.99, < 60 s"),
    )
}

// 2. RIE equivariance.

fn c2_rie_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut exact = 0;
    for case in 0..50 {
        let cfg = if case % 2 == 0 { ModelConfig::small() } else { ModelConfig::tiny() };
        let mut model = OverlapTransformer::<f32>::new(cfg.clone(), case).unwrap();
        jitter(&mut model.params, &mut rng);
        let x: Tensor<f32> = Tensor::from_fn(&[1, cfg.h, cfg.w], |_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.01f32..1.0)
            }
        });
        let s = rng.random_range(1..cfg.w);
        let base = model.rie_forward(&x).unwrap();
        let shifted = model.rie_forward(&roll(&x, 2, s)).unwrap();
        exact += (shifted == roll(&base, 0, s)) as usize;
    }
    outcome(exact == 50, format!("{exact}/50 (image, shift) pairs bit-identical"))
}

// 3. TM equivariance, descriptor and GDG invariance.

fn c3_tm_gdg() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = ModelConfig::small();
    let (mut tm_worst, mut desc_worst, mut perm_worst) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..50 {
        let mut model = OverlapTransformer::<f32>::new(cfg.clone(), 200 + case).unwrap();
        jitter(&mut model.params, &mut rng);
        let s = rng.random_range(1..cfg.w);

        let f: Tensor<f32> = random_tensor(&[cfg.w, cfg.d_model], &mut rng, -1.0, 1.0);
        let base = model.tm_forward(&f).unwrap();
        let shifted = model.tm_forward(&roll(&f, 0, s)).unwrap();
        tm_worst = tm_worst.max(max_abs_diff(&shifted, &roll(&base, 0, s)));

        let img = random_image(&cfg, &mut rng);
        let d0 = model.descriptor(&img).unwrap();
        let d1 = model.descriptor(&column_shift(&img, s as i64)).unwrap();
        desc_worst = desc_worst.max(d0.distance(&d1));

        let feats: Tensor<f32> = random_tensor(&[cfg.w, cfg.d_model], &mut rng, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..cfg.w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let c = cfg.d_model;
        let permuted = Tensor::from_fn(&[cfg.w, c], |i| feats.data()[perm[i / c] * c + i % c]);
        let g0 = model.gdg_forward(&feats).unwrap();
        let g1 = model.gdg_forward(&permuted).unwrap();
        perm_worst = perm_worst.max(euclidean(g0.data(), g1.data()));
    }
    outcome(
        tm_worst < 1e-5 && desc_worst < 1e-4 && perm_worst < 1e-4,
        format!(
            "TM max element error {tm_worst:.2e} (< 1e-5), descriptor L2 {desc_worst:.2e} (< 1e-4), \
             GDG under permutation L2 {perm_worst:.2e} (< 1e-4), 50 cases each"
        ),
    )
}

// 4. End-to-end yaw sweep on a trained tiny model.

fn c4_yaw_sweep() -> Outcome {
    let scan = ScanConfig::new(8, 36, 15.0, 15.0, 50.0);
    let proj = ProjectionConfig::from(&scan);
    let world = SyntheticWorld::generate(&WorldSpec {
        x_max: 1060.0,
        landmark_count: 900,
        ..WorldSpec::default()
    })
    .unwrap();
    let spec = TrajectorySpec {
        pattern: Pattern::Loop,
        steps: 700,
        revisit_after: 500,
        step_length: 2.0,
        ..TrajectorySpec::default()
    };
    let frames = generate_trajectory(&world, &spec, &scan).unwrap();
    let (poses, clouds) = poses_and_clouds(&frames);
    let table = build_overlap_table(&poses, &clouds, &proj, default_delta(8), CANDIDATE_RADIUS).unwrap();
    let images: Vec<RangeImage> = clouds.iter().map(|c| project_cloud(c, &proj).unwrap()).collect();
    let inputs: Vec<Tensor<f32>> = images[..500].iter().map(encode_image).collect();
    let mut model = OverlapTransformer::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    train(&mut model, &inputs, &restrict(&table, 500), &tc, |_| {}).unwrap();

    let db = database(&model.descriptors(&images[..500]).unwrap(), &poses);
    let queries: Vec<(usize, PointCloud)> = (500..700).map(|i| (i, clouds[i].clone())).collect();
    let points = yaw_sweep_eval(&model, &db, &queries, &proj, &table, &default_yaw_angles()).unwrap();
    let recalls: Vec<f64> = points.iter().map(|p| p.recall_at_1).collect();
    let spread = recalls.iter().cloned().fold(f64::MIN, f64::max) - recalls.iter().cloned().fold(f64::MAX, f64::min);
    let baseline = points[0].recall_at_1;
    let aligned = points.iter().filter(|p| p.pixel_aligned).count();
    let aligned_equal = points.iter().filter(|p| p.pixel_aligned).all(|p| p.recall_at_1 == baseline);
    outcome(
        points.len() == 12 && spread < 0.02 && aligned_equal,
        format!(
            "recall@1 over 12 angles {recalls:.3?}: spread {spread:.4} (< 0.02); \
             {aligned} pixel-aligned angles {} baseline {baseline:.3}",
            if aligned_equal { "equal" } else { "differ from" }
        ),
    )
}

// 5. Finite differences on the full loss.

/// Clamped lazy triplet loss of the model on one tuple, float64.
fn tuple_loss(cfg: &ModelConfig, params: &ModelParams<f64>, xs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::<f64>::inference();
    let bound = Bound::new(&tape, cfg, params);
    let d: Vec<_> = xs.iter().map(|x| bound.forward(tape.constant(x.clone())).unwrap()).collect();
    lazy_triplet_terms(d[0], &d[1..7], &d[7..13], 0.5)
        .unwrap()
        .clamped
        .item()
        .unwrap()
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    jitter(&mut params, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..13).map(|_| random_tensor(&[1, cfg.h, cfg.w], &mut rng, 0.05, 1.0)).collect();

    let tape = Tape::<f64>::new();
    let bound = Bound::new(&tape, &cfg, &params);
    let d: Vec<_> = xs.iter().map(|x| bound.forward(tape.constant(x.clone())).unwrap()).collect();
    let loss = lazy_triplet_terms(d[0], &d[1..7], &d[7..13], 0.5).unwrap().clamped;
    let value = loss.item().unwrap();
    let grads = loss.backward().unwrap();
    let analytic: Vec<Tensor<f64>> = bound.vars().iter().map(|v| grads.get(v).unwrap().clone()).collect();
    drop(bound);

    let (step, tol) = (1e-5, 1e-6);
    let names = params.names().to_vec();
    let total = params.numel();
    let mut central = |p: usize, i: usize, h: f64| {
        let orig = params.tensors()[p].data()[i];
        params.tensor_mut(p).data_mut()[i] = orig + h;
        let plus = tuple_loss(&cfg, &params, &xs);
        params.tensor_mut(p).data_mut()[i] = orig - h;
        let minus = tuple_loss(&cfg, &params, &xs);
        params.tensor_mut(p).data_mut()[i] = orig;
        (plus - minus) / (2.0 * h)
    };
    let (mut excluded, mut worst, mut worst_name, mut failing) = (0usize, 0.0f64, String::new(), Vec::new());
    for (p, name) in names.iter().enumerate() {
        let a = analytic[p].data();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if name.ends_with("attn.key.bias") {
            // Adding a constant to every score of a softmax row changes nothing.
            if (0..a.len()).any(|i| a[i].abs() > 1e-8 || central(p, i, step).abs() > 1e-8) {
                failing.push(name.clone());
            }
            continue;
        }
        let mut abs_err = 0.0f64;
        for (i, &ai) in a.iter().enumerate() {
            let full = central(p, i, step);
            // A disagreement is excused only when the stencil straddles a
            // ReLU kink, which shows as disagreement with the half step.
            if (ai - full).abs() >= tol * scale && (full - central(p, i, step / 2.0)).abs() > 0.5 * tol * scale {
                excluded += 1;
                continue;
            }
            abs_err = abs_err.max((ai - full).abs());
        }
        let rel = if scale > 0.0 { abs_err / scale } else { f64::INFINITY };
        if !(rel < tol) {
            failing.push(format!("{name} ({rel:.2e})"));
        }
        if rel > worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failing.is_empty() && excluded * 100 <= total && secs < 120.0 && value > 0.0,
        format!(
            "{} tensors, {total} parameters, loss {value:.4}: worst relative error {worst:.2e} ({worst_name}), \
             {excluded} kink-straddling elements excluded, {} failing, {secs:.1} s; need < 1e-6, < 120 s",
            names.len(),
            failing.len()
        ),
    )
}

// 6. Overlap against a naive recount.

fn naive_overlap(q: &RangeImage, r: &RangeImage, delta: f64) -> f64 {
    let (mut vq, mut vr, mut hit) = (0.0, 0.0, 0.0);
    for v in 0..q.h() {
        for u in 0..q.w() {
            let (a, b) = (q.get(v, u), r.get(v, u));
            if a >= 0.0 {
                vq += 1.0;
            }
            if b >= 0.0 {
                vr += 1.0;
            }
            if a >= 0.0 && b >= 0.0 && (f64::from(a) - f64::from(b)).abs() <= delta {
                hit += 1.0;
            }
        }
    }
    hit / f64::min(vq, vr)
}

fn c6_overlap_oracle() -> Outcome {
    let scan = ScanConfig::new(32, 360, 15.0, 15.0, 50.0);
    let proj = ProjectionConfig::from(&scan);
    let world = SyntheticWorld::generate(&WorldSpec::default()).unwrap();
    let spec = TrajectorySpec {
        steps: 100,
        revisit_after: 60,
        step_length: 2.0,
        ..TrajectorySpec::default()
    };
    let frames = generate_trajectory(&world, &spec, &scan).unwrap();
    let images: Vec<RangeImage> = frames.iter().map(|f| project_cloud(&f.cloud, &proj).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let delta = default_delta(32);
    let (mut pairs, mut worst, mut partial) = (0, 0.0f64, 0);
    while pairs < 200 {
        let i = rng.random_range(0..frames.len());
        let j = rng.random_range(0..frames.len());
        let Ok(r) = reproject(&frames[j].cloud, &frames[j].pose, &frames[i].pose, &proj) else {
            continue;
        };
        let Ok(fast) = compute_overlap(&images[i], &r, delta) else {
            continue;
        };
        let slow = naive_overlap(&images[i], &r, delta);
        worst = worst.max((fast - slow).abs());
        partial += (fast > 0.0 && fast < 1.0) as usize;
        pairs += 1;
    }
    let self_exact = images.iter().all(|img| compute_overlap(img, img, delta).unwrap() == 1.0);
    outcome(
        worst <= 1e-12 && self_exact,
        format!(
            "200 pairs ({partial} with partial overlap), max |fast - naive| {worst:.1e} (<= 1e-12); \
             self-overlap exactly 1.0 on all {} scans: {self_exact}",
            images.len()
        ),
    )
}

// 7 and 8. The 600-scan benchmark.

struct Bench {
    poses: Vec<Pose>,
    images: Vec<RangeImage>,
    table: OverlapTable,
    train_table: OverlapTable,
    inputs: Vec<Tensor<f32>>,
}

const BENCH_DB: usize = 400;
const BENCH_SCANS: usize = 600;
const BENCH_EPOCHS: usize = 3;

impl Bench {
    fn build() -> Self {
        let scan = ScanConfig::new(32, 360, 15.0, 15.0, 50.0);
        let proj = ProjectionConfig::from(&scan);
        let world = SyntheticWorld::generate(&WorldSpec {
            x_max: 860.0,
            landmark_count: 700,
            ..WorldSpec::default()
        })
        .unwrap();
        let spec = TrajectorySpec {
            pattern: Pattern::Loop,
            steps: BENCH_SCANS,
            revisit_after: BENCH_DB,
            step_length: 2.0,
            ..TrajectorySpec::default()
        };
        let frames = generate_trajectory(&world, &spec, &scan).unwrap();
        let (poses, clouds) = poses_and_clouds(&frames);
        let table = build_overlap_table(&poses, &clouds, &proj, default_delta(32), CANDIDATE_RADIUS).unwrap();
        let images: Vec<RangeImage> = clouds.iter().map(|c| project_cloud(c, &proj).unwrap()).collect();
        let inputs = images[..BENCH_DB].iter().map(encode_image).collect();
        Self {
            poses,
            train_table: restrict(&table, BENCH_DB),
            images,
            table,
            inputs,
        }
    }

    fn evaluate(&self, model: &OverlapTransformer<f32>) -> EvalResult {
        let descs = model.descriptors(&self.images).unwrap();
        let db = database(&descs[..BENCH_DB], &self.poses);
        let queries: Vec<_> = (BENCH_DB..BENCH_SCANS).map(|i| (i, descs[i].clone())).collect();
        evaluate_place_recognition(&db, &queries, &self.table, POSITIVE_OVERLAP).unwrap()
    }

    /// Trains a fresh small model with `blocks` transformer blocks; returns
    /// it with the training time.
    fn train(&self, blocks: usize) -> (OverlapTransformer<f32>, Duration) {
        let mut cfg = ModelConfig::small();
        cfg.num_tm_blocks = blocks;
        let mut model = OverlapTransformer::<f32>::new(cfg, 1).unwrap();
        let tc = TrainConfig {
            epochs: BENCH_EPOCHS,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        train(&mut model, &self.inputs, &self.train_table, &tc, |_| {}).unwrap();
        (model, start.elapsed())
    }
}

#[derive(Default)]
struct Shared {
    bench: Option<Bench>,
    trained_one_block: Option<OverlapTransformer<f32>>,
}

impl Shared {
    fn bench(&mut self) -> &Bench {
        self.bench.get_or_insert_with(Bench::build)
    }
}

fn c7_learning_signal(sh: &mut Shared) -> Outcome {
    let bench = sh.bench();
    let untrained = OverlapTransformer::<f32>::new(ModelConfig::small(), 1).unwrap();
    let before = bench.evaluate(&untrained);
    let (model, elapsed) = bench.train(1);
    let after = bench.evaluate(&model);
    let minutes = elapsed.as_secs_f64() / 60.0;
    let pass = before.recall_at_1() < 0.2 && after.recall_at_1() > 0.9 && after.auc > before.auc && minutes <= 15.0;
    let detail = format!(
        "{} queries ({} with a true match): recall@1 {:.3} -> {:.3}, AUC {:.4} -> {:.4} after {BENCH_EPOCHS} epochs \
         in {minutes:.1} min; need before < 0.2, after > 0.9, AUC strictly higher, <= 15 min",
        after.n_queries,
        after.n_evaluable,
        before.recall_at_1(),
        after.recall_at_1(),
        before.auc,
        after.auc
    );
    sh.trained_one_block = Some(model);
    outcome(pass, detail)
}

/// Mean per-scan extraction time over `images`, best of three passes, one thread.
fn extraction_ms(model: &OverlapTransformer<f32>, images: &[RangeImage]) -> f64 {
    (0..3)
        .map(|_| {
            let start = Instant::now();
            for img in images {
                model.descriptor(img).unwrap();
            }
            mean_time(start.elapsed(), images.len())
        })
        .fold(f64::INFINITY, f64::min)
}

fn c8_ablation(sh: &mut Shared) -> Outcome {
    if sh.trained_one_block.is_none() {
        let (model, _) = sh.bench().train(1);
        sh.trained_one_block = Some(model);
    }
    let bench = sh.bench.as_ref().unwrap();
    let one = sh.trained_one_block.as_ref().unwrap();
    let (zero, _) = bench.train(0);
    let r1 = bench.evaluate(one).recall_at_1();
    let r0 = bench.evaluate(&zero).recall_at_1();

    let sample = &bench.images[..50];
    let times: Vec<f64> = [0usize, 1, 3]
        .iter()
        .map(|&b| {
            let mut cfg = ModelConfig::small();
            cfg.num_tm_blocks = b;
            extraction_ms(&OverlapTransformer::<f32>::new(cfg, 1).unwrap(), sample)
        })
        .collect();
    let monotone = times[0] < times[1] && times[1] < times[2];
    outcome(
        r1 >= r0 && monotone,
        format!(
            "recall@1 with 1 block {r1:.3} vs 0 blocks {r0:.3}; extraction ms/scan for 0/1/3 blocks \
             {:.3} / {:.3} / {:.3}",
            times[0], times[1], times[2]
        ),
    )
}

// 9. Retrieval exactness and metric sanity.

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> GlobalDescriptor {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    GlobalDescriptor {
        values: v.iter().map(|x| x / n).collect(),
    }
}

/// Queries `n..2n` each truly match database rows within `reach` of `q - n`.
fn two_lap_table(n: usize, reach: usize) -> OverlapTable {
    let mut t = OverlapTable::new(2 * n);
    for q in n..2 * n {
        let c = q - n;
        for r in c.saturating_sub(reach)..(c + reach + 1).min(n) {
            t.insert(q, r, 0.9).unwrap();
        }
    }
    t
}

fn c9_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let poses: Vec<Pose> = (0..2000).map(|i| Pose::from_yaw_translation(0.0, [i as f64, 0.0, 0.0])).collect();
    let descs: Vec<GlobalDescriptor> = (0..1000).map(|_| random_unit(&mut rng, 32)).collect();
    let db = database(&descs, &poses);
    let mut mismatches = 0;
    for _ in 0..100 {
        let q = random_unit(&mut rng, 32);
        let mut oracle: Vec<(f64, usize)> = descs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let dist = d
                    .values
                    .iter()
                    .zip(&q.values)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (dist, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in [1, 10, 1000] {
            let hits = db.query(&q.values, k, None).unwrap();
            let same = hits.len() == k && hits.iter().zip(&oracle).all(|(h, o)| h.scan_id == o.1 && h.distance == o.0);
            mismatches += (!same) as usize;
        }
    }

    let n = 400;
    let table = two_lap_table(n, 2);
    let descs: Vec<GlobalDescriptor> = (0..2 * n).map(|_| random_unit(&mut rng, 16)).collect();
    let db = database(&descs[..n], &poses);
    let queries: Vec<_> = (n..2 * n).map(|i| (i, descs[i].clone())).collect();
    let r = evaluate_place_recognition(&db, &queries, &table, POSITIVE_OVERLAP).unwrap();
    let recalls: Vec<f64> = r.recall_at.values().copied().collect();
    let monotone = recalls.windows(2).all(|w| w[0] <= w[1]);

    let n = 150;
    let table = two_lap_table(n, 0);
    let oracle: Vec<GlobalDescriptor> = (0..2 * n)
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i % n] = 1.0;
            GlobalDescriptor { values: v }
        })
        .collect();
    let lc = evaluate_loop_closing(&database(&oracle, &poses), &table, &LoopClosingOptions::default()).unwrap();
    let qs: Vec<_> = (n..2 * n).map(|i| (i, oracle[i].clone())).collect();
    let pr = evaluate_place_recognition(&database(&oracle[..n], &poses), &qs, &table, POSITIVE_OVERLAP).unwrap();
    outcome(
        mismatches == 0 && monotone && lc.auc == 1.0 && pr.auc == 1.0,
        format!(
            "{mismatches} mismatches against the full-sort oracle (100 queries x top-1/10/1000, 1000 rows); \
             recall@N monotone: {monotone}; oracle AUC loop closing {} / place recognition {}",
            lc.auc, pr.auc
        ),
    )
}

// 10. CLI determinism.

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn lpr(args: &[&Path]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_lpr"))
        .args(args)
        .env_remove("LPR_LOG")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c10_cli_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.cfg");
    fs::write(
        &cfg,
        "seed=42\nmodel=tiny\nbeams=8\nhorizontal_samples=36\nsteps=120\nrevisit_after=60\nstep_length=2\n\
         world_x_max=300\nepochs=1\n",
    )
    .unwrap();
    let p = |s: &str| root.join(s);
    let a = Path::new;
    let mut ok = true;
    for run in ["1", "2"] {
        let (data, model, db) = (p(&format!("data{run}")), p(&format!("train{run}")), p(&format!("db{run}")));
        ok &= lpr(&[a("--config"), &cfg, a("--out"), &data, a("generate")]);
        ok &= lpr(&[a("--out"), &model, a("train"), a("--data"), &data]);
        ok &= lpr(&[
            a("--out"),
            &db,
            a("extract"),
            a("--checkpoint"),
            &model.join("model.lprw"),
            a("--data"),
            &data,
        ]);
    }
    if !ok {
        return outcome(false, "a CLI run failed".into());
    }
    let verdicts: Vec<(&str, bool, usize)> = [("generate", "data"), ("train", "train"), ("extract", "db")]
        .iter()
        .map(|&(name, dir)| {
            let (x, y) = (snapshot(&p(&format!("{dir}1"))), snapshot(&p(&format!("{dir}2"))));
            (name, x == y, x.len())
        })
        .collect();
    outcome(
        verdicts.iter().all(|v| v.1),
        verdicts
            .iter()
            .map(|(n, same, files)| format!("{n}: {files} files {}", if *same { "identical" } else { "DIFFER" }))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

// Runtime target of the extract command at the published input size.

fn runtime_full_config() -> Outcome {
    let cfg = ModelConfig::full();
    let model = OverlapTransformer::<f32>::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let images: Vec<RangeImage> = (0..5).map(|_| random_image(&cfg, &mut rng)).collect();
    let ms = extraction_ms(&model, &images);
    outcome(ms < 50.0, format!("{ms:.1} ms per 1x64x900 scan on one thread; target < 50 ms"))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut shared = Shared::default();
    type Criterion = (usize, &'static str, fn(&mut Shared) -> Outcome);
    let criteria: [Criterion; 11] = [
        (1, "projection/shift algebra", |_| c1_projection_shift()),
        (2, "exact RIE equivariance", |_| c2_rie_equivariance()),
        (3, "TM equivariance and GDG invariance", |_| c3_tm_gdg()),
        (4, "end-to-end yaw sweep", |_| c4_yaw_sweep()),
        (5, "gradient correctness", |_| c5_gradients()),
        (6, "overlap oracle", |_| c6_overlap_oracle()),
        (7, "learning signal", c7_learning_signal),
        (8, "ablation direction", c8_ablation),
        (9, "retrieval exactness and metric sanity", |_| c9_retrieval()),
        (10, "determinism", |_| c10_cli_determinism()),
        (11, "extraction runtime at 1x64x900", |_| runtime_full_config()),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected(n) {
            continue;
        }
        let start = Instant::now();
        let o = run(&mut shared);
        failed += (!o.pass) as usize;
        println!(
            "{} criterion {n} ({name}): {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var_os("LPR_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
