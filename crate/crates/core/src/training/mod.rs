//! Overlap supervision, tuple sampling and the lazy triplet training loop.

mod loss;
mod overlap;

use std::io::Write;

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Bound, ModelParams, OverlapTransformer};
use crate::tensor::{Real, Tape, Tensor};

pub use loss::{lazy_triplet_loss, lazy_triplet_terms, TripletTerms};
pub use overlap::{build_overlap_table, OverlapTable};

/// Pairs above this overlap are positives, the rest negatives.
pub const POSITIVE_OVERLAP: f64 = 0.3;
/// Default radius for overlap candidates, meters.
pub const CANDIDATE_RADIUS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k_p: usize,
    pub k_n: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Tuples whose losses are averaged into one gradient step.
    pub tuples_per_step: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub positive_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_p: 6,
            k_n: 6,
            alpha: 0.5,
            learning_rate: 1e-3,
            epochs: 10,
            tuples_per_step: 1,
            max_steps: None,
            positive_threshold: POSITIVE_OVERLAP,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_p == 0 || self.k_n == 0 {
            return Err(Error::Config("k_p and k_n must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.tuples_per_step == 0 {
            return Err(Error::Config("tuples_per_step must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.positive_threshold) {
            return Err(Error::Config("positive_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws `k_p` positives and `k_n` negatives for `query` uniformly without
/// replacement. Returns `None` when the query has too few of either.
pub fn sample_tuple(
    table: &OverlapTable,
    query: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Option<TrainingTuple> {
    let pos = table.positives(query, cfg.positive_threshold);
    let neg = table.negatives(query, cfg.positive_threshold);
    if pos.len() < cfg.k_p || neg.len() < cfg.k_n {
        return None;
    }
    Some(TrainingTuple {
        query,
        positives: pos.choose_multiple(rng, cfg.k_p).copied().collect(),
        negatives: neg.choose_multiple(rng, cfg.k_n).copied().collect(),
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for (k, gk) in g.data().iter().enumerate() {
                let gk = gk.to_f64().expect("finite gradient");
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] = p[k] - T::lit(update);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub raw_loss: f64,
    pub clamped_loss: f64,
}

/// CSV `step,raw_loss,clamped_loss`.
pub fn write_loss_csv<W: Write>(out: W, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "raw_loss", "clamped_loss"])?;
    for r in history {
        w.write_record([r.step.to_string(), format!("{:e}", r.raw_loss), format!("{:e}", r.clamped_loss)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    /// Queries without enough positives or negatives.
    pub skipped_queries: usize,
}

/// Trains `model` in place on encoded range images `inputs` (see
/// [`crate::model::encode_image`]) supervised by `table`.
///
/// Each epoch visits every eligible query once in shuffled order; a step
/// averages the clamped loss of `tuples_per_step` tuples and applies one
/// Adam update. Runs single-threaded and is deterministic for a fixed seed.
/// `on_step` sees each loss record as it is produced.
pub fn train(
    model: &mut OverlapTransformer<f32>,
    inputs: &[Tensor<f32>],
    table: &OverlapTable,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    if inputs.len() != table.n_scans() {
        return Err(Error::invalid(
            "train",
            format!("{} inputs but the overlap table covers {} scans", inputs.len(), table.n_scans()),
        ));
    }
    let expected = [1, model.config.h, model.config.w];
    if let Some(bad) = inputs.iter().find(|t| t.shape() != expected) {
        return Err(Error::Shape {
            op: "train",
            lhs: bad.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eligible: Vec<usize> = (0..inputs.len())
        .filter(|&q| {
            table.positives(q, cfg.positive_threshold).len() >= cfg.k_p
                && table.negatives(q, cfg.positive_threshold).len() >= cfg.k_n
        })
        .collect();
    let mut report = TrainReport {
        skipped_queries: inputs.len() - eligible.len(),
        ..TrainReport::default()
    };
    if eligible.is_empty() {
        return Err(Error::NoTrainingTuples);
    }
    info!(
        "training on {} queries ({} skipped), {} epochs",
        eligible.len(),
        report.skipped_queries,
        cfg.epochs
    );
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let alpha = cfg.alpha as f32;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.tuples_per_step) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let tuples: Vec<TrainingTuple> = batch
                .iter()
                .map(|&q| sample_tuple(table, q, cfg, &mut rng).expect("eligible query"))
                .collect();
            let tape = Tape::<f32>::new();
            let bound = Bound::new(&tape, &model.config, &model.params);
            let describe = |i: usize| bound.forward(tape.constant(inputs[i].clone()));
            let mut raws = Vec::with_capacity(tuples.len());
            let mut clamps = Vec::with_capacity(tuples.len());
            for t in &tuples {
                let q = describe(t.query)?;
                let ps = t.positives.iter().map(|&i| describe(i)).collect::<Result<Vec<_>>>()?;
                let ns = t.negatives.iter().map(|&i| describe(i)).collect::<Result<Vec<_>>>()?;
                let terms = lazy_triplet_terms(q, &ps, &ns, alpha)?;
                raws.push(terms.raw.reshape(&[1])?);
                clamps.push(terms.clamped.reshape(&[1])?);
            }
            let scale = 1.0 / tuples.len() as f32;
            let raw = crate::tensor::Var::concat(&raws, 0)?.sum_all().scale(scale);
            let loss = crate::tensor::Var::concat(&clamps, 0)?.sum_all().scale(scale);
            let record = LossRecord {
                step,
                raw_loss: f64::from(raw.item().expect("scalar")),
                clamped_loss: f64::from(loss.item().expect("scalar")),
            };
            if !record.raw_loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = loss.backward()?;
            let grad_tensors: Vec<Tensor<f32>> = bound
                .vars()
                .iter()
                .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
                .collect();
            if grad_tensors.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { step });
            }
            drop(grads);
            drop(bound);
            drop(tape);
            adam.step(&mut model.params, &grad_tensors);
            debug!(
                "epoch {epoch} step {step}: raw {:.4} clamped {:.4}",
                record.raw_loss, record.clamped_loss
            );
            on_step(&record);
            report.history.push(record);
            step += 1;
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence { step });
    }
    Ok(report)
}
