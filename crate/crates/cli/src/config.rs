//! `key=value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use lpr_core::model::{parse_rie_layers, ModelConfig};
use lpr_core::pointcloud::{Pattern, ScanConfig, TrajectorySpec, WorldSpec};
use lpr_core::range_image::{default_delta, ProjectionConfig};
use lpr_core::retrieval::LoopClosingOptions;
use lpr_core::training::{TrainConfig, CANDIDATE_RADIUS, POSITIVE_OVERLAP};
use lpr_core::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub world_x_min: f64,
    pub world_x_max: f64,
    pub world_y_extent: f64,
    pub road_half_width: f64,
    pub landmark_count: usize,

    pub pattern: Pattern,
    pub steps: usize,
    pub revisit_after: usize,
    pub step_length: f64,
    pub start_x: f64,
    pub sensor_height: f64,
    pub lateral_jitter: f64,
    pub yaw_jitter: f64,

    pub beams: usize,
    pub horizontal_samples: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
    pub range_noise: f64,

    pub model: String,
    pub num_tm_blocks: Option<usize>,
    pub d_model: Option<usize>,
    pub n_head: Option<usize>,
    pub d_ffn: Option<usize>,
    pub d_inter: Option<usize>,
    pub d_output: Option<usize>,
    pub k_clusters: Option<usize>,
    pub rie_layers: Option<String>,

    pub k_p: usize,
    pub k_n: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tuples_per_step: usize,
    /// 0 means no limit.
    pub max_steps: usize,
    pub positive_threshold: f64,
    /// Train on the first this many scans; 0 means all.
    pub train_scans: usize,
    /// Overlap range tolerance in meters; defaults by beam count.
    pub delta: Option<f64>,
    pub candidate_radius: f64,

    pub exclusion: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let traj = TrajectorySpec::default();
        let train = TrainConfig::default();
        Self {
            seed: 42,
            world_x_min: world.x_min,
            world_x_max: world.x_max,
            world_y_extent: world.y_extent,
            road_half_width: world.road_half_width,
            landmark_count: world.landmark_count,
            pattern: traj.pattern,
            steps: traj.steps,
            revisit_after: traj.revisit_after,
            step_length: traj.step_length,
            start_x: traj.start_x,
            sensor_height: traj.sensor_height,
            lateral_jitter: traj.lateral_jitter,
            yaw_jitter: traj.yaw_jitter,
            beams: 32,
            horizontal_samples: 360,
            fov_up: 15.0,
            fov_down: 15.0,
            max_range: 50.0,
            range_noise: 0.0,
            model: "desk".into(),
            num_tm_blocks: None,
            d_model: None,
            n_head: None,
            d_ffn: None,
            d_inter: None,
            d_output: None,
            k_clusters: None,
            rie_layers: None,
            k_p: train.k_p,
            k_n: train.k_n,
            alpha: train.alpha,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            tuples_per_step: train.tuples_per_step,
            max_steps: 0,
            positive_threshold: POSITIVE_OVERLAP,
            train_scans: 0,
            delta: None,
            candidate_radius: CANDIDATE_RADIUS,
            exclusion: LoopClosingOptions::default().exclusion,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), Error> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "world_x_min" => self.world_x_min = parse(key, v)?,
            "world_x_max" => self.world_x_max = parse(key, v)?,
            "world_y_extent" => self.world_y_extent = parse(key, v)?,
            "road_half_width" => self.road_half_width = parse(key, v)?,
            "landmark_count" => self.landmark_count = parse(key, v)?,
            "pattern" => self.pattern = v.parse()?,
            "steps" => self.steps = parse(key, v)?,
            "revisit_after" => self.revisit_after = parse(key, v)?,
            "step_length" => self.step_length = parse(key, v)?,
            "start_x" => self.start_x = parse(key, v)?,
            "sensor_height" => self.sensor_height = parse(key, v)?,
            "lateral_jitter" => self.lateral_jitter = parse(key, v)?,
            "yaw_jitter" => self.yaw_jitter = parse(key, v)?,
            "beams" => self.beams = parse(key, v)?,
            "horizontal_samples" => self.horizontal_samples = parse(key, v)?,
            "fov_up" => self.fov_up = parse(key, v)?,
            "fov_down" => self.fov_down = parse(key, v)?,
            "max_range" => self.max_range = parse(key, v)?,
            "range_noise" => self.range_noise = parse(key, v)?,
            "model" => self.model = v.to_string(),
            "num_tm_blocks" => self.num_tm_blocks = Some(parse(key, v)?),
            "d_model" => self.d_model = Some(parse(key, v)?),
            "n_head" => self.n_head = Some(parse(key, v)?),
            "d_ffn" => self.d_ffn = Some(parse(key, v)?),
            "d_inter" => self.d_inter = Some(parse(key, v)?),
            "d_output" => self.d_output = Some(parse(key, v)?),
            "k_clusters" => self.k_clusters = Some(parse(key, v)?),
            "rie_layers" => self.rie_layers = Some(v.to_string()),
            "k_p" => self.k_p = parse(key, v)?,
            "k_n" => self.k_n = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "tuples_per_step" => self.tuples_per_step = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "positive_threshold" => self.positive_threshold = parse(key, v)?,
            "train_scans" => self.train_scans = parse(key, v)?,
            "delta" => self.delta = Some(parse(key, v)?),
            "candidate_radius" => self.candidate_radius = parse(key, v)?,
            "exclusion" => self.exclusion = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<(), Error> {
        self.world().validate()?;
        self.trajectory().validate()?;
        self.scan().validate()?;
        self.projection().validate()?;
        self.model_config()?;
        self.train_config().validate()?;
        if !(self.delta() > 0.0) || !(self.candidate_radius >= 0.0) {
            return Err(Error::Config("delta must be positive and candidate_radius non-negative".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec {
            x_min: self.world_x_min,
            x_max: self.world_x_max,
            y_extent: self.world_y_extent,
            road_half_width: self.road_half_width,
            landmark_count: self.landmark_count,
            ground_height: 0.0,
            seed: self.seed,
        }
    }

    pub fn trajectory(&self) -> TrajectorySpec {
        TrajectorySpec {
            pattern: self.pattern,
            steps: self.steps,
            step_length: self.step_length,
            revisit_after: self.revisit_after,
            start_x: self.start_x,
            sensor_height: self.sensor_height,
            lateral_jitter: self.lateral_jitter,
            yaw_jitter: self.yaw_jitter,
            seed: self.seed,
        }
    }

    pub fn scan(&self) -> ScanConfig {
        let mut s = ScanConfig::new(self.beams, self.horizontal_samples, self.fov_up, self.fov_down, self.max_range);
        s.range_noise = self.range_noise;
        s.noise_seed = self.seed;
        s
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig::from(&self.scan())
    }

    /// Preset with any explicit overrides; image size follows the scan.
    pub fn model_config(&self) -> Result<ModelConfig, Error> {
        let base = ModelConfig::preset(&self.model)?;
        let mut m = ModelConfig::with_dims(
            self.beams,
            self.horizontal_samples,
            self.d_model.unwrap_or(base.d_model),
            self.n_head.unwrap_or(base.n_head),
            self.d_ffn.unwrap_or(base.d_ffn),
            self.d_inter.unwrap_or(base.d_inter),
            self.d_output.unwrap_or(base.d_output),
            self.k_clusters.unwrap_or(base.k_clusters),
        );
        m.num_tm_blocks = self.num_tm_blocks.unwrap_or(base.num_tm_blocks);
        if let Some(layers) = &self.rie_layers {
            m.rie_layers = parse_rie_layers(layers)?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k_p: self.k_p,
            k_n: self.k_n,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            tuples_per_step: self.tuples_per_step,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            positive_threshold: self.positive_threshold,
            seed: self.seed,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| default_delta(self.beams))
    }

    pub fn loop_closing(&self) -> LoopClosingOptions {
        LoopClosingOptions {
            exclusion: self.exclusion,
            overlap_threshold: self.positive_threshold,
        }
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("write to string");
        put("seed", self.seed.to_string());
        put("world_x_min", self.world_x_min.to_string());
        put("world_x_max", self.world_x_max.to_string());
        put("world_y_extent", self.world_y_extent.to_string());
        put("road_half_width", self.road_half_width.to_string());
        put("landmark_count", self.landmark_count.to_string());
        put("pattern", self.pattern.to_string());
        put("steps", self.steps.to_string());
        put("revisit_after", self.revisit_after.to_string());
        put("step_length", self.step_length.to_string());
        put("start_x", self.start_x.to_string());
        put("sensor_height", self.sensor_height.to_string());
        put("lateral_jitter", self.lateral_jitter.to_string());
        put("yaw_jitter", self.yaw_jitter.to_string());
        put("beams", self.beams.to_string());
        put("horizontal_samples", self.horizontal_samples.to_string());
        put("fov_up", self.fov_up.to_string());
        put("fov_down", self.fov_down.to_string());
        put("max_range", self.max_range.to_string());
        put("range_noise", self.range_noise.to_string());
        put("model", self.model.clone());
        let opts = [
            ("num_tm_blocks", self.num_tm_blocks),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_ffn", self.d_ffn),
            ("d_inter", self.d_inter),
            ("d_output", self.d_output),
            ("k_clusters", self.k_clusters),
        ];
        for (k, v) in opts {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        if let Some(l) = &self.rie_layers {
            put("rie_layers", l.clone());
        }
        put("k_p", self.k_p.to_string());
        put("k_n", self.k_n.to_string());
        put("alpha", self.alpha.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("tuples_per_step", self.tuples_per_step.to_string());
        put("max_steps", self.max_steps.to_string());
        put("positive_threshold", self.positive_threshold.to_string());
        put("train_scans", self.train_scans.to_string());
        if let Some(d) = self.delta {
            put("delta", d.to_string());
        }
        put("candidate_radius", self.candidate_radius.to_string());
        put("exclusion", self.exclusion.to_string());
        s
    }
}
