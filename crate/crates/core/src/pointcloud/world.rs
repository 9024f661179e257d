//! Ray-cast LiDAR simulation over a world of cylinders and boxes standing on
//! a flat ground plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Point3, PointCloud, Pose};
use crate::error::{Error, Result};

/// Obstacles stand on the ground plane and extend `height` meters up.
#[derive(Clone, Debug, PartialEq)]
pub enum Landmark {
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// Axis-aligned box with footprint `[min, max]`.
    Box {
        min: [f64; 2],
        max: [f64; 2],
        height: f64,
    },
}

impl Landmark {
    fn center(&self) -> [f64; 2] {
        match self {
            Landmark::Cylinder { center, .. } => *center,
            Landmark::Box { min, max, .. } => [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0],
        }
    }

    fn footprint_radius(&self) -> f64 {
        match self {
            Landmark::Cylinder { radius, .. } => *radius,
            Landmark::Box { min, max, .. } => {
                0.5 * ((max[0] - min[0]).powi(2) + (max[1] - min[1]).powi(2)).sqrt()
            }
        }
    }
}

/// Parameters for [`SyntheticWorld::generate`]: landmarks are scattered over
/// `[x_min, x_max] x [-y_extent, y_extent]`, keeping the road strip
/// `|y| < road_half_width` clear.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_extent: f64,
    pub road_half_width: f64,
    pub landmark_count: usize,
    pub ground_height: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            x_min: -60.0,
            x_max: 460.0,
            y_extent: 45.0,
            road_half_width: 5.0,
            landmark_count: 400,
            ground_height: 0.0,
            seed: 42,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.landmark_count < MIN_LANDMARKS {
            return Err(Error::Config(format!(
                "a world needs at least {MIN_LANDMARKS} landmarks, got {}",
                self.landmark_count
            )));
        }
        if !(self.x_max > self.x_min) || !(self.y_extent > self.road_half_width + 2.0) || !(self.road_half_width > 0.0) {
            return Err(Error::Config("world extent is too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub landmarks: Vec<Landmark>,
    /// `None` means there is no ground plane.
    pub ground_height: Option<f64>,
    pub rng_seed: u64,
}

/// Minimum landmark count for worlds built by [`SyntheticWorld::generate`].
pub const MIN_LANDMARKS: usize = 50;

impl SyntheticWorld {
    /// Deterministic random world.
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut landmarks = Vec::with_capacity(spec.landmark_count);
        while landmarks.len() < spec.landmark_count {
            let x = rng.random_range(spec.x_min..spec.x_max);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * rng.random_range(spec.road_half_width..spec.y_extent);
            let lm = if rng.random_bool(0.6) {
                Landmark::Cylinder {
                    center: [x, y],
                    radius: rng.random_range(0.15..1.5),
                    height: rng.random_range(1.0..12.0),
                }
            } else {
                let hx = rng.random_range(1.0..7.0);
                let hy = rng.random_range(1.0..7.0);
                Landmark::Box {
                    min: [x - hx, y - hy],
                    max: [x + hx, y + hy],
                    height: rng.random_range(1.5..15.0),
                }
            };
            if lm.center()[1].abs() - lm.footprint_radius() < spec.road_half_width {
                continue;
            }
            landmarks.push(lm);
        }
        Ok(Self {
            landmarks,
            ground_height: Some(spec.ground_height),
            rng_seed: spec.seed,
        })
    }

    pub fn from_landmarks(landmarks: Vec<Landmark>, ground_height: Option<f64>) -> Self {
        Self {
            landmarks,
            ground_height,
            rng_seed: 0,
        }
    }
}

/// Sensor model for [`simulate_scan`].
///
/// Beam `i` points at the elevation of range-image row `i`'s center and
/// sample `j` at the azimuth of column `j`'s center, for a projection with
/// the same field of view and `h = beams`, `w = horizontal_samples`. Such a
/// scan therefore fills each pixel with at most one point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    pub beams: usize,
    pub horizontal_samples: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
    /// Standard deviation of additive Gaussian range noise, meters.
    pub range_noise: f64,
    pub noise_seed: u64,
}

impl ScanConfig {
    pub fn new(beams: usize, horizontal_samples: usize, fov_up: f64, fov_down: f64, max_range: f64) -> Self {
        Self {
            beams,
            horizontal_samples,
            fov_up,
            fov_down,
            max_range,
            range_noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams < 8 || self.horizontal_samples < 36 {
            return Err(Error::Config(format!(
                "scan needs beams >= 8 and horizontal_samples >= 36, got {} x {}",
                self.beams, self.horizontal_samples
            )));
        }
        if !(self.fov_up > 0.0 && self.fov_down > 0.0 && self.max_range > 0.0) {
            return Err(Error::Config(
                "fov_up, fov_down and max_range must be positive".into(),
            ));
        }
        if self.range_noise < 0.0 || !self.range_noise.is_finite() {
            return Err(Error::Config("range noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Elevation of beam `i`, radians. Inverse of the row formula of the
    /// spherical projection evaluated at the row center.
    pub fn beam_elevation(&self, i: usize) -> f64 {
        let fov = (self.fov_up + self.fov_down).to_radians();
        let row = (i as f64 + 0.5) / self.beams as f64;
        (1.0 - row) * fov - self.fov_up.to_radians()
    }

    /// Azimuth of sample `j`, radians. Inverse of the column formula.
    pub fn sample_azimuth(&self, j: usize) -> f64 {
        let col = (j as f64 + 0.5) / self.horizontal_samples as f64;
        std::f64::consts::PI * (1.0 - 2.0 * col)
    }
}

const HIT_EPS: f64 = 1e-6;

fn ray_cylinder(o: [f64; 3], d: [f64; 3], c: [f64; 2], r: f64, z0: f64, z1: f64) -> Option<f64> {
    let (ox, oy) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > HIT_EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    if a > 1e-15 {
        let b = 2.0 * (ox * d[0] + oy * d[1]);
        let cc = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o[2] + t * d[2];
                if z >= z0 && z <= z1 {
                    consider(t);
                }
            }
        }
    }
    // Top cap.
    if d[2].abs() > 1e-15 {
        let t = (z1 - o[2]) / d[2];
        let (x, y) = (ox + t * d[0], oy + t * d[1]);
        if x * x + y * y <= r * r {
            consider(t);
        }
    }
    best
}

fn ray_box(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut b) = ((lo[k] - o[k]) * inv, (hi[k] - o[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    if t0 > HIT_EPS {
        Some(t0)
    } else if t1 > HIT_EPS {
        Some(t1)
    } else {
        None
    }
}

/// Ray-casts one scan from `pose` (sensor-to-world) and returns the hits in
/// the sensor frame. Coordinates are rounded to `f32` precision so scans
/// survive the binary scan format bit-exactly.
pub fn simulate_scan(world: &SyntheticWorld, pose: &Pose, cfg: &ScanConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let origin = pose.translation();
    let ground = world.ground_height;
    let base = ground.unwrap_or(0.0);
    // Landmarks that any ray shorter than max_range could reach.
    let nearby: Vec<&Landmark> = world
        .landmarks
        .iter()
        .filter(|lm| {
            let c = lm.center();
            let dist = ((c[0] - origin[0]).powi(2) + (c[1] - origin[1]).powi(2)).sqrt();
            dist - lm.footprint_radius() <= cfg.max_range
        })
        .collect();

    let mut noise = (cfg.range_noise > 0.0).then(|| {
        (
            ChaCha8Rng::seed_from_u64(cfg.noise_seed),
            Normal::new(0.0, cfg.range_noise).expect("validated sigma"),
        )
    });

    let mut points = Vec::with_capacity(cfg.beams * cfg.horizontal_samples);
    for i in 0..cfg.beams {
        let el = cfg.beam_elevation(i);
        let (se, ce) = el.sin_cos();
        for j in 0..cfg.horizontal_samples {
            let az = cfg.sample_azimuth(j);
            let (sa, ca) = az.sin_cos();
            let local = [ce * ca, ce * sa, se];
            let d = pose.rotate_vector(local);
            let mut best = f64::INFINITY;
            if let Some(g) = ground {
                if d[2] < -1e-12 {
                    let t = (g - origin[2]) / d[2];
                    if t > HIT_EPS {
                        best = t;
                    }
                }
            }
            for lm in &nearby {
                let hit = match lm {
                    Landmark::Cylinder {
                        center,
                        radius,
                        height,
                    } => ray_cylinder(origin, d, *center, *radius, base, base + height),
                    Landmark::Box { min, max, height } => ray_box(
                        origin,
                        d,
                        [min[0], min[1], base],
                        [max[0], max[1], base + height],
                    ),
                };
                if let Some(t) = hit {
                    best = best.min(t);
                }
            }
            if !best.is_finite() {
                continue;
            }
            let mut range = best;
            if let Some((rng, dist)) = noise.as_mut() {
                range += dist.sample(rng);
            }
            if range <= 0.0 || range > cfg.max_range {
                continue;
            }
            let p = Point3::new(
                (local[0] * range) as f32 as f64,
                (local[1] * range) as f32 as f64,
                (local[2] * range) as f32 as f64,
            );
            points.push(p);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyScan);
    }
    Ok(PointCloud::new(points, "synthetic"))
}
