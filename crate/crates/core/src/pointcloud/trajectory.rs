//! Declarative scan sequences over a synthetic world.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::world::{simulate_scan, ScanConfig, SyntheticWorld};
use super::{wrap_angle, PointCloud, Pose};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// One pass along the road, no revisits.
    Linear,
    /// A first pass, then the same poses driven again in the same direction.
    Loop,
    /// A first pass, then the same poses driven backwards with yaw flipped by pi.
    ReverseLoop,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Pattern::Linear),
            "loop" => Ok(Pattern::Loop),
            "reverse-loop" => Ok(Pattern::ReverseLoop),
            other => Err(Error::UnknownPattern(other.to_string())),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Linear => "linear",
            Pattern::Loop => "loop",
            Pattern::ReverseLoop => "reverse-loop",
        })
    }
}

/// Driving direction of a frame relative to the first pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Same,
    Reverse,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Same => "Same",
            Direction::Reverse => "Reverse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub pattern: Pattern,
    pub steps: usize,
    /// Distance between consecutive first-pass poses, meters.
    pub step_length: f64,
    /// Number of first-pass poses; frames after it revisit them. Ignored by
    /// [`Pattern::Linear`].
    pub revisit_after: usize,
    pub start_x: f64,
    pub sensor_height: f64,
    /// Revisit poses are displaced by up to this much along x and y.
    pub lateral_jitter: f64,
    /// Every pose's heading is perturbed by up to this much, radians.
    pub yaw_jitter: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Loop,
            steps: 100,
            step_length: 1.0,
            revisit_after: 50,
            start_x: 0.0,
            sensor_height: 1.8,
            lateral_jitter: 0.3,
            yaw_jitter: 0.02,
            seed: 42,
        }
    }
}

/// One scan of a generated sequence with its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub pose: Pose,
    pub cloud: PointCloud,
    /// First-pass frame this one revisits.
    pub revisit_of: Option<usize>,
    pub direction: Direction,
}

/// Ground-truth pose plan without scans.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedPose {
    pub pose: Pose,
    pub revisit_of: Option<usize>,
    pub direction: Direction,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.step_length > 0.0) {
            return Err(Error::Config("trajectory needs steps > 0 and step_length > 0".into()));
        }
        if self.pattern != Pattern::Linear && (self.revisit_after == 0 || self.revisit_after >= self.steps) {
            return Err(Error::Config(format!(
                "revisit_after must lie in 1..{} for pattern {}",
                self.steps, self.pattern
            )));
        }
        if !(0.0..=0.35).contains(&self.lateral_jitter) || !(0.0..=0.5).contains(&self.yaw_jitter) {
            return Err(Error::Config("jitter out of range".into()));
        }
        Ok(())
    }

    /// Poses of the sequence, in order.
    pub fn plan(&self) -> Result<Vec<PlannedPose>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let first_pass = match self.pattern {
            Pattern::Linear => self.steps,
            _ => self.revisit_after,
        };
        let jitter_yaw = |rng: &mut ChaCha8Rng| {
            if self.yaw_jitter > 0.0 {
                rng.random_range(-self.yaw_jitter..=self.yaw_jitter)
            } else {
                0.0
            }
        };
        let mut out = Vec::with_capacity(self.steps);
        let mut first_yaws = Vec::with_capacity(first_pass);
        for k in 0..first_pass {
            let yaw = jitter_yaw(&mut rng);
            first_yaws.push(yaw);
            let x = self.start_x + k as f64 * self.step_length;
            out.push(PlannedPose {
                pose: Pose::from_yaw_translation(yaw, [x, 0.0, self.sensor_height]),
                revisit_of: None,
                direction: Direction::Same,
            });
        }
        for k in first_pass..self.steps {
            let offset = (k - first_pass) % first_pass;
            let (target, direction, flip) = match self.pattern {
                Pattern::Loop => (offset, Direction::Same, 0.0),
                Pattern::ReverseLoop => (first_pass - 1 - offset, Direction::Reverse, PI),
                Pattern::Linear => unreachable!("linear has no revisits"),
            };
            let base = out[target].pose.translation();
            let j = self.lateral_jitter;
            let (dx, dy) = if j > 0.0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let yaw = wrap_angle(first_yaws[target] + flip + jitter_yaw(&mut rng));
            out.push(PlannedPose {
                pose: Pose::from_yaw_translation(yaw, [base[0] + dx, base[1] + dy, base[2]]),
                revisit_of: Some(target),
                direction,
            });
        }
        Ok(out)
    }
}

/// Ray-casts every pose of `spec`. With range noise enabled each frame gets
/// its own noise stream derived from `scan.noise_seed` and the frame index.
pub fn generate_trajectory(world: &SyntheticWorld, spec: &TrajectorySpec, scan: &ScanConfig) -> Result<Vec<Frame>> {
    let plan = spec.plan()?;
    plan.into_iter()
        .enumerate()
        .map(|(index, p)| {
            let mut cfg = scan.clone();
            cfg.noise_seed = scan.noise_seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let cloud = simulate_scan(world, &p.pose, &cfg)?;
            Ok(Frame {
                index,
                pose: p.pose,
                cloud,
                revisit_of: p.revisit_of,
                direction: p.direction,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern) -> TrajectorySpec {
        TrajectorySpec {
            pattern,
            ..TrajectorySpec::default()
        }
    }

    #[test]
    fn loop_revisits_first_pass_within_half_meter() {
        let plan = spec(Pattern::Loop).plan().unwrap();
        assert_eq!(plan.len(), 100);
        for k in 50..100 {
            assert_eq!(plan[k].revisit_of, Some(k - 50));
            assert!(plan[k].pose.distance_to(&plan[k - 50].pose) < 0.5);
            assert_eq!(plan[k].direction, Direction::Same);
        }
    }

    #[test]
    fn reverse_loop_flips_yaw() {
        let plan = spec(Pattern::ReverseLoop).plan().unwrap();
        for p in &plan[50..] {
            let target = &plan[p.revisit_of.unwrap()];
            assert!(p.pose.distance_to(&target.pose) < 0.5);
            let diff = wrap_angle(p.pose.yaw() - target.pose.yaw()).abs();
            assert!((diff - PI).abs() <= 0.05, "yaw difference {diff}");
            assert_eq!(p.direction, Direction::Reverse);
        }
    }

    #[test]
    fn linear_never_comes_back() {
        let plan = spec(Pattern::Linear).plan().unwrap();
        for i in 0..plan.len() {
            for j in i + 11..plan.len() {
                assert!(plan[i].pose.distance_to(&plan[j].pose) >= 5.0);
            }
        }
    }

    #[test]
    fn unknown_pattern_is_rejected() {
        assert!(matches!("spiral".parse::<Pattern>(), Err(Error::UnknownPattern(_))));
        for p in ["linear", "loop", "reverse-loop"] {
            assert_eq!(p.parse::<Pattern>().unwrap().to_string(), p);
        }
    }
}
