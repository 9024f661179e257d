//! Spherical projection of point clouds, the yaw/column-shift relation and
//! overlap ground truth.

use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::pointcloud::{apply_pose, Point3, PointCloud, Pose, ScanConfig};
use crate::tensor::checkpoint::{read_u32, write_u32};

/// Value stored in pixels that received no point.
pub const SENTINEL: f32 = -1.0;

pub const RANGE_IMAGE_MAGIC: &[u8; 4] = b"LPRI";

/// Default overlap threshold for 64-beam sensors, meters.
pub const DELTA_64_BEAM: f64 = 1.0;
/// Default overlap threshold for 32-beam sensors, meters.
pub const DELTA_32_BEAM: f64 = 1.2;

/// Overlap threshold for a sensor with `beams` rows.
pub fn default_delta(beams: usize) -> f64 {
    if beams >= 64 {
        DELTA_64_BEAM
    } else {
        DELTA_32_BEAM
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub w: usize,
    pub h: usize,
    /// Degrees.
    pub fov_up: f64,
    /// Degrees.
    pub fov_down: f64,
    /// Meters.
    pub max_range: f64,
}

impl ProjectionConfig {
    pub fn new(w: usize, h: usize, fov_up: f64, fov_down: f64, max_range: f64) -> Result<Self> {
        let cfg = Self {
            w,
            h,
            fov_up,
            fov_down,
            max_range,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Config(format!(
                "range image size must be positive, got {}x{}",
                self.h, self.w
            )));
        }
        let fov = self.fov_up + self.fov_down;
        if !(fov > 0.0 && fov.is_finite()) {
            return Err(Error::Config(format!(
                "vertical field of view must be positive, got {fov}"
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }
}

impl From<&ScanConfig> for ProjectionConfig {
    /// The projection whose pixel centers the scan's rays pass through.
    fn from(s: &ScanConfig) -> Self {
        Self {
            w: s.horizontal_samples,
            h: s.beams,
            fov_up: s.fov_up,
            fov_down: s.fov_down,
            max_range: s.max_range,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
    pub range: f64,
}

/// Pixel of a single point, or `None` when it falls outside the field of
/// view, beyond `max_range`, or has zero norm.
pub fn project_point(p: Point3, cfg: &ProjectionConfig) -> Option<Pixel> {
    let r = p.range();
    if !(r > 0.0) || !r.is_finite() || r > cfg.max_range {
        return None;
    }
    let fov = cfg.fov().to_radians();
    let pitch = (p.z / r).clamp(-1.0, 1.0).asin();
    let v = ((1.0 - (pitch + cfg.fov_up.to_radians()) / fov) * cfg.h as f64).floor();
    if !(v >= 0.0 && v < cfg.h as f64) {
        return None;
    }
    let yaw = p.y.atan2(p.x);
    let u = (0.5 * (1.0 - yaw / PI) * cfg.w as f64).floor() as i64;
    Some(Pixel {
        u: u.rem_euclid(cfg.w as i64) as usize,
        v: v as usize,
        range: r,
    })
}

/// An `h x w` grid of ranges in meters, [`SENTINEL`] where no point landed.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    data: Vec<f32>,
    h: usize,
    w: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
}

impl RangeImage {
    /// An image with every pixel invalid.
    pub fn empty(cfg: &ProjectionConfig) -> Self {
        Self {
            data: vec![SENTINEL; cfg.h * cfg.w],
            h: cfg.h,
            w: cfg.w,
            fov_up: cfg.fov_up,
            fov_down: cfg.fov_down,
            max_range: cfg.max_range,
        }
    }

    /// Validates that every pixel is either the sentinel or in `(0, max_range]`.
    pub fn from_data(cfg: &ProjectionConfig, data: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        if data.len() != cfg.h * cfg.w {
            return Err(Error::invalid(
                "range image",
                format!("expected {} values for {}x{}, got {}", cfg.h * cfg.w, cfg.h, cfg.w, data.len()),
            ));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&r| r != SENTINEL && !(r > 0.0 && (r as f64) <= cfg.max_range))
        {
            return Err(Error::invalid(
                "range image",
                format!("pixel value {bad} is neither the sentinel nor in (0, max_range]"),
            ));
        }
        Ok(Self {
            data,
            ..Self::empty(cfg)
        })
    }

    pub fn config(&self) -> ProjectionConfig {
        ProjectionConfig {
            w: self.w,
            h: self.h,
            fov_up: self.fov_up,
            fov_down: self.fov_down,
            max_range: self.max_range,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Row-major pixel values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, v: usize, u: usize) -> f32 {
        self.data[v * self.w + u]
    }

    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.get(v, u) != SENTINEL
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&r| r != SENTINEL).count()
    }

    fn set_min(&mut self, v: usize, u: usize, r: f32) {
        let px = &mut self.data[v * self.w + u];
        if *px == SENTINEL || r < *px {
            *px = r;
        }
    }
}

/// Projects every point, keeping the nearest range per pixel.
pub fn project_cloud(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyScan);
    }
    let mut img = RangeImage::empty(cfg);
    let mut hits = 0usize;
    for &p in &cloud.points {
        if let Some(px) = project_point(p, cfg) {
            // Keep the f32 value inside (0, max_range] after rounding.
            let r = (px.range as f32).min(cfg.max_range as f32).max(f32::MIN_POSITIVE);
            img.set_min(px.v, px.u, r);
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::EmptyRangeImage);
    }
    Ok(img)
}

/// Column shift that maps the image of a cloud onto the image of the same
/// cloud rotated by `theta` radians about z.
///
/// Rotating by `theta` adds `theta` to every azimuth, which moves each point
/// `theta * w / (2 pi)` columns towards lower `u`.
pub fn yaw_to_shift(theta: f64, w: usize) -> Result<i64> {
    if !theta.is_finite() {
        return Err(Error::invalid("yaw_to_shift", "theta must be finite"));
    }
    if w == 0 {
        return Err(Error::invalid("yaw_to_shift", "w must be positive"));
    }
    let s = (-theta * w as f64 / (2.0 * PI)).round() as i64;
    Ok(s.rem_euclid(w as i64))
}

/// Circular column shift: output column `j` is input column `(j - s) mod w`.
pub fn column_shift(img: &RangeImage, s: i64) -> RangeImage {
    let w = img.w;
    let s = s.rem_euclid(w as i64) as usize;
    let mut out = img.clone();
    for (src, dst) in img.data.chunks_exact(w).zip(out.data.chunks_exact_mut(w)) {
        dst[s..].copy_from_slice(&src[..w - s]);
        dst[..s].copy_from_slice(&src[w - s..]);
    }
    out
}

/// Projects `reference` after moving it from the frame of `pose_ref` into
/// the frame of `pose_query` (both sensor-to-world).
pub fn reproject(
    reference: &PointCloud,
    pose_ref: &Pose,
    pose_query: &Pose,
    cfg: &ProjectionConfig,
) -> Result<RangeImage> {
    let rel = pose_query.inverse().compose(pose_ref);
    project_cloud(&apply_pose(reference, &rel), cfg)
}

/// Fraction of co-visible pixels whose ranges agree within `delta` meters,
/// normalized by the smaller valid-pixel count.
pub fn compute_overlap(query: &RangeImage, reproj_ref: &RangeImage, delta: f64) -> Result<f64> {
    if query.h != reproj_ref.h || query.w != reproj_ref.w {
        return Err(Error::Shape {
            op: "compute_overlap",
            lhs: vec![query.h, query.w],
            rhs: vec![reproj_ref.h, reproj_ref.w],
        });
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("compute_overlap", "delta must be positive"));
    }
    let (mut valid_q, mut valid_r, mut matched) = (0usize, 0usize, 0usize);
    for (&a, &b) in query.data.iter().zip(&reproj_ref.data) {
        let (va, vb) = (a != SENTINEL, b != SENTINEL);
        valid_q += va as usize;
        valid_r += vb as usize;
        if va && vb && (a as f64 - b as f64).abs() <= delta {
            matched += 1;
        }
    }
    let denom = valid_q.min(valid_r);
    if denom == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(matched as f64 / denom as f64)
}

/// Overlap of `query_cloud` with `ref_cloud` reprojected into the query frame.
pub fn overlap_between(
    query_cloud: &PointCloud,
    pose_query: &Pose,
    ref_cloud: &PointCloud,
    pose_ref: &Pose,
    cfg: &ProjectionConfig,
    delta: f64,
) -> Result<f64> {
    let q = project_cloud(query_cloud, cfg)?;
    let r = match reproject(ref_cloud, pose_ref, pose_query, cfg) {
        Ok(img) => img,
        // Nothing of the reference is visible from the query pose.
        Err(Error::EmptyRangeImage) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    compute_overlap(&q, &r, delta)
}

/// Writes `LPRI`, `u32` h, `u32` w, then the row-major `f32` pixels.
pub fn write_range_image<W: Write>(mut out: W, img: &RangeImage) -> Result<()> {
    out.write_all(RANGE_IMAGE_MAGIC)?;
    write_u32(&mut out, img.h)?;
    write_u32(&mut out, img.w)?;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads a range image file. The file does not carry the field of view or
/// maximum range, so the caller supplies them through `cfg`; its `h` and
/// `w` must match the file.
pub fn read_range_image<R: Read>(mut input: R, cfg: &ProjectionConfig) -> Result<RangeImage> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != RANGE_IMAGE_MAGIC {
        return Err(Error::format("range image", "bad magic"));
    }
    let h = read_u32(&mut input)?;
    let w = read_u32(&mut input)?;
    if h != cfg.h || w != cfg.w {
        return Err(Error::format(
            "range image",
            format!("file is {h}x{w}, configuration expects {}x{}", cfg.h, cfg.w),
        ));
    }
    let mut bytes = vec![0u8; h * w * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    RangeImage::from_data(cfg, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitti_like() -> ProjectionConfig {
        ProjectionConfig::new(900, 64, 3.0, 25.0, 100.0).unwrap()
    }

    #[test]
    fn rear_axis_maps_to_column_zero() {
        let px = project_point(Point3::new(-1.0, 0.0, 0.0), &kitti_like()).unwrap();
        assert_eq!(px.u, 0);
        assert_eq!(px.range, 1.0);
    }

    #[test]
    fn forward_axis_pixel() {
        let px = project_point(Point3::new(1.0, 0.0, 0.0), &kitti_like()).unwrap();
        assert_eq!((px.u, px.v), (450, 57));
    }

    #[test]
    fn out_of_view_points() {
        let cfg = kitti_like();
        assert!(project_point(Point3::new(0.0, 0.0, 1.0), &cfg).is_none());
        assert!(project_point(Point3::new(0.0, 0.0, 0.0), &cfg).is_none());
        assert!(project_point(Point3::new(150.0, 0.0, 0.0), &cfg).is_none());
    }

    #[test]
    fn collisions_keep_the_nearest_point() {
        let cloud = PointCloud::new(
            vec![Point3::new(5.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)],
            "t",
        );
        let img = project_cloud(&cloud, &kitti_like()).unwrap();
        assert_eq!(img.valid_count(), 1);
        assert_eq!(img.get(57, 450), 3.0);
    }

    #[test]
    fn single_point_gives_one_valid_pixel() {
        let cloud = PointCloud::new(vec![Point3::new(2.0, 1.0, 0.1)], "t");
        assert_eq!(project_cloud(&cloud, &kitti_like()).unwrap().valid_count(), 1);
    }

    #[test]
    fn all_points_out_of_view_is_an_error() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 4.0)], "t");
        assert!(matches!(
            project_cloud(&cloud, &kitti_like()),
            Err(Error::EmptyRangeImage)
        ));
    }

    #[test]
    fn yaw_to_shift_special_values() {
        assert_eq!(yaw_to_shift(0.0, 900).unwrap(), 0);
        assert_eq!(yaw_to_shift(2.0 * PI, 900).unwrap(), 0);
        assert_eq!(yaw_to_shift(2.0 * PI / 900.0, 900).unwrap(), 899);
        assert!(yaw_to_shift(f64::NAN, 900).is_err());
    }

    #[test]
    fn column_shift_moves_columns_right() {
        let cfg = ProjectionConfig::new(4, 1, 10.0, 10.0, 100.0).unwrap();
        let img = RangeImage::from_data(&cfg, vec![1.0, 2.0, 3.0, SENTINEL]).unwrap();
        assert_eq!(column_shift(&img, 1).data(), &[SENTINEL, 1.0, 2.0, 3.0]);
        assert_eq!(column_shift(&img, -1).data(), &[2.0, 3.0, SENTINEL, 1.0]);
        assert_eq!(column_shift(&img, 4), img);
    }

    #[test]
    fn overlap_rejects_mismatched_and_empty_images() {
        let cfg = ProjectionConfig::new(4, 1, 10.0, 10.0, 100.0).unwrap();
        let other = ProjectionConfig::new(5, 1, 10.0, 10.0, 100.0).unwrap();
        let a = RangeImage::from_data(&cfg, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = RangeImage::empty(&cfg);
        assert!(matches!(compute_overlap(&a, &e, 1.0), Err(Error::UndefinedOverlap)));
        assert!(compute_overlap(&a, &RangeImage::empty(&other), 1.0).is_err());
        assert!(compute_overlap(&a, &a, 0.0).is_err());
        assert_eq!(compute_overlap(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn from_data_rejects_out_of_range_pixels() {
        let cfg = ProjectionConfig::new(2, 1, 10.0, 10.0, 50.0).unwrap();
        assert!(RangeImage::from_data(&cfg, vec![60.0, 1.0]).is_err());
        assert!(RangeImage::from_data(&cfg, vec![0.0, 1.0]).is_err());
        assert!(RangeImage::from_data(&cfg, vec![1.0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = ProjectionConfig::new(3, 2, 10.0, 10.0, 50.0).unwrap();
        let img = RangeImage::from_data(&cfg, vec![1.5, SENTINEL, 49.0, 2.0, 3.0, SENTINEL]).unwrap();
        let mut buf = Vec::new();
        write_range_image(&mut buf, &img).unwrap();
        assert_eq!(&buf[..4], b"LPRI");
        assert_eq!(read_range_image(buf.as_slice(), &cfg).unwrap(), img);
        let wrong = ProjectionConfig::new(2, 3, 10.0, 10.0, 50.0).unwrap();
        assert!(read_range_image(buf.as_slice(), &wrong).is_err());
    }
}
