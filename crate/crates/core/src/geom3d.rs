//! Oriented 3D box geometry.
//!
//! Boxes are gravity-aligned (yaw only). Bird's-eye-view overlap is computed
//! exactly by clipping one rotated rectangle against the other; full 3D IoU
//! multiplies the BEV intersection by the vertical interval overlap.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on cross products when deciding which side of a clip edge a
/// vertex lies on. Collinear edges count as inside.
const CLIP_EPS: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Smallest signed difference `a - b` on the circle, in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_yaw(a - b)
}

/// A 7-DoF oriented box: center, size (length along heading), yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box7 {
    /// Builds a validated box with its yaw wrapped into `(-pi, pi]`.
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self> {
        let b = Box7 {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
        };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        finite && self.l > 0.0 && self.w > 0.0 && self.h > 0.0
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Ground-plane range of the center from the sensor origin.
    pub fn distance(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// Whether a ground-plane point lies inside the BEV footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.l && ly.abs() <= 0.5 * self.w
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        z >= self.z_min() && z <= self.z_max() && self.contains_bev(x, y)
    }

    fn is_degenerate(&self) -> bool {
        !(self.bev_area() > 0.0 && self.volume() > 0.0) || !self.is_valid()
    }

    fn sort_key(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }

    fn canonical_cmp(&self, other: &Box7) -> Ordering {
        let (a, b) = (self.sort_key(), other.sort_key());
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Which overlap measure to use wherever the pipeline needs an IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    Bev,
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
}

pub fn iou(a: &Box7, b: &Box7, mode: IouMode) -> f64 {
    match mode {
        IouMode::Bev => bev_iou(a, b),
        IouMode::ThreeD => iou_3d(a, b),
    }
}

fn cross(o: [f64; 2], a: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    // Segment p->q against the infinite line through a->b.
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < f64::MIN_POSITIVE {
        return p;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clipping of `subject` against a convex CCW `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = input[input.len() - 1];
        let mut prev_in = cross(a, b, prev) >= -CLIP_EPS;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Orders a pair canonically so both argument orders run the same arithmetic.
fn canonical<'a>(a: &'a Box7, b: &'a Box7) -> (&'a Box7, &'a Box7) {
    if a.canonical_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

fn bev_intersection(a: &Box7, b: &Box7) -> f64 {
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Rotated-rectangle IoU in the ground plane. Degenerate boxes score 0.
pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let (a, b) = canonical(a, b);
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Full 3D IoU of gravity-aligned boxes. Degenerate boxes score 0.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let (a, b) = canonical(a, b);
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy BEV non-maximum suppression.
///
/// Candidates are visited by descending score (lower index first on ties);
/// a candidate survives if its BEV IoU with every kept box is below
/// `iou_threshold`. Returns kept indices in visiting order.
pub fn nms_bev(candidates: &[(Box7, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        candidates[j]
            .1
            .total_cmp(&candidates[i].1)
            .then_with(|| i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let bi = &candidates[i].0;
        if kept
            .iter()
            .all(|&k| bev_iou(bi, &candidates[k].0) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// A weak scene augmentation: uniform scale, then rotation about the
/// vertical axis, then an optional mirror across the x axis (y negated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneTransform {
    pub scale: f64,
    pub yaw_rotation: f64,
    pub flip_x: bool,
}

impl Default for SceneTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SceneTransform {
    pub const IDENTITY: SceneTransform = SceneTransform {
        scale: 1.0,
        yaw_rotation: 0.0,
        flip_x: false,
    };

    pub fn new(scale: f64, yaw_rotation: f64, flip_x: bool) -> Result<Self> {
        let t = SceneTransform {
            scale,
            yaw_rotation,
            flip_x,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || !self.yaw_rotation.is_finite() {
            return Err(Error::InvalidScale(self.scale));
        }
        Ok(())
    }

    /// The transform undoing `self`.
    ///
    /// Mirroring conjugates rotation (`F R(r) = R(-r) F`), so the inverse of
    /// a flipped transform keeps the same rotation angle.
    pub fn inverse(&self) -> Result<SceneTransform> {
        self.validate()?;
        let yaw_rotation = if self.flip_x {
            self.yaw_rotation
        } else {
            -self.yaw_rotation
        };
        Ok(SceneTransform {
            scale: 1.0 / self.scale,
            yaw_rotation,
            flip_x: self.flip_x,
        })
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (x, y) = (x * self.scale, y * self.scale);
        let (s, c) = self.yaw_rotation.sin_cos();
        let (x, y) = (c * x - s * y, s * x + c * y);
        if self.flip_x {
            (x, -y)
        } else {
            (x, y)
        }
    }

    pub fn apply(&self, b: &Box7) -> Result<Box7> {
        self.validate()?;
        let (cx, cy) = self.apply_point(b.cx, b.cy);
        let mut yaw = b.yaw + self.yaw_rotation;
        if self.flip_x {
            yaw = -yaw;
        }
        Ok(Box7 {
            cx,
            cy,
            cz: b.cz * self.scale,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: normalize_yaw(yaw),
        })
    }
}

pub fn apply_transform(b: &Box7, t: &SceneTransform) -> Result<Box7> {
    t.apply(b)
}

pub fn invert_transform(t: &SceneTransform) -> Result<SceneTransform> {
    t.inverse()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(yaw: f64) -> Box7 {
        Box7::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, yaw).unwrap()
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = Box7::new(3.0, -2.0, 0.8, 4.0, 1.7, 1.6, 0.3).unwrap();
        assert_eq!(bev_iou(&b, &b), 1.0);
        assert_eq!(iou_3d(&b, &b), 1.0);
        let c = b;
        assert_eq!(iou_3d(&b, &c), 1.0);
    }

    #[test]
    fn distant_boxes_do_not_overlap() {
        let a = unit(0.0);
        let b = Box7::new(100.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(bev_iou(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn rotated_unit_square_matches_octagon_area() {
        // Intersection is a regular octagon of area 2(sqrt2 - 1).
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        let got = bev_iou(&unit(0.0), &unit(PI / 4.0));
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn offset_cubes_have_one_third_iou() {
        let a = unit(0.0);
        let b = Box7::new(0.5, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_scores_zero() {
        let a = unit(0.0);
        let flat = Box7 {
            l: 0.0,
            ..a
        };
        assert_eq!(bev_iou(&a, &flat), 0.0);
        assert_eq!(iou_3d(&flat, &a), 0.0);
        let thin = Box7 { h: 0.0, ..a };
        assert_eq!(iou_3d(&a, &thin), 0.0);
        assert!(Box7::new(0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn vertical_separation_kills_3d_but_not_bev() {
        let a = unit(0.0);
        let b = Box7 { cz: 5.0, ..a };
        assert_eq!(bev_iou(&a, &b), 1.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn yaw_is_wrapped_into_half_open_interval() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(normalize_yaw(0.0) == 0.0);
    }

    #[test]
    fn nms_basic_cases() {
        let b = unit(0.0);
        assert!(nms_bev(&[], 0.5).is_empty());
        assert_eq!(nms_bev(&[(b, 0.3)], 0.5), vec![0]);
        assert_eq!(nms_bev(&[(b, 0.8), (b, 0.9)], 0.5), vec![1]);
        // Equal scores: lower index wins.
        assert_eq!(nms_bev(&[(b, 0.5), (b, 0.5)], 0.5), vec![0]);
    }

    #[test]
    fn transform_identity_and_half_turns() {
        let b = Box7::new(4.0, -1.0, 0.9, 3.9, 1.6, 1.6, 2.5).unwrap();
        assert_eq!(SceneTransform::IDENTITY.apply(&b).unwrap(), b);
        let half = SceneTransform::new(1.0, PI, false).unwrap();
        let back = half.apply(&half.apply(&b).unwrap()).unwrap();
        assert!((back.cx - b.cx).abs() < 1e-12);
        assert!((back.cy - b.cy).abs() < 1e-12);
        assert!(angle_diff(back.yaw, b.yaw).abs() < 1e-12);
    }

    #[test]
    fn flip_negates_y_and_mirrors_yaw() {
        let b = Box7::new(4.0, 2.0, 0.9, 3.9, 1.6, 1.6, 0.4).unwrap();
        let t = SceneTransform::new(1.0, 0.0, true).unwrap();
        let f = t.apply(&b).unwrap();
        assert_eq!((f.cx, f.cy, f.yaw), (4.0, -2.0, -0.4));
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        assert!(SceneTransform::new(0.0, 0.0, false).is_err());
        let bad = SceneTransform {
            scale: -1.0,
            yaw_rotation: 0.0,
            flip_x: false,
        };
        assert!(bad.apply(&unit(0.0)).is_err());
        assert!(bad.inverse().is_err());
    }
}
