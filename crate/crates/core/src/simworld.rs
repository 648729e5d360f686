//! Synthetic stand-in for the datasets and the teacher detector.
//!
//! Scenes hold gravity-aligned GT boxes for three classes. The teacher emits
//! noisy pre-NMS candidates whose localization error grows with distance and
//! shrinks with the learning state `e`, and whose objectness is a noisy,
//! class- and distance-dependent calibration of the candidate's true IoU.
//! A second, weakly augmented view supplies the auxiliary objectness and the
//! IoU consistency of every candidate.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{bev_iou, iou, Box7, IouMode, SceneTransform};
use crate::psm::{ContextFeature, LabeledCandidate, ScoreFeature, SelectionCandidate};
use crate::rng::{derive_rng, stream};
use crate::tinynn::{argmax, sigmoid};

pub const CAR: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CYCLIST: usize = 2;
pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

/// Objectness logit assigned to candidates with no augmented-view match.
pub const AUG_LOGIT_FLOOR: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Poisson mean of objects per scene.
    pub spawn_rate: f64,
    /// Mean `[l, w, h]` in meters.
    pub size_mean: [f64; 3],
    pub size_std: [f64; 3],
    /// Distance density `∝ exp(-falloff * d / max_range)`; 0 is uniform.
    pub distance_falloff: f64,
    /// Multiplier on the base localization noise.
    pub loc_scale: f64,
    pub det_base: f64,
    pub det_distance_slope: f64,
    /// Objectness calibration: `logit = gain * iou + bias - decay * d_norm
    /// + state_gain * (e - 0.5) + noise * N(0, 1)`.
    pub calib_gain: f64,
    pub calib_bias: f64,
    pub calib_noise: f64,
    pub calib_distance_decay: f64,
    pub calib_state_gain: f64,
}

impl Default for ClassSpec {
    fn default() -> Self {
        ClassSpec::car()
    }
}

impl ClassSpec {
    pub fn car() -> Self {
        ClassSpec {
            name: "Car".into(),
            spawn_rate: 5.0,
            size_mean: [3.9, 1.6, 1.6],
            size_std: [0.3, 0.1, 0.1],
            distance_falloff: 0.5,
            loc_scale: 1.0,
            det_base: 0.95,
            det_distance_slope: 0.3,
            calib_gain: 9.0,
            calib_bias: -5.5,
            calib_noise: 0.5,
            calib_distance_decay: 1.5,
            calib_state_gain: 0.6,
        }
    }

    pub fn pedestrian() -> Self {
        ClassSpec {
            name: "Pedestrian".into(),
            spawn_rate: 2.0,
            size_mean: [0.8, 0.6, 1.7],
            size_std: [0.1, 0.08, 0.1],
            distance_falloff: 1.5,
            loc_scale: 0.35,
            det_base: 0.85,
            det_distance_slope: 0.5,
            calib_gain: 8.0,
            calib_bias: -4.0,
            calib_noise: 0.6,
            calib_distance_decay: 2.0,
            calib_state_gain: 0.6,
        }
    }

    pub fn cyclist() -> Self {
        ClassSpec {
            name: "Cyclist".into(),
            spawn_rate: 1.0,
            size_mean: [1.8, 0.6, 1.7],
            size_std: [0.15, 0.08, 0.1],
            distance_falloff: 1.0,
            loc_scale: 0.5,
            det_base: 0.85,
            det_distance_slope: 0.45,
            calib_gain: 8.0,
            calib_bias: -4.5,
            calib_noise: 0.6,
            calib_distance_decay: 1.8,
            calib_state_gain: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: Vec<ClassSpec>,
    /// Row `t` is the distribution of the predicted class given true class `t`.
    pub confusion: Vec<Vec<f64>>,
    pub max_range: f64,
    pub min_range: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Base center noise std in meters; every localization error scales with it.
    pub loc_noise_base: f64,
    /// Relative noise growth from range 0 to `max_range`.
    pub loc_noise_slope: f64,
    /// Log-normal spread of per-candidate quality.
    pub quality_spread: f64,
    /// Fraction of the log-quality variance owed to the object itself.
    pub hardness_share: f64,
    /// Log-size noise per meter of center noise.
    pub size_noise: f64,
    /// Yaw noise (rad) per meter of center noise.
    pub yaw_noise: f64,
    /// Systematic relative shrink of predicted sizes.
    pub size_shrink: f64,
    /// Systematic vertical offset of predicted centers (m).
    pub z_offset: f64,
    /// Std (m, at `max_range`, before `loc_scale`) of an error along the
    /// heading that every view repeats; grows linearly with range.
    pub shared_offset: f64,
    /// Probability that a detection only covers part of the object.
    pub partial_rate: f64,
    pub partial_shrink: f64,
    /// Shift of partial detections toward the sensor, as a fraction of length.
    pub partial_shift: f64,
    /// Poisson mean of extra pre-NMS duplicates per detected object.
    pub dup_rate: f64,
    pub cls_margin: f64,
    pub cls_quality_gain: f64,
    pub cls_noise: f64,
    /// Poisson mean of background structures per scene that the detector
    /// mistakes for objects.
    pub fp_rate: f64,
    /// Mean and std of the objectness logit a structure persistently draws.
    pub fp_logit_mean: f64,
    pub fp_logit_std: f64,
    /// Probability that a view fires on a given structure.
    pub fp_view_rate: f64,
    /// Per-view objectness noise of false positives.
    pub fp_view_noise: f64,
    /// Fraction of structures placed next to a real object.
    pub fp_near_object: f64,
    /// Target error rate among high-confidence Pedestrian predictions.
    pub ped_overconfident_error_rate: f64,
    /// IoU a Pedestrian prediction needs to count as correct.
    pub ped_match_iou: f64,
    pub distractors_per_scene: usize,
    pub learning_state: f64,
    pub aug_scales: Vec<f64>,
    pub aug_rotations: Vec<f64>,
    pub aug_match_min_iou: f64,
    pub iou_mode: IouMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: vec![ClassSpec::car(), ClassSpec::pedestrian(), ClassSpec::cyclist()],
            confusion: vec![
                vec![0.96, 0.02, 0.02],
                vec![0.03, 0.85, 0.12],
                vec![0.04, 0.16, 0.80],
            ],
            max_range: 75.0,
            min_range: 2.0,
            min_objects: 0,
            max_objects: 40,
            loc_noise_base: 0.12,
            loc_noise_slope: 1.5,
            quality_spread: 0.45,
            hardness_share: 0.7,
            size_noise: 0.4,
            yaw_noise: 0.4,
            size_shrink: 0.03,
            z_offset: -0.05,
            shared_offset: 0.0,
            partial_rate: 0.1,
            partial_shrink: 0.3,
            partial_shift: 0.25,
            dup_rate: 3.0,
            cls_margin: 2.0,
            cls_quality_gain: 1.0,
            cls_noise: 1.0,
            fp_rate: 1.5,
            fp_logit_mean: -2.0,
            fp_logit_std: 1.2,
            fp_view_rate: 0.8,
            fp_view_noise: 0.5,
            fp_near_object: 0.5,
            ped_overconfident_error_rate: 0.57,
            ped_match_iou: 0.5,
            distractors_per_scene: 6,
            learning_state: 0.3,
            aug_scales: vec![0.95, 1.05],
            aug_rotations: vec![-PI / 8.0, PI / 8.0],
            aug_match_min_iou: 0.1,
            iou_mode: IouMode::ThreeD,
        }
    }
}

impl GeneratorConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Contexts carry no information: every class shares one geometry,
    /// noise model and calibration, and nothing depends on range.
    pub fn iid_contexts() -> Self {
        let mut cfg = Self::default();
        for c in &mut cfg.classes {
            let name = std::mem::take(&mut c.name);
            *c = ClassSpec {
                name,
                spawn_rate: c.spawn_rate,
                distance_falloff: 0.0,
                det_distance_slope: 0.0,
                calib_distance_decay: 0.0,
                ..ClassSpec::car()
            };
        }
        cfg.loc_noise_slope = 0.0;
        cfg.partial_rate = 0.0;
        cfg.ped_overconfident_error_rate = 0.0;
        cfg
    }

    /// Distance-skewed score quality: far objects carry an error that every
    /// view repeats and that objectness cannot see, so scores overstate
    /// quality more and more with range.
    pub fn context_shifted() -> Self {
        let mut cfg = Self::default();
        cfg.shared_offset = 1.5;
        for c in &mut cfg.classes {
            c.calib_distance_decay = 0.0;
        }
        cfg
    }

    /// False-positive rate amplified fourfold.
    pub fn noise_amplified() -> Self {
        let mut cfg = Self::default();
        cfg.fp_rate *= 4.0;
        cfg
    }

    pub fn with_learning_state(&self, e: f64) -> Self {
        GeneratorConfig {
            learning_state: e.clamp(0.0, 1.0),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: String, message: String| Error::Config {
            path: format!("generator.{path}"),
            message,
        };
        let c = self.num_classes();
        if c == 0 {
            return Err(bad("classes".into(), "at least one class required".into()));
        }
        if self.confusion.len() != c {
            return Err(bad("confusion".into(), format!("expected {c} rows")));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.len() != c || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(bad(format!("confusion[{i}]"), "entries must be >= 0, one per class".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(bad(format!("confusion[{i}]"), format!("row sums to {s}, not 1")));
            }
        }
        for (i, k) in self.classes.iter().enumerate() {
            if !(k.spawn_rate >= 0.0) {
                return Err(bad(format!("classes[{i}].spawn_rate"), "must be >= 0".into()));
            }
            if k.size_mean.iter().any(|v| !(*v > 0.0)) || k.size_std.iter().any(|v| !(*v >= 0.0)) {
                return Err(bad(format!("classes[{i}].size_mean"), "sizes must be positive".into()));
            }
            if !(0.0..=1.0).contains(&k.det_base) {
                return Err(bad(format!("classes[{i}].det_base"), "must lie in [0, 1]".into()));
            }
        }
        for (name, v) in [
            ("fp_rate", self.fp_rate),
            ("dup_rate", self.dup_rate),
            ("partial_rate", self.partial_rate),
            ("loc_noise_base", self.loc_noise_base),
            ("fp_near_object", self.fp_near_object),
            ("fp_view_noise", self.fp_view_noise),
        ] {
            if !(v >= 0.0) {
                return Err(bad(name.into(), format!("must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fp_view_rate) {
            return Err(bad("fp_view_rate".into(), "must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.learning_state) {
            return Err(bad("learning_state".into(), "must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.ped_overconfident_error_rate) {
            return Err(bad("ped_overconfident_error_rate".into(), "must lie in [0, 1)".into()));
        }
        if !(self.max_range > self.min_range && self.min_range >= 0.0) {
            return Err(bad("max_range".into(), "need 0 <= min_range < max_range".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(bad("min_objects".into(), "exceeds max_objects".into()));
        }
        if self.aug_scales.is_empty() || self.aug_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("aug_scales".into(), "need at least one positive scale".into()));
        }
        if self.aug_rotations.is_empty() {
            return Err(bad("aug_rotations".into(), "need at least one rotation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class_id: usize,
    /// Latent in [0, 1); the object is detected in a view iff it is below
    /// the detection probability, so detectability is shared across views.
    pub visibility: f64,
    /// Latent standard-normal localization difficulty shared across views.
    pub hardness: f64,
    /// Latent standard-normal direction and size of the view-independent
    /// error along the heading.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub labeled: bool,
    pub objects: Vec<GtObject>,
    /// Pedestrian-like structures that are not objects; the source of
    /// overconfident false positives, seen consistently by every view.
    pub distractors: Vec<Box7>,
    /// Background structures behind ordinary false positives.
    #[serde(default)]
    pub clutter: Vec<Clutter>,
}

/// A background structure that views fire on as if it were an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    #[serde(rename = "box")]
    pub bbox: Box7,
    /// Class the structure resembles.
    pub class_id: usize,
    /// Latent in [0, 1) deciding, as for objects, which views fire.
    pub visibility: f64,
    /// Objectness logit shared by every view before per-view noise.
    pub logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Detection,
    FalsePositive,
    Overconfident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherCandidate {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub obj_logit: f64,
    pub cls_logits: Vec<f64>,
    /// Matched augmented-view box, mapped back to the original frame.
    pub aug_box: Option<Box7>,
    pub aug_obj_logit: f64,
    pub iou_consistency: f64,
    /// Index of the generating object in the scene; generator-internal.
    pub source_gt: Option<usize>,
    pub kind: CandidateKind,
}

impl TeacherCandidate {
    pub fn score_feature(&self) -> ScoreFeature {
        ScoreFeature {
            obj_logit: self.obj_logit,
            aug_obj_logit: self.aug_obj_logit,
            cls_logits: self.cls_logits.clone(),
            iou_consistency: self.iou_consistency,
        }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.cls_logits)
    }

    /// Context used at selection time: predicted class and range.
    pub fn inferred_context(&self) -> ContextFeature {
        ContextFeature {
            class_id: self.predicted_class(),
            distance: self.bbox.distance(),
        }
    }

    pub fn selection_candidate(&self) -> SelectionCandidate {
        SelectionCandidate {
            scores: self.score_feature(),
            context: self.inferred_context(),
            bbox: self.bbox,
        }
    }
}

/// A scene together with its teacher candidates: one dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: Scene,
    pub candidates: Vec<TeacherCandidate>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as usize
}

fn sample_normalized_distance<R: Rng + ?Sized>(rng: &mut R, falloff: f64, u0: f64) -> f64 {
    let u: f64 = rng.random();
    if falloff.abs() < 1e-9 {
        return u0 + u * (1.0 - u0);
    }
    // Inverse CDF of the truncated exponential on [u0, 1].
    let a = (-falloff * u0).exp();
    let b = (-falloff).exp();
    -(a - u * (a - b)).ln() / falloff
}

fn sample_size<R: Rng + ?Sized>(rng: &mut R, spec: &ClassSpec) -> [f64; 3] {
    let mut s = [0.0; 3];
    for k in 0..3 {
        let v = spec.size_mean[k] + spec.size_std[k] * normal(rng);
        s[k] = v.max(0.3 * spec.size_mean[k]);
    }
    s
}

fn sample_yaw<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    crate::geom3d::normalize_yaw(rng.random_range(-PI..PI))
}

/// Draws one scene; object counts per class are Poisson(spawn_rate).
pub fn sample_scene<R: Rng + ?Sized>(cfg: &GeneratorConfig, id: u64, labeled: bool, rng: &mut R) -> Scene {
    let mut objects: Vec<GtObject> = Vec::new();
    let u0 = cfg.min_range / cfg.max_range;
    for (class_id, spec) in cfg.classes.iter().enumerate() {
        let n = poisson(rng, spec.spawn_rate);
        for _ in 0..n {
            let size = sample_size(rng, spec);
            let mut placed = None;
            for _ in 0..10 {
                let d = cfg.max_range * sample_normalized_distance(rng, spec.distance_falloff, u0);
                let phi = rng.random_range(-PI..PI);
                let b = Box7 {
                    cx: d * phi.cos(),
                    cy: d * phi.sin(),
                    cz: 0.5 * size[2],
                    l: size[0],
                    w: size[1],
                    h: size[2],
                    yaw: sample_yaw(rng),
                };
                let clear = objects.iter().all(|o| bev_iou(&o.bbox, &b) == 0.0);
                placed = Some(b);
                if clear {
                    break;
                }
            }
            objects.push(GtObject {
                bbox: placed.expect("at least one placement attempt"),
                class_id,
                visibility: rng.random(),
                hardness: normal(rng),
                offset: normal(rng),
            });
        }
    }
    objects.truncate(cfg.max_objects);
    let mut scene = Scene {
        id,
        labeled,
        objects,
        distractors: Vec::new(),
        clutter: Vec::new(),
    };
    if cfg.num_classes() > PEDESTRIAN {
        for _ in 0..cfg.distractors_per_scene {
            let b = random_free_box(cfg, &scene, &cfg.classes[PEDESTRIAN], rng);
            scene.distractors.push(b);
        }
    }
    let total_rate: f64 = cfg.classes.iter().map(|c| c.spawn_rate).sum();
    for _ in 0..poisson(rng, cfg.fp_rate) {
        let class_id = if total_rate > 0.0 {
            let mut u = rng.random::<f64>() * total_rate;
            let mut k = 0;
            while k + 1 < cfg.classes.len() && u >= cfg.classes[k].spawn_rate {
                u -= cfg.classes[k].spawn_rate;
                k += 1;
            }
            k
        } else {
            rng.random_range(0..cfg.classes.len())
        };
        let spec = &cfg.classes[class_id];
        let bbox = if !scene.objects.is_empty() && rng.random::<f64>() < cfg.fp_near_object {
            let anchor = &scene.objects[rng.random_range(0..scene.objects.len())].bbox;
            let size = sample_size(rng, spec);
            let r = rng.random_range(1.0..3.0);
            let phi = rng.random_range(-PI..PI);
            Box7 {
                cx: anchor.cx + r * phi.cos(),
                cy: anchor.cy + r * phi.sin(),
                cz: 0.5 * size[2],
                l: size[0],
                w: size[1],
                h: size[2],
                yaw: sample_yaw(rng),
            }
        } else {
            random_free_box(cfg, &scene, spec, rng)
        };
        let d_norm = (bbox.distance() / cfg.max_range).min(1.0);
        let logit = cfg.fp_logit_mean - spec.calib_distance_decay * d_norm + cfg.fp_logit_std * normal(rng);
        scene.clutter.push(Clutter {
            bbox,
            class_id,
            visibility: rng.random(),
            logit,
        });
    }
    scene
}

fn class_logits<R: Rng + ?Sized>(cfg: &GeneratorConfig, true_class: usize, quality: f64, rng: &mut R) -> Vec<f64> {
    let row = &cfg.confusion[true_class];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut predicted = row.len() - 1;
    for (k, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            predicted = k;
            break;
        }
    }
    let mut z: Vec<f64> = (0..row.len()).map(|_| cfg.cls_noise * normal(rng)).collect();
    z[predicted] += cfg.cls_margin + cfg.cls_quality_gain * quality;
    z
}

fn objectness_logit<R: Rng + ?Sized>(cfg: &GeneratorConfig, spec: &ClassSpec, quality: f64, d_norm: f64, rng: &mut R) -> f64 {
    spec.calib_gain * quality + spec.calib_bias - spec.calib_distance_decay * d_norm
        + spec.calib_state_gain * (cfg.learning_state - 0.5)
        + spec.calib_noise * normal(rng)
}

/// Localization noise factor at normalized range `d_norm`, before the
/// per-candidate quality draw.
pub fn noise_factor(cfg: &GeneratorConfig, d_norm: f64) -> f64 {
    (1.0 + cfg.loc_noise_slope * d_norm) * (1.0 - 0.5 * cfg.learning_state)
}

fn perturb_box<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    spec: &ClassSpec,
    gt: &Box7,
    hardness: f64,
    offset: f64,
    rng: &mut R,
) -> (Box7, Box7) {
    let d_norm = (gt.distance() / cfg.max_range).min(1.0);
    let along = cfg.shared_offset * spec.loc_scale * d_norm * offset;
    let share = cfg.hardness_share.clamp(0.0, 1.0);
    let z = share.sqrt() * hardness + (1.0 - share).sqrt() * normal(rng);
    let f = noise_factor(cfg, d_norm) * (cfg.quality_spread * z).exp();
    let sigma = cfg.loc_noise_base * spec.loc_scale * f;
    let shrink = 1.0 - cfg.size_shrink;
    let mut b = Box7 {
        cx: gt.cx + along * gt.yaw.cos() + sigma * normal(rng),
        cy: gt.cy + along * gt.yaw.sin() + sigma * normal(rng),
        cz: gt.cz + cfg.z_offset + 0.5 * sigma * normal(rng),
        l: gt.l * shrink * (cfg.size_noise * sigma * normal(rng)).exp(),
        w: gt.w * shrink * (cfg.size_noise * sigma * normal(rng)).exp(),
        h: gt.h * shrink * (cfg.size_noise * sigma * normal(rng)).exp(),
        yaw: crate::geom3d::normalize_yaw(gt.yaw + cfg.yaw_noise * sigma * normal(rng)),
    };
    if rng.random::<f64>() < cfg.partial_rate {
        // Only the near side of the object was seen.
        let r = gt.distance().max(1e-6);
        let shift = cfg.partial_shift * gt.l;
        b.cx -= shift * gt.cx / r;
        b.cy -= shift * gt.cy / r;
        b.l *= 1.0 - cfg.partial_shrink;
        b.w *= 1.0 - 0.5 * cfg.partial_shrink;
    }
    // The shared error is invisible to the detector's own confidence.
    let perceived = Box7 {
        cx: b.cx - along * gt.yaw.cos(),
        cy: b.cy - along * gt.yaw.sin(),
        ..b
    };
    (b, perceived)
}

fn max_iou_against(objects: &[GtObject], b: &Box7, mode: IouMode) -> f64 {
    objects.iter().map(|o| iou(&o.bbox, b, mode)).fold(0.0, f64::max)
}

/// Whether a prediction fails to hit a same-class object at `match_iou`.
pub fn is_prediction_error(scene: &Scene, b: &Box7, predicted_class: usize, match_iou: f64, mode: IouMode) -> bool {
    !scene
        .objects
        .iter()
        .any(|o| o.class_id == predicted_class && iou(&o.bbox, b, mode) >= match_iou)
}

fn random_free_box<R: Rng + ?Sized>(cfg: &GeneratorConfig, scene: &Scene, spec: &ClassSpec, rng: &mut R) -> Box7 {
    let size = sample_size(rng, spec);
    let u0 = cfg.min_range / cfg.max_range;
    let mut b = None;
    for _ in 0..20 {
        let d = cfg.max_range * sample_normalized_distance(rng, spec.distance_falloff, u0);
        let phi = rng.random_range(-PI..PI);
        let cand = Box7 {
            cx: d * phi.cos(),
            cy: d * phi.sin(),
            cz: 0.5 * size[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: sample_yaw(rng),
        };
        let clear = scene.objects.iter().all(|o| bev_iou(&o.bbox, &cand) == 0.0);
        b = Some(cand);
        if clear {
            break;
        }
    }
    b.expect("at least one attempt")
}

/// Teacher predictions for one view of a scene (augmented fields unset).
pub fn teacher_predict<R: Rng + ?Sized>(cfg: &GeneratorConfig, scene: &Scene, rng: &mut R) -> Vec<TeacherCandidate> {
    let e = cfg.learning_state;
    let mode = cfg.iou_mode;
    let mut out = Vec::new();
    let push = |out: &mut Vec<TeacherCandidate>, bbox, obj_logit, cls_logits, source_gt, kind| {
        out.push(TeacherCandidate {
            bbox,
            obj_logit,
            cls_logits,
            aug_box: None,
            aug_obj_logit: AUG_LOGIT_FLOOR,
            iou_consistency: 0.0,
            source_gt,
            kind,
        })
    };

    for (gi, obj) in scene.objects.iter().enumerate() {
        let spec = &cfg.classes[obj.class_id];
        let d_norm = (obj.bbox.distance() / cfg.max_range).min(1.0);
        let p_det = (spec.det_base * (1.0 - spec.det_distance_slope * d_norm) * (0.8 + 0.2 * e)).clamp(0.0, 1.0);
        if obj.visibility >= p_det {
            continue;
        }
        let n = 1 + poisson(rng, cfg.dup_rate);
        for _ in 0..n {
            let (b, perceived) = perturb_box(cfg, spec, &obj.bbox, obj.hardness, obj.offset, rng);
            let q = iou(&perceived, &obj.bbox, mode);
            let obj_logit = objectness_logit(cfg, spec, q, d_norm, rng);
            let cls = class_logits(cfg, obj.class_id, q, rng);
            push(&mut out, b, obj_logit, cls, Some(gi), CandidateKind::Detection);
        }
    }

    for k in &scene.clutter {
        if k.visibility >= cfg.fp_view_rate {
            continue;
        }
        let spec = &cfg.classes[k.class_id];
        let b = perturb_box(cfg, spec, &k.bbox, 0.0, 0.0, rng).0;
        let obj_logit = k.logit + cfg.fp_view_noise * normal(rng);
        let q = max_iou_against(&scene.objects, &b, mode);
        let cls = class_logits(cfg, k.class_id, q, rng);
        push(&mut out, b, obj_logit, cls, None, CandidateKind::FalsePositive);
    }

    if cfg.num_classes() > PEDESTRIAN && cfg.ped_overconfident_error_rate > 0.0 {
        // Top up overconfident Pedestrian false positives so the error rate
        // among high-confidence Pedestrian predictions hits the target.
        let r = cfg.ped_overconfident_error_rate;
        let (mut n_hc, mut n_err) = (0.0, 0.0);
        for c in &out {
            if c.predicted_class() == PEDESTRIAN && sigmoid(c.obj_logit) > 0.8 {
                n_hc += 1.0;
                if is_prediction_error(scene, &c.bbox, PEDESTRIAN, cfg.ped_match_iou, mode) {
                    n_err += 1.0;
                }
            }
        }
        let k = ((r * n_hc - n_err) / (1.0 - r)).max(0.0);
        let mut count = k.floor() as usize;
        if rng.random::<f64>() < k.fract() {
            count += 1;
        }
        let spec = &cfg.classes[PEDESTRIAN];
        for d in scene.distractors.iter().take(count) {
            let b = perturb_box(cfg, spec, d, 0.0, 0.0, rng).0;
            let obj_logit = rng.random_range(1.5..3.5);
            let mut cls: Vec<f64> = (0..cfg.num_classes()).map(|_| cfg.cls_noise * normal(rng)).collect();
            cls[PEDESTRIAN] = cls.iter().copied().fold(f64::NEG_INFINITY, f64::max) + cfg.cls_margin;
            push(&mut out, b, obj_logit, cls, None, CandidateKind::Overconfident);
        }
    }
    out
}

/// One detection of a box that is not in the scene's object list, such as
/// a database entry pasted into the scene.
pub fn render_detection<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    class_id: usize,
    render: &Box7,
    rng: &mut R,
) -> TeacherCandidate {
    let spec = &cfg.classes[class_id];
    let d_norm = (render.distance() / cfg.max_range).min(1.0);
    let (b, perceived) = perturb_box(cfg, spec, render, 0.0, 0.0, rng);
    let q = iou(&perceived, render, cfg.iou_mode);
    let obj_logit = objectness_logit(cfg, spec, q, d_norm, rng);
    let cls_logits = class_logits(cfg, class_id, q, rng);
    TeacherCandidate {
        bbox: b,
        obj_logit,
        cls_logits,
        aug_box: None,
        aug_obj_logit: AUG_LOGIT_FLOOR,
        iou_consistency: 0.0,
        source_gt: None,
        kind: CandidateKind::Detection,
    }
}

/// One transform from the weak family, uniformly.
pub fn sample_weak_transform<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> SceneTransform {
    let scale = cfg.aug_scales[rng.random_range(0..cfg.aug_scales.len())];
    let yaw_rotation = cfg.aug_rotations[rng.random_range(0..cfg.aug_rotations.len())];
    let flip_x = rng.random::<bool>();
    SceneTransform {
        scale,
        yaw_rotation,
        flip_x,
    }
}

pub fn transform_scene(scene: &Scene, t: &SceneTransform) -> Result<Scene> {
    Ok(Scene {
        id: scene.id,
        labeled: scene.labeled,
        objects: scene
            .objects
            .iter()
            .map(|o| {
                Ok(GtObject {
                    bbox: t.apply(&o.bbox)?,
                    ..o.clone()
                })
            })
            .collect::<Result<_>>()?,
        distractors: scene.distractors.iter().map(|b| t.apply(b)).collect::<Result<_>>()?,
        clutter: scene
            .clutter
            .iter()
            .map(|k| {
                Ok(Clutter {
                    bbox: t.apply(&k.bbox)?,
                    ..k.clone()
                })
            })
            .collect::<Result<_>>()?,
    })
}

/// Fills the augmented-view fields using an explicit transform and RNG.
pub fn weak_augment_view_with<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    scene: &Scene,
    candidates: &mut [TeacherCandidate],
    transform: &SceneTransform,
    rng: &mut R,
) -> Result<()> {
    let aug_scene = transform_scene(scene, transform)?;
    let inverse = transform.inverse()?;
    let aug: Vec<TeacherCandidate> = teacher_predict(cfg, &aug_scene, rng);
    let back: Vec<Box7> = aug.iter().map(|c| inverse.apply(&c.bbox)).collect::<Result<_>>()?;
    for c in candidates.iter_mut() {
        let best = back
            .iter()
            .enumerate()
            .map(|(j, b)| (j, bev_iou(&c.bbox, b)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= cfg.aug_match_min_iou => {
                c.aug_box = Some(back[j]);
                c.aug_obj_logit = aug[j].obj_logit;
                c.iou_consistency = iou(&c.bbox, &back[j], cfg.iou_mode);
            }
            _ => {
                c.aug_box = None;
                c.aug_obj_logit = AUG_LOGIT_FLOOR;
                c.iou_consistency = 0.0;
            }
        }
    }
    Ok(())
}

/// Runs the weak-augmentation second view with a transform drawn from `rng`.
pub fn weak_augment_view<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    scene: &Scene,
    candidates: &mut [TeacherCandidate],
    rng: &mut R,
) -> Result<()> {
    let t = sample_weak_transform(cfg, rng);
    weak_augment_view_with(cfg, scene, candidates, &t, rng)
}

/// Teacher candidates of `scene` for a given epoch, both views, from
/// streams derived from `(seed, scene id, epoch)`.
pub fn scene_candidates(cfg: &GeneratorConfig, scene: &Scene, seed: u64, epoch: u64) -> Result<Vec<TeacherCandidate>> {
    let mut rng = derive_rng(seed, &[stream::TEACHER, scene.id, epoch]);
    let mut cands = teacher_predict(cfg, scene, &mut rng);
    let mut aug_rng = derive_rng(seed, &[stream::AUGMENT, scene.id, epoch]);
    weak_augment_view(cfg, scene, &mut cands, &mut aug_rng)?;
    Ok(cands)
}

/// Scenes `first_id..first_id + count`, each from its own stream.
pub fn sample_scenes(cfg: &GeneratorConfig, seed: u64, first_id: u64, count: usize, labeled: bool) -> Vec<Scene> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let id = first_id + k;
            sample_scene(cfg, id, labeled, &mut derive_rng(seed, &[stream::SCENE, id]))
        })
        .collect()
}

/// Candidates for many scenes in parallel; output order follows `scenes`.
pub fn generate_records(cfg: &GeneratorConfig, scenes: &[Scene], seed: u64, epoch: u64) -> Result<Vec<SceneRecord>> {
    scenes
        .par_iter()
        .map(|s| {
            Ok(SceneRecord {
                scene: s.clone(),
                candidates: scene_candidates(cfg, s, seed, epoch)?,
            })
        })
        .collect()
}

/// Joins candidates of labeled scenes with their GT-IoU targets.
///
/// Context class comes from the generating object when there is one and
/// from the predicted class otherwise; distance from the candidate box.
pub fn labeled_batch(records: &[SceneRecord], mode: IouMode) -> Result<Vec<LabeledCandidate>> {
    let mut out = Vec::new();
    for rec in records {
        if !rec.scene.labeled {
            return Err(Error::InvalidInput(format!(
                "scene {} is unlabeled; GT-IoU targets need labels",
                rec.scene.id
            )));
        }
        for c in &rec.candidates {
            let class_id = match c.source_gt {
                Some(g) => rec.scene.objects[g].class_id,
                None => c.predicted_class(),
            };
            out.push(LabeledCandidate {
                scores: c.score_feature(),
                context: ContextFeature {
                    class_id,
                    distance: c.bbox.distance(),
                },
                bbox: c.bbox,
                gt_iou: max_iou_against(&rec.scene.objects, &c.bbox, mode),
            });
        }
    }
    Ok(out)
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?,
        );
    }
    Ok(out)
}
