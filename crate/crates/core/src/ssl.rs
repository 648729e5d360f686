//! Burn-in, the semi-supervised epoch loop, the EMA teacher and Soft
//! Supervision, driven against a proxy student.
//!
//! The proxy student refines the student view's raw detections into boxes
//! and class logits; the EMA of its parameters refines the teacher's
//! pseudo-label boxes and sets the teacher's learning state.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{match_counts, Counts, MatchConfig, PrReport};
use crate::geom3d::{angle_diff, bev_iou, iou, normalize_yaw, Box7};
use crate::psm::{self, LabeledCandidate, PseudoLabel, PsmConfig, PsmModel, PsmOptimizer};
use crate::rng::{derive_rng, stream, RngState};
use crate::simworld::{
    generate_records, labeled_batch, render_detection, GeneratorConfig, Scene, SceneRecord, TeacherCandidate,
};
use crate::tinynn::{log_sum_exp, softmax, AdamConfig, AdamState, Mlp, OutputActivation};

/// Box correction dimensions: radial, tangential, vertical, log l/w/h, yaw.
pub const BOX_DIMS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if epochs == 0 => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurnInConfig {
    pub epochs: usize,
    /// Candidates per PSM minibatch.
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Passes of the proxy student over the labeled scenes.
    pub student_epochs: usize,
}

impl BurnInConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                path: "burnin.batch_size".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

impl Default for BurnInConfig {
    fn default() -> Self {
        BurnInConfig {
            epochs: 60,
            batch_size: 16,
            lr_schedule: LrSchedule::Cosine,
            student_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub epochs: usize,
    pub unlabeled_per_epoch: usize,
    pub labeled_per_step: usize,
    pub unlabeled_per_step: usize,
    pub ema_momentum: f64,
    pub student_widths: Vec<usize>,
    pub student_optimizer: AdamConfig,
    pub smooth_l1_beta: f64,
    /// Train the PSM for one labeled pass after every epoch.
    pub psm_online_updates: bool,
    pub psm_online_lr: f64,
    pub psm_online_batch_size: usize,
    /// Weight unlabeled losses by joint confidence; `false` means `w = 1`.
    pub reweight: bool,
    pub soft_gt_sampling: bool,
    pub soft_gt_quota: Vec<usize>,
    pub soft_gt_dedup_iou: f64,
    pub soft_gt_overlap_iou: f64,
    pub initial_learning_state: f64,
    pub nms_iou: f64,
    /// BEV IoU a student detection needs to be trained toward a target.
    pub student_match_iou: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 80,
            unlabeled_per_epoch: 600,
            labeled_per_step: 4,
            unlabeled_per_step: 12,
            ema_momentum: 0.999,
            student_widths: vec![32, 32],
            student_optimizer: AdamConfig::default(),
            smooth_l1_beta: 0.1,
            psm_online_updates: true,
            psm_online_lr: 1e-4,
            psm_online_batch_size: 16,
            reweight: true,
            soft_gt_sampling: true,
            soft_gt_quota: vec![2, 1, 1],
            soft_gt_dedup_iou: 0.7,
            soft_gt_overlap_iou: 0.05,
            initial_learning_state: 0.3,
            nms_iou: 0.1,
            student_match_iou: 0.3,
        }
    }
}

impl SslConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: format!("ssl.{path}"),
            message,
        };
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(bad("ema_momentum", format!("must lie in [0, 1), got {}", self.ema_momentum)));
        }
        if self.labeled_per_step == 0 || self.unlabeled_per_step == 0 {
            return Err(bad("labeled_per_step", "scenes per step must be positive".into()));
        }
        if self.student_widths.contains(&0) {
            return Err(bad("student_widths", "widths must be positive".into()));
        }
        if self.soft_gt_quota.len() != num_classes {
            return Err(bad("soft_gt_quota", format!("expected {num_classes} entries")));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(bad("smooth_l1_beta", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_learning_state) {
            return Err(bad("initial_learning_state", "must lie in [0, 1]".into()));
        }
        if self.psm_online_batch_size == 0 {
            return Err(bad("psm_online_batch_size", "must be positive".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(bad("nms_iou", format!("must lie in (0, 1], got {}", self.nms_iou)));
        }
        Ok(())
    }
}

/// Teacher parameters kept as an exponential moving average of the student's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub theta: Vec<f64>,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(theta: Vec<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidInput(format!("EMA momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(EmaState { theta, momentum })
    }

    /// `θ_t ← ρ θ_t + (1 − ρ) θ_s`.
    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        if student.len() != self.theta.len() {
            return Err(Error::WidthMismatch {
                expected: self.theta.len(),
                got: student.len(),
            });
        }
        let rho = self.momentum;
        for (t, s) in self.theta.iter_mut().zip(student) {
            *t = rho * *t + (1.0 - rho) * s;
        }
        Ok(())
    }
}

pub fn ema_update(st: &mut EmaState, student: &[f64]) -> Result<()> {
    st.update(student)
}

/// Encodes `target` relative to `raw` in the sensor-radial frame of `raw`.
pub fn encode_box(raw: &Box7, target: &Box7) -> [f64; BOX_DIMS] {
    let (ux, uy) = radial_unit(raw);
    let (dx, dy) = (target.cx - raw.cx, target.cy - raw.cy);
    [
        dx * ux + dy * uy,
        -dx * uy + dy * ux,
        target.cz - raw.cz,
        (target.l / raw.l).ln(),
        (target.w / raw.w).ln(),
        (target.h / raw.h).ln(),
        angle_diff(target.yaw, raw.yaw),
    ]
}

pub fn decode_box(raw: &Box7, delta: &[f64]) -> Box7 {
    let (ux, uy) = radial_unit(raw);
    Box7 {
        cx: raw.cx + delta[0] * ux - delta[1] * uy,
        cy: raw.cy + delta[0] * uy + delta[1] * ux,
        cz: raw.cz + delta[2],
        l: raw.l * delta[3].exp(),
        w: raw.w * delta[4].exp(),
        h: raw.h * delta[5].exp(),
        yaw: normalize_yaw(raw.yaw + delta[6]),
    }
}

fn radial_unit(b: &Box7) -> (f64, f64) {
    let r = b.distance();
    if r < 1e-9 {
        (1.0, 0.0)
    } else {
        (b.cx / r, b.cy / r)
    }
}

/// Desk-scale stand-in for the student detector's refinement head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyStudent {
    pub mlp: Mlp,
    pub num_classes: usize,
    /// Per-class mean `[l, w, h]`, the student's size anchors.
    pub size_priors: Vec<[f64; 3]>,
    pub max_range: f64,
}

impl ProxyStudent {
    pub fn input_width(num_classes: usize) -> usize {
        num_classes + 8
    }

    pub fn new<R: Rng + ?Sized>(gen: &GeneratorConfig, widths: &[usize], rng: &mut R) -> Result<Self> {
        let c = gen.num_classes();
        let mut all = widths.to_vec();
        all.push(BOX_DIMS + c);
        Ok(ProxyStudent {
            mlp: Mlp::new(Self::input_width(c), &all, OutputActivation::Identity, rng)?,
            num_classes: c,
            size_priors: gen.classes.iter().map(|k| k.size_mean).collect(),
            max_range: gen.max_range,
        })
    }

    /// Same architecture with a different parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.mlp.num_params() {
            return Err(Error::WidthMismatch {
                expected: self.mlp.num_params(),
                got: params.len(),
            });
        }
        let mut out = self.clone();
        out.mlp.params_mut().copy_from_slice(params);
        Ok(out)
    }

    pub fn descriptor(&self, c: &TeacherCandidate) -> Vec<f64> {
        let k = c.predicted_class().min(self.num_classes - 1);
        let prior = self.size_priors[k];
        let b = &c.bbox;
        let mut x = vec![0.0; Self::input_width(self.num_classes)];
        x[k] = 1.0;
        let o = self.num_classes;
        x[o] = b.distance() / self.max_range;
        x[o + 1] = (b.l / prior[0]).ln();
        x[o + 2] = (b.w / prior[1]).ln();
        x[o + 3] = (b.h / prior[2]).ln();
        x[o + 4] = b.cz - 0.5 * b.h;
        x[o + 5] = crate::tinynn::sigmoid(c.obj_logit);
        x[o + 6] = softmax(&c.cls_logits).into_iter().fold(0.0, f64::max);
        x[o + 7] = angle_diff(b.yaw, b.cy.atan2(b.cx)).cos();
        x
    }

    /// Raw network output: box correction then class logits.
    pub fn predict(&self, c: &TeacherCandidate) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(&self.descriptor(c))?.output().to_vec())
    }

    pub fn refine(&self, c: &TeacherCandidate) -> Result<Box7> {
        let out = self.predict(c)?;
        Ok(decode_box(&c.bbox, &out[..BOX_DIMS]))
    }
}

/// One training example for the proxy student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentInstance {
    pub input: Vec<f64>,
    pub target: [f64; BOX_DIMS],
    pub class_id: usize,
    pub weight: f64,
}

pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Unweighted per-instance loss `CE + smooth-L1` and its output gradient.
pub fn instance_loss(out: &[f64], inst: &StudentInstance, beta: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; out.len()];
    let mut loss = 0.0;
    for k in 0..BOX_DIMS {
        let (l, g) = smooth_l1(out[k] - inst.target[k], beta);
        loss += l;
        grad[k] = g;
    }
    let logits = &out[BOX_DIMS..];
    loss += log_sum_exp(logits) - logits[inst.class_id];
    for (k, p) in softmax(logits).into_iter().enumerate() {
        grad[BOX_DIMS + k] = p - if k == inst.class_id { 1.0 } else { 0.0 };
    }
    (loss, grad)
}

/// `(1/N) Σ w_i (CE_i + smooth-L1_i)` and its parameter gradient; zero for
/// an empty set.
pub fn weighted_loss(student: &ProxyStudent, instances: &[StudentInstance], beta: f64) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; student.mlp.num_params()];
    if instances.is_empty() {
        return Ok((0.0, grads));
    }
    let n = instances.len() as f64;
    let mut total = 0.0;
    for inst in instances {
        if inst.class_id >= student.num_classes {
            return Err(Error::UnknownClass {
                class_id: inst.class_id,
                classes: student.num_classes,
            });
        }
        let cache = student.mlp.forward(&inst.input)?;
        let (l, g) = instance_loss(cache.output(), inst, beta);
        total += inst.weight * l;
        if inst.weight != 0.0 {
            let up: Vec<f64> = g.iter().map(|v| v * inst.weight / n).collect();
            student.mlp.backward_into(&cache, &up, &mut grads)?;
        }
    }
    Ok((total / n, grads))
}

/// `L_u` over instances carrying their pseudo-label weights.
pub fn unlabeled_loss(student: &ProxyStudent, instances: &[StudentInstance], beta: f64) -> Result<(f64, Vec<f64>)> {
    weighted_loss(student, instances, beta)
}

/// A training target: box, class, weight and the geometry a pasted copy of
/// it would be rendered from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: Box7,
    pub class_id: usize,
    pub weight: f64,
}

/// Pairs every student detection with the target of highest BEV IoU at or
/// above `match_iou`.
pub fn match_instances(
    student: &ProxyStudent,
    detections: &[TeacherCandidate],
    targets: &[Target],
    match_iou: f64,
) -> Vec<StudentInstance> {
    let mut out = Vec::new();
    for d in detections {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in targets.iter().enumerate() {
            let v = bev_iou(&d.bbox, &t.bbox);
            if v >= match_iou && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            let t = &targets[j];
            out.push(StudentInstance {
                input: student.descriptor(d),
                target: encode_box(&d.bbox, &t.bbox),
                class_id: t.class_id,
                weight: t.weight,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftGtEntry {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class_id: usize,
    /// Joint confidence of the source pseudo-label.
    pub weight: f64,
    pub scene_id: u64,
    pub epoch: usize,
    /// Geometry of whatever produced the pseudo-label; pasted copies are
    /// detected around it. Generator-internal.
    pub render_box: Box7,
}

/// Append-only store of pseudo-labels for Soft GT sampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftGtDatabase {
    entries: Vec<SoftGtEntry>,
    by_class: Vec<Vec<usize>>,
    by_scene: HashMap<u64, Vec<usize>>,
}

impl SoftGtDatabase {
    pub fn new(num_classes: usize) -> Self {
        SoftGtDatabase {
            entries: Vec::new(),
            by_class: vec![Vec::new(); num_classes],
            by_scene: HashMap::new(),
        }
    }

    pub fn from_entries(num_classes: usize, entries: Vec<SoftGtEntry>) -> Result<Self> {
        let mut db = Self::new(num_classes);
        for e in entries {
            db.push(e)?;
        }
        Ok(db)
    }

    fn push(&mut self, e: SoftGtEntry) -> Result<()> {
        if !(e.weight > 0.0 && e.weight <= 1.0) {
            return Err(Error::Invariant(format!("soft GT weight {} outside (0, 1]", e.weight)));
        }
        let idx = self.entries.len();
        let classes = self.by_class.len();
        self.by_class
            .get_mut(e.class_id)
            .ok_or(Error::UnknownClass {
                class_id: e.class_id,
                classes,
            })?
            .push(idx);
        self.by_scene.entry(e.scene_id).or_default().push(idx);
        self.entries.push(e);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SoftGtEntry] {
        &self.entries
    }

    pub fn class_indices(&self, class_id: usize) -> &[usize] {
        self.by_class.get(class_id).map_or(&[], |v| v.as_slice())
    }

    /// Inserts one scene's pseudo-labels, skipping any whose BEV IoU with a
    /// same-class entry from the same scene exceeds `dedup_iou`. Returns the
    /// number inserted.
    pub fn insert_scene(&mut self, candidates: Vec<SoftGtEntry>, dedup_iou: f64) -> Result<usize> {
        let mut inserted = 0;
        for e in candidates {
            let dup = self.by_scene.get(&e.scene_id).is_some_and(|idx| {
                idx.iter().any(|&i| {
                    let o = &self.entries[i];
                    o.class_id == e.class_id && bev_iou(&o.bbox, &e.bbox) > dedup_iou
                })
            });
            if !dup {
                self.push(e)?;
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if len < self.entries.len() {
            let keep = self.entries[..len].to_vec();
            *self = Self::from_entries(self.by_class.len(), keep)?;
        }
        Ok(())
    }
}

/// Draws up to `quota[c]` entries per class, rejecting any whose BEV IoU
/// with an occupied box exceeds `overlap_iou`.
pub fn soft_gt_sample<R: Rng + ?Sized>(
    db: &SoftGtDatabase,
    occupied: &[Box7],
    rng: &mut R,
    quota: &[usize],
    overlap_iou: f64,
) -> Vec<SoftGtEntry> {
    let mut taken: Vec<Box7> = occupied.to_vec();
    let mut out = Vec::new();
    for (c, &q) in quota.iter().enumerate() {
        let pool = db.class_indices(c);
        if q == 0 || pool.is_empty() {
            continue;
        }
        let picks = rand::seq::index::sample(rng, pool.len(), q.min(pool.len()));
        for i in picks.iter().map(|k| pool[k]) {
            let e = &db.entries[i];
            if taken.iter().all(|b| bev_iou(b, &e.bbox) <= overlap_iou) {
                taken.push(e.bbox);
                out.push(e.clone());
            }
        }
    }
    out
}

/// The student's own raw detections of a scene for an epoch.
pub fn student_view(gen: &GeneratorConfig, scene: &Scene, seed: u64, epoch: u64) -> Vec<TeacherCandidate> {
    let mut rng = derive_rng(seed, &[stream::STUDENT_VIEW, scene.id, epoch]);
    crate::simworld::teacher_predict(gen, scene, &mut rng)
}

/// Validation scenes paired with the detections the student refines; fixed
/// for the whole run.
pub fn validation_set(gen: &GeneratorConfig, scenes: &[Scene], seed: u64) -> Vec<(Scene, Vec<TeacherCandidate>)> {
    scenes
        .iter()
        .map(|s| (s.clone(), student_view(gen, s, seed, 0)))
        .collect()
}

fn gt_targets(scene: &Scene) -> Vec<Target> {
    scene
        .objects
        .iter()
        .map(|o| Target {
            bbox: o.bbox,
            class_id: o.class_id,
            weight: 1.0,
        })
        .collect()
}

/// Mean `1 − IoU` of raw and refined detections against their best GT
/// (BEV IoU ≥ `match_iou`), over the validation detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineError {
    pub raw: f64,
    pub refined: f64,
    pub count: usize,
}

impl RefineError {
    /// Relative improvement of refined over raw boxes.
    pub fn quality(&self) -> f64 {
        if self.raw > 0.0 {
            1.0 - self.refined / self.raw
        } else {
            0.0
        }
    }
}

pub fn refine_error(
    student: &ProxyStudent,
    validation: &[(Scene, Vec<TeacherCandidate>)],
    match_iou: f64,
    gen: &GeneratorConfig,
) -> Result<RefineError> {
    let (mut raw, mut refined, mut n) = (0.0, 0.0, 0usize);
    for (scene, dets) in validation {
        for d in dets {
            let best = scene
                .objects
                .iter()
                .map(|o| (o, bev_iou(&d.bbox, &o.bbox)))
                .filter(|(_, v)| *v >= match_iou)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            let Some((o, _)) = best else { continue };
            let r = student.refine(d)?;
            raw += 1.0 - iou(&d.bbox, &o.bbox, gen.iou_mode);
            refined += 1.0 - iou(&r, &o.bbox, gen.iou_mode);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(RefineError {
            raw: 0.0,
            refined: 0.0,
            count: 0,
        });
    }
    Ok(RefineError {
        raw: raw / n as f64,
        refined: refined / n as f64,
        count: n,
    })
}

/// Everything needed to continue a run after the last completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslState {
    /// Completed semi-supervised epochs.
    pub epoch: usize,
    pub psm: PsmModel,
    pub psm_optimizer: PsmOptimizer,
    pub student: ProxyStudent,
    pub student_optimizer: AdamState,
    pub teacher: EmaState,
    pub learning_state: f64,
    pub rng: RngState,
    pub soft_gt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurnInReport {
    pub l_pqe: Vec<f64>,
    pub l_cte: Vec<f64>,
    pub student_loss: Vec<f64>,
}

/// Labeled candidates of the burn-in records.
pub fn burn_in_batch(records: &[SceneRecord], gen: &GeneratorConfig) -> Result<Vec<LabeledCandidate>> {
    labeled_batch(records, gen.iou_mode)
}

/// Stage 1: trains the PSM on labeled candidates and the proxy student on
/// labeled scenes; the teacher starts as a copy of the student.
pub fn burn_in(
    settings: &Settings,
    labeled: &[SceneRecord],
    validation: &[(Scene, Vec<TeacherCandidate>)],
) -> Result<(SslState, BurnInReport)> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("burn-in needs at least one labeled scene".into()));
    }
    let seed = settings.seed;
    let e0 = settings.ssl.initial_learning_state;
    let gen = settings.generator.with_learning_state(e0);

    let data = burn_in_batch(labeled, &gen)?;
    let mut psm_model = PsmModel::new(settings.psm.clone(), &mut derive_rng(seed, &[stream::INIT, 0]))?;
    let mut psm_opt = PsmOptimizer::new(&psm_model, settings.optimizer);
    let mut shuffle = derive_rng(seed, &[stream::SHUFFLE, 0]);
    let mut report = BurnInReport {
        l_pqe: Vec::new(),
        l_cte: Vec::new(),
        student_loss: Vec::new(),
    };
    let b = &settings.burnin;
    if !data.is_empty() {
        for ep in 0..b.epochs {
            psm_opt.adam.config.lr = b.lr_schedule.rate(settings.optimizer.lr, ep, b.epochs);
            let l = psm::train_epoch(&mut psm_model, &mut psm_opt, &data, b.batch_size, &mut shuffle)?;
            report.l_pqe.push(l.l_pqe);
            report.l_cte.push(l.l_cte);
        }
    }
    psm_opt.adam.config.lr = settings.optimizer.lr;

    let mut student = ProxyStudent::new(&gen, &settings.ssl.student_widths, &mut derive_rng(seed, &[stream::INIT, 1]))?;
    let mut student_opt = AdamState::new(student.mlp.num_params(), settings.ssl.student_optimizer);
    let per_scene: Vec<Vec<StudentInstance>> = labeled
        .iter()
        .map(|r| {
            let dets = student_view(&gen, &r.scene, seed, 0);
            match_instances(&student, &dets, &gt_targets(&r.scene), settings.ssl.student_match_iou)
        })
        .collect();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut srng = derive_rng(seed, &[stream::SHUFFLE, 1]);
    for _ in 0..b.student_epochs {
        order.shuffle(&mut srng);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(settings.ssl.labeled_per_step) {
            let batch: Vec<StudentInstance> = chunk.iter().flat_map(|&i| per_scene[i].iter().cloned()).collect();
            let (l, g) = weighted_loss(&student, &batch, settings.ssl.smooth_l1_beta)?;
            student_opt.step(student.mlp.params_mut(), &g)?;
            total += l;
            steps += 1;
        }
        report.student_loss.push(if steps > 0 { total / steps as f64 } else { 0.0 });
    }

    let teacher = EmaState::new(student.mlp.params().to_vec(), settings.ssl.ema_momentum)?;
    let q = refine_error(&student, validation, settings.ssl.student_match_iou, &gen)?.quality();
    let state = SslState {
        epoch: 0,
        psm: psm_model,
        psm_optimizer: psm_opt,
        student,
        student_optimizer: student_opt,
        teacher,
        learning_state: learning_state(e0, q),
        rng: RngState::capture(&derive_rng(seed, &[stream::RUN])),
        soft_gt_len: 0,
    };
    Ok((state, report))
}

/// `e = e₀ + (1 − e₀) · clamp(q, 0, 1)`.
pub fn learning_state(e0: f64, q: f64) -> f64 {
    e0 + (1.0 - e0) * q.clamp(0.0, 1.0)
}

/// The configuration sections the harness reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub psm: PsmConfig,
    pub optimizer: AdamConfig,
    pub burnin: BurnInConfig,
    pub ssl: SslConfig,
    pub matching: MatchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub learning_state: f64,
    pub pr: PrReport,
    pub l_pqe: f64,
    pub l_cte: f64,
    pub l_l: f64,
    pub l_u: f64,
    pub l_total: f64,
    pub refine_error: f64,
    pub teacher_refine_error: f64,
    pub raw_error: f64,
    pub pseudo_labels: usize,
    pub soft_gt_size: usize,
    pub soft_gt_inserted: usize,
}

/// Pseudo-labels of one scene, with teacher-refined boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePseudo {
    pub labels: Vec<PseudoLabel>,
    pub render: Vec<Box7>,
}

/// Selection on one scene's teacher candidates; boxes are refined by the
/// teacher's copy of the proxy student.
pub fn pseudo_label_scene(
    psm_model: &PsmModel,
    teacher: &ProxyStudent,
    scene: &Scene,
    candidates: &[TeacherCandidate],
    nms_iou: f64,
) -> Result<ScenePseudo> {
    let sel: Vec<_> = candidates.iter().map(|c| c.selection_candidate()).collect();
    let mut labels = psm::select(psm_model, &sel, nms_iou)?;
    let mut render = Vec::with_capacity(labels.len());
    for l in &mut labels {
        let c = &candidates[l.source];
        l.bbox = teacher.refine(c)?;
        render.push(match c.source_gt {
            Some(g) => scene.objects[g].bbox,
            None => c.bbox,
        });
    }
    Ok(ScenePseudo { labels, render })
}

/// The semi-supervised loop over a fixed scene pool.
pub struct SslRunner<'a> {
    pub settings: &'a Settings,
    pub labeled: &'a [Scene],
    pub unlabeled: &'a [Scene],
    pub validation: &'a [(Scene, Vec<TeacherCandidate>)],
    pub state: SslState,
    pub soft_gt: SoftGtDatabase,
}

impl<'a> SslRunner<'a> {
    pub fn new(
        settings: &'a Settings,
        labeled: &'a [Scene],
        unlabeled: &'a [Scene],
        validation: &'a [(Scene, Vec<TeacherCandidate>)],
        state: SslState,
        soft_gt: SoftGtDatabase,
    ) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::InvalidInput("semi-supervised training needs labeled scenes".into()));
        }
        if soft_gt.len() != state.soft_gt_len {
            return Err(Error::Invariant(format!(
                "soft GT database holds {} entries, state expects {}",
                soft_gt.len(),
                state.soft_gt_len
            )));
        }
        Ok(SslRunner {
            settings,
            labeled,
            unlabeled,
            validation,
            state,
            soft_gt,
        })
    }

    fn epoch_scenes(&self, epoch: usize) -> Vec<&'a Scene> {
        let n = self.unlabeled.len();
        if n == 0 {
            return Vec::new();
        }
        let k = self.settings.ssl.unlabeled_per_epoch.min(n);
        (0..k).map(|i| &self.unlabeled[(epoch * k + i) % n]).collect()
    }

    /// Runs the next epoch, returning its report and the soft GT entries it
    /// appended.
    pub fn run_epoch(&mut self) -> Result<(EpochReport, Vec<SoftGtEntry>)> {
        let s = self.settings;
        let cfg = &s.ssl;
        let epoch = self.state.epoch + 1;
        let e = self.state.learning_state;
        let gen = s.generator.with_learning_state(e);
        let seed = s.seed;
        let mut rng: ChaCha8Rng = self
            .state
            .rng
            .restore()
            .map_err(|err| Error::Invariant(format!("corrupt RNG state: {err}")))?;

        // (a) teacher candidates and (b) selection on this epoch's scenes.
        let teacher = self.state.student.with_params(&self.state.teacher.theta)?;
        let scenes = self.epoch_scenes(epoch);
        let psm_model = &self.state.psm;
        let selected: Vec<(ScenePseudo, Vec<Counts>)> = scenes
            .par_iter()
            .map(|scene| {
                let cands = crate::simworld::scene_candidates(&gen, scene, seed, epoch as u64)?;
                let p = pseudo_label_scene(psm_model, &teacher, scene, &cands, cfg.nms_iou)?;
                let counts = match_counts(&p.labels, &scene.objects, &s.matching);
                Ok((p, counts))
            })
            .collect::<Result<_>>()?;

        let mut counts = vec![Counts::default(); gen.num_classes()];
        let mut inserted_entries = Vec::new();
        let mut pseudo_labels = 0;
        for (scene, (p, c)) in scenes.iter().zip(&selected) {
            for (k, ck) in c.iter().enumerate() {
                counts[k].add(ck);
            }
            pseudo_labels += p.labels.len();
            let entries: Vec<SoftGtEntry> = p
                .labels
                .iter()
                .zip(&p.render)
                .map(|(l, r)| SoftGtEntry {
                    bbox: l.bbox,
                    class_id: l.class_id,
                    weight: l.weight,
                    scene_id: scene.id,
                    epoch,
                    render_box: *r,
                })
                .collect();
            let before = self.soft_gt.len();
            self.soft_gt.insert_scene(entries, cfg.soft_gt_dedup_iou)?;
            inserted_entries.extend_from_slice(&self.soft_gt.entries()[before..]);
        }

        // (c) student on L_l + L_u with Soft Supervision, (d) EMA per step.
        let psm_before = self.state.psm.clone();
        let mut labeled_order: Vec<usize> = (0..self.labeled.len()).collect();
        labeled_order.shuffle(&mut rng);
        let mut lab_cursor = 0;
        let (mut sum_l, mut sum_u, mut steps) = (0.0, 0.0, 0usize);
        let unl_idx: Vec<usize> = (0..scenes.len()).collect();
        for chunk in unl_idx.chunks(cfg.unlabeled_per_step) {
            let mut lab_inst = Vec::new();
            for _ in 0..cfg.labeled_per_step {
                if lab_cursor == labeled_order.len() {
                    labeled_order.shuffle(&mut rng);
                    lab_cursor = 0;
                }
                let scene = &self.labeled[labeled_order[lab_cursor]];
                lab_cursor += 1;
                let dets = student_view(&gen, scene, seed, epoch as u64);
                lab_inst.extend(match_instances(&self.state.student, &dets, &gt_targets(scene), cfg.student_match_iou));
            }
            let mut unl_inst = Vec::new();
            for &i in chunk {
                let scene = scenes[i];
                let p = &selected[i].0;
                let targets: Vec<Target> = p
                    .labels
                    .iter()
                    .map(|l| Target {
                        bbox: l.bbox,
                        class_id: l.class_id,
                        weight: if cfg.reweight { l.weight } else { 1.0 },
                    })
                    .collect();
                let dets = student_view(&gen, scene, seed, epoch as u64);
                unl_inst.extend(match_instances(&self.state.student, &dets, &targets, cfg.student_match_iou));
                if cfg.soft_gt_sampling {
                    let mut occupied: Vec<Box7> = scene.objects.iter().map(|o| o.bbox).collect();
                    occupied.extend(p.labels.iter().map(|l| l.bbox));
                    let mut srng = derive_rng(seed, &[stream::SOFT_GT, scene.id, epoch as u64]);
                    for entry in soft_gt_sample(&self.soft_gt, &occupied, &mut srng, &cfg.soft_gt_quota, cfg.soft_gt_overlap_iou) {
                        let det = render_detection(&gen, entry.class_id, &entry.render_box, &mut srng);
                        unl_inst.push(StudentInstance {
                            input: self.state.student.descriptor(&det),
                            target: encode_box(&det.bbox, &entry.bbox),
                            class_id: entry.class_id,
                            weight: if cfg.reweight { entry.weight } else { 1.0 },
                        });
                    }
                }
            }
            let (ll, gl) = weighted_loss(&self.state.student, &lab_inst, cfg.smooth_l1_beta)?;
            let (lu, gu) = unlabeled_loss(&self.state.student, &unl_inst, cfg.smooth_l1_beta)?;
            let g: Vec<f64> = gl.iter().zip(&gu).map(|(a, b)| a + b).collect();
            self.state.student_optimizer.step(self.state.student.mlp.params_mut(), &g)?;
            self.state.teacher.update(self.state.student.mlp.params())?;
            sum_l += ll;
            sum_u += lu;
            steps += 1;
        }
        if self.state.psm != psm_before {
            return Err(Error::Invariant("student losses changed PSM parameters".into()));
        }

        // (e) one PSM pass on labeled scenes at the current learning state.
        let student_before = (self.state.student.clone(), self.state.teacher.clone());
        let records = generate_records(&gen, self.labeled, seed, epoch as u64)?;
        let data = labeled_batch(&records, gen.iou_mode)?;
        let (l_pqe, l_cte) = if data.is_empty() {
            (0.0, 0.0)
        } else if cfg.psm_online_updates {
            self.state.psm_optimizer.adam.config.lr = cfg.psm_online_lr;
            let l = psm::train_epoch(
                &mut self.state.psm,
                &mut self.state.psm_optimizer,
                &data,
                cfg.psm_online_batch_size,
                &mut rng,
            )?;
            (l.l_pqe, l.l_cte)
        } else {
            (psm::l_pqe(&self.state.psm, &data)?.0, psm::l_cte(&self.state.psm, &data)?.0)
        };
        if (self.state.student.clone(), self.state.teacher.clone()) != student_before {
            return Err(Error::Invariant("PSM training changed student or teacher parameters".into()));
        }

        // Learning state for the next epoch from the teacher's refinement.
        let teacher = self.state.student.with_params(&self.state.teacher.theta)?;
        let t_err = refine_error(&teacher, self.validation, cfg.student_match_iou, &gen)?;
        let s_err = refine_error(&self.state.student, self.validation, cfg.student_match_iou, &gen)?;
        self.state.learning_state = learning_state(cfg.initial_learning_state, t_err.quality());

        let l_l = if steps > 0 { sum_l / steps as f64 } else { 0.0 };
        let l_u = if steps > 0 { sum_u / steps as f64 } else { 0.0 };
        let report = EpochReport {
            epoch,
            learning_state: e,
            pr: PrReport::from_counts(&counts),
            l_pqe,
            l_cte,
            l_l,
            l_u,
            l_total: l_l + l_u + (l_pqe + l_cte),
            refine_error: s_err.refined,
            teacher_refine_error: t_err.refined,
            raw_error: s_err.raw,
            pseudo_labels,
            soft_gt_size: self.soft_gt.len(),
            soft_gt_inserted: inserted_entries.len(),
        };
        let finite = [l_pqe, l_cte, l_l, l_u, report.l_total, report.refine_error, report.teacher_refine_error]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !self.state.psm.is_finite() || !self.state.student.mlp.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite value in epoch {epoch}: {}",
                serde_json::to_string(&report).unwrap_or_default()
            )));
        }
        self.state.epoch = epoch;
        self.state.rng = RngState::capture(&rng);
        self.state.soft_gt_len = self.soft_gt.len();
        Ok((report, inserted_entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::gradcheck::{central_difference, max_relative_error};

    fn student(seed: u64) -> ProxyStudent {
        ProxyStudent::new(&GeneratorConfig::default(), &[16, 16], &mut derive_rng(seed, &[])).unwrap()
    }

    fn instances(s: &ProxyStudent, seed: u64, n: usize) -> Vec<StudentInstance> {
        let mut rng = derive_rng(seed, &[1]);
        (0..n)
            .map(|_| StudentInstance {
                input: (0..ProxyStudent::input_width(s.num_classes)).map(|_| rng.random_range(-1.0..1.0)).collect(),
                target: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
                class_id: rng.random_range(0..s.num_classes),
                weight: rng.random_range(0.0..1.0),
            })
            .collect()
    }

    #[test]
    fn ema_matches_closed_forms() {
        let mut st = EmaState::new(vec![0.0; 4], 0.9).unwrap();
        st.update(&[1.0; 4]).unwrap();
        assert!(st.theta.iter().all(|t| (*t - 0.1).abs() < 1e-15));
        let mut st = EmaState::new(vec![3.0, -1.0], 0.0).unwrap();
        st.update(&[0.5, 0.25]).unwrap();
        assert_eq!(st.theta, vec![0.5, 0.25]);
        assert!(st.update(&[1.0]).is_err());
        assert!(EmaState::new(vec![], 1.0).is_err());
    }

    #[test]
    fn box_encoding_round_trips() {
        let mut rng = derive_rng(2, &[]);
        for _ in 0..200 {
            let raw = Box7::new(
                rng.random_range(-70.0..70.0),
                rng.random_range(-70.0..70.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(-3.0..3.0),
            )
            .unwrap();
            let mut t = raw;
            t.cx += rng.random_range(-1.0..1.0);
            t.cy += rng.random_range(-1.0..1.0);
            t.l *= 1.1;
            t.yaw = normalize_yaw(t.yaw + 0.2);
            let back = decode_box(&raw, &encode_box(&raw, &t));
            for (a, b) in [(back.cx, t.cx), (back.cy, t.cy), (back.cz, t.cz), (back.l, t.l), (back.w, t.w), (back.h, t.h)] {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(angle_diff(back.yaw, t.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_weights_give_plain_mean() {
        let s = student(3);
        let mut inst = instances(&s, 4, 10);
        for i in &mut inst {
            i.weight = 1.0;
        }
        let (l, _) = weighted_loss(&s, &inst, 0.1).unwrap();
        let mut plain = 0.0;
        for i in &inst {
            plain += instance_loss(s.mlp.forward(&i.input).unwrap().output(), i, 0.1).0;
        }
        assert_eq!(l, plain / inst.len() as f64);
    }

    #[test]
    fn zero_weight_contributes_nothing() {
        let s = student(5);
        let mut inst = instances(&s, 6, 8);
        inst[3].weight = 0.0;
        let (l_all, g_all) = weighted_loss(&s, &inst, 0.1).unwrap();
        let mut others = inst.clone();
        others[3].target = [9.0; BOX_DIMS];
        others[3].class_id = (inst[3].class_id + 1) % 3;
        let (l_mod, g_mod) = weighted_loss(&s, &others, 0.1).unwrap();
        assert_eq!(l_all, l_mod);
        assert_eq!(g_all, g_mod);
        let (l0, g0) = weighted_loss(&s, &inst[3..4], 0.1).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let s = student(7);
        let inst = instances(&s, 8, 12);
        let doubled: Vec<_> = inst
            .iter()
            .cloned()
            .map(|mut i| {
                i.weight *= 2.0;
                i
            })
            .collect();
        let (a, ga) = unlabeled_loss(&s, &inst, 0.1).unwrap();
        let (b, gb) = unlabeled_loss(&s, &doubled, 0.1).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(ga.iter().zip(&gb).all(|(x, y)| *y == 2.0 * x));
        assert_eq!(unlabeled_loss(&s, &[], 0.1).unwrap().0, 0.0);
    }

    #[test]
    fn weight_ratio_scales_gradient() {
        let s = student(9);
        let base = instances(&s, 10, 1).remove(0);
        let mut lo = base.clone();
        lo.weight = 0.2;
        let mut hi = base;
        hi.weight = 0.9;
        let (_, glo) = weighted_loss(&s, &[lo], 0.1).unwrap();
        let (_, ghi) = weighted_loss(&s, &[hi], 0.1).unwrap();
        for (a, b) in glo.iter().zip(&ghi) {
            if a.abs() > 1e-12 {
                assert!((b / a - 4.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let beta = 0.1;
        let mut checked = 0;
        for seed in 0..30 {
            let s = student(100 + seed);
            let inst = instances(&s, 200 + seed, 3);
            // Skip probes near a ReLU or smooth-L1 kink.
            let near_kink = inst.iter().any(|i| {
                let c = s.mlp.forward(&i.input).unwrap();
                c.min_hidden_margin() < 1e-3
                    || (0..BOX_DIMS).any(|k| ((c.output()[k] - i.target[k]).abs() - beta).abs() < 1e-3)
            });
            if near_kink {
                continue;
            }
            let (_, g) = weighted_loss(&s, &inst, beta).unwrap();
            let num = central_difference(
                |p| weighted_loss(&s.with_params(p).unwrap(), &inst, beta).unwrap().0,
                s.mlp.params(),
                1e-5,
            );
            assert!(max_relative_error(&g, &num) < 1e-4);
            checked += 1;
        }
        assert!(checked >= 10);
    }

    fn entry(x: f64, class_id: usize, scene_id: u64, weight: f64) -> SoftGtEntry {
        let b = Box7::new(x, 5.0, 0.8, 3.9, 1.6, 1.6, 0.0).unwrap();
        SoftGtEntry {
            bbox: b,
            class_id,
            weight,
            scene_id,
            epoch: 1,
            render_box: b,
        }
    }

    #[test]
    fn database_dedups_within_scene_and_class() {
        let mut db = SoftGtDatabase::new(3);
        assert_eq!(db.insert_scene(vec![entry(10.0, 0, 1, 0.5)], 0.7).unwrap(), 1);
        // Same place, same scene and class: duplicate.
        assert_eq!(db.insert_scene(vec![entry(10.05, 0, 1, 0.6)], 0.7).unwrap(), 0);
        // Other class or other scene: kept.
        assert_eq!(db.insert_scene(vec![entry(10.0, 1, 1, 0.6), entry(10.0, 0, 2, 0.6)], 0.7).unwrap(), 2);
        assert_eq!(db.len(), 3);
        assert!(db.insert_scene(vec![entry(30.0, 0, 3, 0.0)], 0.7).is_err());
    }

    #[test]
    fn sampling_respects_quota_and_overlap() {
        let mut db = SoftGtDatabase::new(3);
        for k in 0..20 {
            db.insert_scene(vec![entry(6.0 * k as f64, k % 3, k as u64, 0.5)], 0.7).unwrap();
        }
        let mut rng = derive_rng(11, &[]);
        assert!(soft_gt_sample(&db, &[], &mut rng, &[0, 0, 0], 0.05).is_empty());
        assert!(soft_gt_sample(&SoftGtDatabase::new(3), &[], &mut rng, &[2, 2, 2], 0.05).is_empty());
        let occupied: Vec<Box7> = (0..10).map(|k| entry(12.0 * k as f64, 0, 0, 0.5).bbox).collect();
        for _ in 0..50 {
            let s = soft_gt_sample(&db, &occupied, &mut rng, &[2, 1, 1], 0.05);
            for c in 0..3 {
                assert!(s.iter().filter(|e| e.class_id == c).count() <= [2, 1, 1][c]);
            }
            for e in &s {
                assert!(occupied.iter().all(|b| bev_iou(b, &e.bbox) <= 0.05));
            }
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(1e-3, 0, 10), 1e-3);
        assert!(LrSchedule::Cosine.rate(1e-3, 9, 10) < 1e-4);
        assert_eq!(LrSchedule::Constant.rate(1e-3, 9, 10), 1e-3);
    }
}
