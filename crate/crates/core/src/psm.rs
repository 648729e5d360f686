//! Pseudo-label selection module.
//!
//! A quality estimator (PQE) fuses teacher scores into one estimate of the
//! candidate's GT-IoU; a context-aware threshold estimator (CTE) maps
//! (class, distance) to the score threshold that best reproduces the
//! decision `gt_iou >= tau_iou`. A candidate is kept iff `quality > threshold`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{nms_bev, Box7};
use crate::tinynn::{
    argmax, checkpoint, fourier_embed_with, sigmoid, softmax, AdamConfig, AdamState,
    EmbeddingTable, FourierSchedule, Mlp, OutputActivation,
};

pub const CHECKPOINT_KIND: &str = "psm";

/// Teacher scores for one candidate, all in logit form except `iou_consistency`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFeature {
    pub obj_logit: f64,
    pub aug_obj_logit: f64,
    pub cls_logits: Vec<f64>,
    pub iou_consistency: f64,
}

impl ScoreFeature {
    /// PQE input vector: `[obj, aug_obj, cls..., v]`.
    pub fn to_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.cls_logits.len() + 3);
        x.push(self.obj_logit);
        x.push(self.aug_obj_logit);
        x.extend_from_slice(&self.cls_logits);
        x.push(self.iou_consistency);
        x
    }

    pub fn objectness(&self) -> f64 {
        sigmoid(self.obj_logit)
    }

    pub fn max_class_prob(&self) -> f64 {
        softmax(&self.cls_logits).into_iter().fold(0.0, f64::max)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.cls_logits)
    }

    /// `s_obj * max(p_cls)`, the soft-supervision weight.
    pub fn joint_confidence(&self) -> f64 {
        self.objectness() * self.max_class_prob()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextFeature {
    pub class_id: usize,
    /// Ground-plane range of the box center from the sensor, meters.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub scores: ScoreFeature,
    pub context: ContextFeature,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub gt_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsmConfig {
    pub num_classes: usize,
    pub pqe_widths: Vec<usize>,
    pub cte_widths: Vec<usize>,
    pub class_embed_dim: usize,
    pub fourier_dim: usize,
    pub fourier: FourierSchedule,
    pub max_range: f64,
    pub tau_iou: f64,
}

impl Default for PsmConfig {
    fn default() -> Self {
        PsmConfig {
            num_classes: 3,
            pqe_widths: vec![16, 32, 32, 1],
            cte_widths: vec![16, 32, 32, 1],
            class_embed_dim: 8,
            fourier_dim: 8,
            fourier: FourierSchedule::default(),
            max_range: 75.0,
            tau_iou: 0.8,
        }
    }
}

impl PsmConfig {
    pub fn pqe_input_width(&self) -> usize {
        self.num_classes + 3
    }

    pub fn cte_input_width(&self) -> usize {
        self.class_embed_dim + self.fourier_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: format!("psm.{path}"),
            message,
        };
        if self.num_classes == 0 {
            return Err(bad("num_classes", "must be positive".into()));
        }
        if !(self.tau_iou > 0.0 && self.tau_iou < 1.0) {
            return Err(bad("tau_iou", format!("must lie in (0, 1), got {}", self.tau_iou)));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(bad("max_range", "must be positive".into()));
        }
        if self.fourier_dim == 0 || self.fourier_dim % 2 != 0 {
            return Err(bad("fourier_dim", "must be even and positive".into()));
        }
        if self.class_embed_dim == 0 {
            return Err(bad("class_embed_dim", "must be positive".into()));
        }
        for (name, w) in [("pqe_widths", &self.pqe_widths), ("cte_widths", &self.cte_widths)] {
            if w.is_empty() || w.contains(&0) || *w.last().unwrap() != 1 {
                return Err(bad(name, format!("must be positive and end in 1, got {w:?}")));
            }
        }
        Ok(())
    }
}

/// Trainable parameters of the quality and threshold estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmModel {
    pub config: PsmConfig,
    pub pqe: Mlp,
    pub cte: Mlp,
    pub class_embed: EmbeddingTable,
}

/// Gradients for every PSM parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct PsmGrads {
    pub pqe: Vec<f64>,
    pub cte: Vec<f64>,
    pub class_embed: Vec<f64>,
}

impl PsmGrads {
    pub fn zeros(m: &PsmModel) -> Self {
        PsmGrads {
            pqe: vec![0.0; m.pqe.num_params()],
            cte: vec![0.0; m.cte.num_params()],
            class_embed: vec![0.0; m.class_embed.params().len()],
        }
    }

    pub fn add(&mut self, other: &PsmGrads) {
        for (a, b) in [
            (&mut self.pqe, &other.pqe),
            (&mut self.cte, &other.cte),
            (&mut self.class_embed, &other.class_embed),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pqe
            .iter()
            .chain(&self.cte)
            .chain(&self.class_embed)
            .all(|v| v.is_finite())
    }
}

/// Eq.-(4)-style threshold error: squared gap between threshold and score
/// when the thresholded decision disagrees with `gt_iou >= tau_iou`.
/// A score equal to the threshold counts as rejected.
pub fn threshold_error(tau: f64, s: f64, gt_iou: f64, tau_iou: f64) -> f64 {
    if threshold_error_active(tau, s, gt_iou, tau_iou) {
        (tau - s) * (tau - s)
    } else {
        0.0
    }
}

fn threshold_error_active(tau: f64, s: f64, gt_iou: f64, tau_iou: f64) -> bool {
    let correct = gt_iou >= tau_iou;
    (correct && s <= tau) || (!correct && s > tau)
}

/// Selection rule: strictly greater.
pub fn accept(quality: f64, threshold: f64) -> bool {
    quality > threshold
}

impl PsmModel {
    pub fn new<R: Rng + ?Sized>(config: PsmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pqe = Mlp::new(
            config.pqe_input_width(),
            &config.pqe_widths,
            OutputActivation::Sigmoid,
            rng,
        )?;
        let cte = Mlp::new(
            config.cte_input_width(),
            &config.cte_widths,
            OutputActivation::Sigmoid,
            rng,
        )?;
        let class_embed = EmbeddingTable::new(config.num_classes, config.class_embed_dim, rng);
        Ok(PsmModel {
            config,
            pqe,
            cte,
            class_embed,
        })
    }

    /// All-zero parameters: every output is exactly 0.5.
    pub fn zeros(config: PsmConfig) -> Result<Self> {
        config.validate()?;
        Ok(PsmModel {
            pqe: Mlp::zeros(config.pqe_input_width(), &config.pqe_widths, OutputActivation::Sigmoid)?,
            cte: Mlp::zeros(config.cte_input_width(), &config.cte_widths, OutputActivation::Sigmoid)?,
            class_embed: EmbeddingTable::zeros(config.num_classes, config.class_embed_dim),
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        self.pqe.num_params() + self.cte.num_params() + self.class_embed.params().len()
    }

    pub fn is_finite(&self) -> bool {
        self.pqe.is_finite() && self.cte.is_finite() && self.class_embed.params().iter().all(|p| p.is_finite())
    }

    fn check_scores(&self, s: &ScoreFeature) -> Result<()> {
        if s.cls_logits.len() != self.config.num_classes {
            return Err(Error::WidthMismatch {
                expected: self.config.num_classes,
                got: s.cls_logits.len(),
            });
        }
        Ok(())
    }

    pub fn pqe_score(&self, s: &ScoreFeature) -> Result<f64> {
        self.check_scores(s)?;
        self.pqe.predict_scalar(&s.to_input())
    }

    /// CTE input: `concat(class_embed[c], fourier(distance / max_range))`.
    pub fn cte_input(&self, c: &ContextFeature) -> Result<Vec<f64>> {
        if !c.distance.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite distance {}", c.distance)));
        }
        let mut x = self.class_embed.lookup(c.class_id)?.to_vec();
        x.extend(fourier_embed_with(
            c.distance / self.config.max_range,
            self.config.fourier_dim,
            self.config.fourier,
        )?);
        Ok(x)
    }

    pub fn cte_threshold(&self, c: &ContextFeature) -> Result<f64> {
        self.cte.predict_scalar(&self.cte_input(c)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: PsmModel = checkpoint::load(path, CHECKPOINT_KIND)?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Mean squared error between PQE output and GT-IoU. Gradients touch only
/// the PQE network.
pub fn l_pqe(m: &PsmModel, batch: &[LabeledCandidate]) -> Result<(f64, PsmGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grads = PsmGrads::zeros(m);
    let mut loss = 0.0;
    for item in batch {
        m.check_scores(&item.scores)?;
        let (q, cache) = m.pqe.forward_scalar(&item.scores.to_input())?;
        let r = q - item.gt_iou;
        loss += r * r;
        m.pqe.backward_into(&cache, &[2.0 * r / n], &mut grads.pqe)?;
    }
    Ok((loss / n, grads))
}

/// Mean threshold error of the CTE against the stop-gradient PQE score.
/// Gradients reach the CTE network and the class embedding only.
pub fn l_cte(m: &PsmModel, batch: &[LabeledCandidate]) -> Result<(f64, PsmGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let tau_iou = m.config.tau_iou;
    let embed_dim = m.config.class_embed_dim;
    let mut grads = PsmGrads::zeros(m);
    let mut loss = 0.0;
    for item in batch {
        // Detached: no cache is kept, so nothing can flow back into the PQE.
        let s = m.pqe_score(&item.scores)?;
        let x = m.cte_input(&item.context)?;
        let (tau, cache) = m.cte.forward_scalar(&x)?;
        if !threshold_error_active(tau, s, item.gt_iou, tau_iou) {
            continue;
        }
        loss += (tau - s) * (tau - s);
        let upstream = 2.0 * (tau - s) / n;
        let d_input = m.cte.backward_into(&cache, &[upstream], &mut grads.cte)?;
        m.class_embed.accumulate_grad(
            item.context.class_id,
            &d_input[..embed_dim],
            &mut grads.class_embed,
        )?;
    }
    Ok((loss / n, grads))
}

/// Single Adam optimizer over every PSM parameter, plus a count of steps
/// skipped for non-finite losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmOptimizer {
    pub adam: AdamState,
    pub skipped_steps: u64,
}

impl PsmOptimizer {
    pub fn new(m: &PsmModel, config: AdamConfig) -> Self {
        PsmOptimizer {
            adam: AdamState::new(m.num_params(), config),
            skipped_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_pqe: f64,
    pub l_cte: f64,
    pub applied: bool,
}

/// Gradient of `L_PQE + L_CTE` with respect to every PSM parameter.
pub fn psm_gradients(m: &PsmModel, batch: &[LabeledCandidate]) -> Result<(f64, f64, PsmGrads)> {
    let (lp, mut grads) = l_pqe(m, batch)?;
    let (lc, gc) = l_cte(m, batch)?;
    grads.add(&gc);
    Ok((lp, lc, grads))
}

/// One Adam step on `L_PSM = L_PQE + L_CTE`.
pub fn psm_train_step(
    m: &mut PsmModel,
    batch: &[LabeledCandidate],
    opt: &mut PsmOptimizer,
) -> Result<StepLosses> {
    let (lp, lc, grads) = psm_gradients(m, batch)?;
    if !(lp + lc).is_finite() {
        opt.skipped_steps += 1;
        log::warn!("non-finite PSM loss ({lp}, {lc}); step skipped");
        return Ok(StepLosses {
            l_pqe: lp,
            l_cte: lc,
            applied: false,
        });
    }
    let PsmModel {
        pqe,
        cte,
        class_embed,
        ..
    } = m;
    opt.adam.step_groups(&mut [
        (pqe.params_mut(), &grads.pqe),
        (cte.params_mut(), &grads.cte),
        (class_embed.params_mut(), &grads.class_embed),
    ])?;
    Ok(StepLosses {
        l_pqe: lp,
        l_cte: lc,
        applied: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub l_pqe: f64,
    pub l_cte: f64,
    pub steps: usize,
}

/// One shuffled pass over `data` in minibatches of `batch_size`.
pub fn train_epoch<R: Rng + ?Sized>(
    m: &mut PsmModel,
    opt: &mut PsmOptimizer,
    data: &[LabeledCandidate],
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochLosses> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut out = EpochLosses::default();
    let mut batch = Vec::with_capacity(batch_size);
    for chunk in order.chunks(batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| data[i].clone()));
        let s = psm_train_step(m, &batch, opt)?;
        if s.applied {
            out.l_pqe += s.l_pqe;
            out.l_cte += s.l_cte;
            out.steps += 1;
        }
    }
    if out.steps > 0 {
        out.l_pqe /= out.steps as f64;
        out.l_cte /= out.steps as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub scores: ScoreFeature,
    pub context: ContextFeature,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class_id: usize,
    /// Joint confidence `s_obj * max(p_cls)`.
    pub weight: f64,
    pub quality: f64,
    pub threshold: f64,
    /// Index of the originating candidate.
    pub source: usize,
}

/// Per-candidate decision without NMS: `(quality, threshold, kept)`.
pub fn decide(m: &PsmModel, scores: &ScoreFeature, context: &ContextFeature) -> Result<(f64, f64, bool)> {
    let q = m.pqe_score(scores)?;
    let t = m.cte_threshold(context)?;
    Ok((q, t, accept(q, t)))
}

/// BEV NMS ranked by PQE quality, then keep survivors with quality strictly
/// above their context threshold.
pub fn select(
    m: &PsmModel,
    candidates: &[SelectionCandidate],
    nms_iou_threshold: f64,
) -> Result<Vec<PseudoLabel>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let qualities = candidates
        .iter()
        .map(|c| m.pqe_score(&c.scores))
        .collect::<Result<Vec<_>>>()?;
    let ranked: Vec<(Box7, f64)> = candidates
        .iter()
        .zip(&qualities)
        .map(|(c, &q)| (c.bbox, q))
        .collect();
    let mut out = Vec::new();
    for i in nms_bev(&ranked, nms_iou_threshold) {
        let c = &candidates[i];
        let t = m.cte_threshold(&c.context)?;
        if accept(qualities[i], t) {
            out.push(PseudoLabel {
                bbox: c.bbox,
                class_id: c.scores.predicted_class(),
                weight: c.scores.joint_confidence(),
                quality: qualities[i],
                threshold: t,
                source: i,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::tinynn::gradcheck::{central_difference, max_relative_error};
    use crate::tinynn::logit;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn random_candidate<R: Rng>(rng: &mut R) -> LabeledCandidate {
        LabeledCandidate {
            scores: ScoreFeature {
                obj_logit: rng.random_range(-4.0..4.0),
                aug_obj_logit: rng.random_range(-4.0..4.0),
                cls_logits: (0..3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                iou_consistency: rng.random_range(0.0..1.0),
            },
            context: ContextFeature {
                class_id: rng.random_range(0..3),
                distance: rng.random_range(0.0..75.0),
            },
            bbox: Box7::new(10.0, 0.0, 0.8, 3.9, 1.6, 1.6, 0.0).unwrap(),
            gt_iou: rng.random_range(0.0..1.0),
        }
    }

    fn random_batch(seed: u64, n: usize) -> Vec<LabeledCandidate> {
        let mut rng = derive_rng(seed, &[]);
        (0..n).map(|_| random_candidate(&mut rng)).collect()
    }

    fn random_model(seed: u64) -> PsmModel {
        PsmModel::new(PsmConfig::default(), &mut derive_rng(seed, &[99])).unwrap()
    }

    #[test]
    fn zero_model_outputs_half_everywhere() {
        let m = PsmModel::zeros(PsmConfig::default()).unwrap();
        for c in random_batch(1, 20) {
            assert_eq!(m.pqe_score(&c.scores).unwrap(), 0.5);
            assert_eq!(m.cte_threshold(&c.context).unwrap(), 0.5);
        }
        let at_range = ContextFeature {
            class_id: 0,
            distance: 75.0,
        };
        assert!(random_model(3).cte_threshold(&at_range).unwrap().is_finite());
    }

    #[test]
    fn unknown_class_and_width_mismatch_rejected() {
        let m = random_model(1);
        let ctx = ContextFeature {
            class_id: 3,
            distance: 1.0,
        };
        assert!(matches!(m.cte_threshold(&ctx), Err(Error::UnknownClass { .. })));
        let mut s = random_batch(2, 1).remove(0).scores;
        s.cls_logits.push(0.0);
        assert!(matches!(m.pqe_score(&s), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn threshold_error_branches() {
        assert!((threshold_error(0.7, 0.6, 0.9, 0.8) - 0.01).abs() < 1e-15);
        assert!((threshold_error(0.7, 0.9, 0.5, 0.8) - 0.04).abs() < 1e-15);
        assert_eq!(threshold_error(0.7, 0.9, 0.9, 0.8), 0.0);
        assert_eq!(threshold_error(0.7, 0.6, 0.5, 0.8), 0.0);
        // Boundary: s == tau is a rejection, so a correct label there is a FN
        // with zero magnitude.
        assert_eq!(threshold_error(0.7, 0.7, 0.9, 0.8), 0.0);
    }

    proptest! {
        #[test]
        fn threshold_error_zero_iff_decision_agrees(
            tau in 0.0f64..=1.0, s in 0.0f64..=1.0, g in 0.0f64..=1.0, t in 0.0f64..=1.0,
        ) {
            let e = threshold_error(tau, s, g, t);
            prop_assert!(e >= 0.0);
            let agree = accept(s, tau) == (g >= t);
            prop_assert_eq!(e == 0.0, agree || s == tau);
        }

        #[test]
        fn raising_quality_never_unselects(q in 0.0f64..1.0, dq in 0.0f64..1.0, t in 0.0f64..1.0) {
            if accept(q, t) {
                prop_assert!(accept(q + dq, t));
            }
        }
    }

    #[test]
    fn pqe_loss_single_item() {
        let m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let mut c = random_batch(5, 1);
        c[0].gt_iou = 0.9;
        let (loss, _) = l_pqe(&m, &c).unwrap();
        assert!((loss - 0.16).abs() < 1e-15);
        c[0].gt_iou = 0.5;
        assert_eq!(l_pqe(&m, &c).unwrap().0, 0.0);
        assert!(matches!(l_pqe(&m, &[]), Err(Error::EmptyBatch)));
        assert!(matches!(l_cte(&m, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn pqe_gradients_touch_only_pqe() {
        let m = random_model(4);
        let (_, g) = l_pqe(&m, &random_batch(4, 16)).unwrap();
        assert!(g.cte.iter().all(|v| *v == 0.0));
        assert!(g.class_embed.iter().all(|v| *v == 0.0));
        assert!(g.pqe.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn agreeing_batch_has_zero_cte_loss() {
        // Zero model: q = t = 0.5, so every candidate is rejected; with all
        // targets below tau_iou every decision agrees.
        let m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let mut batch = random_batch(6, 32);
        for c in &mut batch {
            c.gt_iou = 0.3;
        }
        let (loss, g) = l_cte(&m, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.cte.iter().chain(&g.class_embed).chain(&g.pqe).all(|v| *v == 0.0));
    }

    #[test]
    fn cte_loss_never_reaches_pqe() {
        for seed in 0..20 {
            let (_, g) = l_cte(&random_model(seed), &random_batch(seed + 100, 16)).unwrap();
            assert!(g.pqe.iter().all(|v| *v == 0.0));
        }
    }

    fn kink_margin(m: &PsmModel, batch: &[LabeledCandidate]) -> f64 {
        batch
            .iter()
            .map(|c| {
                let q = m.pqe.forward(&c.scores.to_input()).unwrap();
                let t = m.cte.forward(&m.cte_input(&c.context).unwrap()).unwrap();
                let branch = (t.output()[0] - q.output()[0]).abs();
                q.min_hidden_margin().min(t.min_hidden_margin()).min(branch)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn flat(m: &PsmModel) -> Vec<f64> {
        [m.pqe.params(), m.cte.params(), m.class_embed.params()].concat()
    }

    fn with_flat(m: &PsmModel, p: &[f64]) -> PsmModel {
        let mut out = m.clone();
        let (a, rest) = p.split_at(m.pqe.num_params());
        let (b, c) = rest.split_at(m.cte.num_params());
        out.pqe.params_mut().copy_from_slice(a);
        out.cte.params_mut().copy_from_slice(b);
        out.class_embed.params_mut().copy_from_slice(c);
        out
    }

    #[test]
    fn pqe_and_cte_gradients_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..20 {
            let m = random_model(seed);
            let batch = random_batch(seed + 7, 8);
            if kink_margin(&m, &batch) < 1e-3 {
                continue;
            }
            checked += 1;
            let (_, gp) = l_pqe(&m, &batch).unwrap();
            let (_, gc) = l_cte(&m, &batch).unwrap();
            let mut analytic = gp.clone();
            analytic.add(&gc);
            let a = [analytic.pqe, analytic.cte, analytic.class_embed].concat();
            let numeric = central_difference(
                |p| {
                    let probe = with_flat(&m, p);
                    // The CTE target is the detached PQE score of the base model.
                    let lp = l_pqe(&probe, &batch).unwrap().0;
                    let mut frozen = probe.clone();
                    frozen.pqe = m.pqe.clone();
                    lp + l_cte(&frozen, &batch).unwrap().0
                },
                &flat(&m),
                1e-5,
            );
            let err = max_relative_error(&a, &numeric);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        assert!(checked >= 5);
    }

    #[test]
    fn overfits_a_toy_batch() {
        let mut m = random_model(8);
        let batch = random_batch(9, 16);
        let mut opt = PsmOptimizer::new(&m, AdamConfig::default());
        let mut last = f64::INFINITY;
        let mut history = Vec::new();
        for _ in 0..2000 {
            last = psm_train_step(&mut m, &batch, &mut opt).unwrap().l_pqe;
            history.push(last);
        }
        assert!(last < 1e-3, "l_pqe {last}");
        // Smoothed over 50 steps, the curve trends down.
        let means: Vec<f64> = history.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
        assert!(means.windows(2).filter(|w| w[1] > w[0]).count() <= means.len() / 10);
        assert!(means.last().unwrap() < &(means[0] * 0.1));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = random_model(10);
            let mut opt = PsmOptimizer::new(&m, AdamConfig::default());
            let data = random_batch(11, 100);
            train_epoch(&mut m, &mut opt, &data, 16, &mut derive_rng(12, &[])).unwrap();
            flat(&m).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_skips_step() {
        let mut m = random_model(13);
        let mut batch = random_batch(14, 4);
        batch[0].gt_iou = f64::NAN;
        let before = m.clone();
        let mut opt = PsmOptimizer::new(&m, AdamConfig::default());
        let s = psm_train_step(&mut m, &batch, &mut opt).unwrap();
        assert!(!s.applied);
        assert_eq!(opt.skipped_steps, 1);
        assert_eq!(flat(&m), flat(&before));
    }

    fn sel_candidate(obj: f64, cls: [f64; 3], cx: f64) -> SelectionCandidate {
        SelectionCandidate {
            scores: ScoreFeature {
                obj_logit: obj,
                aug_obj_logit: obj,
                cls_logits: cls.to_vec(),
                iou_consistency: 0.9,
            },
            context: ContextFeature {
                class_id: 0,
                distance: cx,
            },
            bbox: Box7::new(cx, 0.0, 0.8, 3.9, 1.6, 1.6, 0.0).unwrap(),
        }
    }

    #[test]
    fn equal_quality_and_threshold_is_rejected() {
        let m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let c = sel_candidate(1.0, [1.0, 0.0, 0.0], 10.0);
        assert!(select(&m, &[c], 0.1).unwrap().is_empty());
        assert!(select(&m, &[], 0.1).unwrap().is_empty());
    }

    #[test]
    fn kept_label_carries_joint_confidence() {
        let mut m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let n = m.pqe.num_params();
        m.pqe.params_mut()[n - 1] = 2.0;
        let c = sel_candidate(logit(0.8), [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()], 10.0);
        let out = select(&m, &[c], 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].weight - 0.56).abs() < 1e-12);
        assert_eq!(out[0].class_id, 0);
    }

    #[test]
    fn nms_runs_before_thresholding() {
        let mut m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let n = m.pqe.num_params();
        m.pqe.params_mut()[n - 1] = 2.0;
        let a = sel_candidate(2.0, [1.0, 0.0, 0.0], 10.0);
        let b = sel_candidate(1.0, [1.0, 0.0, 0.0], 10.3);
        let far = sel_candidate(1.0, [1.0, 0.0, 0.0], 30.0);
        let out = select(&m, &[a, b, far], 0.1).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psm.json");
        let m = random_model(15);
        m.save(&path).unwrap();
        assert_eq!(PsmModel::load(&path).unwrap(), m);
    }
}
