//! Pseudo-label precision/recall, score correlations, threshold curves and
//! distance-binned score statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{iou, nms_bev, Box7, IouMode};
use crate::psm::{self, ContextFeature, LabeledCandidate, PseudoLabel, PsmModel};
use crate::simworld::{labeled_batch, GtObject, SceneRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Per-class IoU a pseudo-label needs to count as a true positive.
    pub thresholds: Vec<f64>,
    pub iou_mode: IouMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            thresholds: vec![0.7, 0.5, 0.5],
            iou_mode: IouMode::ThreeD,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.thresholds.len() != num_classes {
            return Err(Error::Config {
                path: "matching.thresholds".into(),
                message: format!("expected {num_classes} entries, got {}", self.thresholds.len()),
            });
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if !(*t > 0.0 && *t < 1.0) {
                return Err(Error::Config {
                    path: format!("matching.thresholds[{i}]"),
                    message: format!("must lie in (0, 1), got {t}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl From<Counts> for PrStats {
    fn from(c: Counts) -> Self {
        PrStats {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    pub overall: PrStats,
    pub per_class: Vec<PrStats>,
}

impl PrReport {
    pub fn from_counts(per_class: &[Counts]) -> Self {
        let mut total = Counts::default();
        for c in per_class {
            total.add(c);
        }
        PrReport {
            overall: total.into(),
            per_class: per_class.iter().map(|&c| c.into()).collect(),
        }
    }
}

/// Greedy one-to-one matching in descending weight: each pseudo-label takes
/// the unconsumed same-class object of highest IoU if that IoU reaches the
/// class threshold. Returns per-class counts.
pub fn match_counts(pseudo: &[PseudoLabel], gt: &[GtObject], cfg: &MatchConfig) -> Vec<Counts> {
    let nc = cfg.thresholds.len();
    let mut counts = vec![Counts::default(); nc];
    let mut order: Vec<usize> = (0..pseudo.len()).collect();
    order.sort_by(|&a, &b| pseudo[b].weight.total_cmp(&pseudo[a].weight).then(a.cmp(&b)));
    let mut used = vec![false; gt.len()];
    for i in order {
        let p = &pseudo[i];
        let Some(&thr) = cfg.thresholds.get(p.class_id) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox, cfg.iou_mode);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                counts[p.class_id].tp += 1;
            }
            None => counts[p.class_id].fp += 1,
        }
    }
    for (j, g) in gt.iter().enumerate() {
        if !used[j] && g.class_id < nc {
            counts[g.class_id].fn_ += 1;
        }
    }
    counts
}

pub fn match_pr(pseudo: &[PseudoLabel], gt: &[GtObject], cfg: &MatchConfig) -> PrReport {
    PrReport::from_counts(&match_counts(pseudo, gt, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// `None` when fewer than two points, lengths differ, or either side has
/// zero variance.
pub fn correlation(xs: &[f64], ys: &[f64], kind: CorrelationKind) -> Option<f64> {
    match kind {
        CorrelationKind::Pearson => pearson(xs, ys),
        CorrelationKind::Spearman => pearson(&average_ranks(xs), &average_ranks(ys)),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n || xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson or Spearman correlation of each score with GT-IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCorrelations {
    pub count: usize,
    pub pqe: Option<f64>,
    pub objectness: Option<f64>,
    pub class_prob: Option<f64>,
    pub consistency: Option<f64>,
}

impl ScoreCorrelations {
    /// `(name, value)` pairs in descending order of correlation; absent
    /// values sort last.
    pub fn ranked(&self) -> Vec<(&'static str, Option<f64>)> {
        let mut v = vec![
            ("pqe", self.pqe),
            ("objectness", self.objectness),
            ("class_prob", self.class_prob),
            ("consistency", self.consistency),
        ];
        v.sort_by(|a, b| {
            let key = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
            key(b.1).total_cmp(&key(a.1))
        });
        v
    }
}

pub fn score_correlations(m: &PsmModel, batch: &[LabeledCandidate], kind: CorrelationKind) -> Result<ScoreCorrelations> {
    let g: Vec<f64> = batch.iter().map(|c| c.gt_iou).collect();
    let q = batch.iter().map(|c| m.pqe_score(&c.scores)).collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&LabeledCandidate) -> f64| batch.iter().map(f).collect::<Vec<f64>>();
    Ok(ScoreCorrelations {
        count: batch.len(),
        pqe: correlation(&q, &g, kind),
        objectness: correlation(&col(|c| c.scores.objectness()), &g, kind),
        class_prob: correlation(&col(|c| c.scores.max_class_prob()), &g, kind),
        consistency: correlation(&col(|c| c.scores.iou_consistency), &g, kind),
    })
}

/// Correlations over all candidates and per context class.
pub fn score_correlations_by_class(
    m: &PsmModel,
    batch: &[LabeledCandidate],
    num_classes: usize,
    kind: CorrelationKind,
) -> Result<(ScoreCorrelations, Vec<ScoreCorrelations>)> {
    let all = score_correlations(m, batch, kind)?;
    let per = (0..num_classes)
        .map(|k| {
            let sub: Vec<LabeledCandidate> = batch.iter().filter(|c| c.context.class_id == k).cloned().collect();
            score_correlations(m, &sub, kind)
        })
        .collect::<Result<_>>()?;
    Ok((all, per))
}

/// PSM selection against the `gt_iou >= tau_iou` oracle, next to the best
/// single global threshold on the PQE score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    /// Candidates surviving PQE-ranked NMS; both rules decide on these.
    pub candidates: usize,
    pub positives: usize,
    pub psm: PrStats,
    pub global_threshold: f64,
    pub global: PrStats,
}

/// Both rules see the same NMS survivors (ranked by PQE score), so the
/// comparison isolates the per-context threshold from the score itself.
/// The global threshold is the best of `0.00, 0.01, …, 1.00` by F1, ties
/// to the lower threshold.
pub fn selection_vs_oracle(m: &PsmModel, records: &[SceneRecord], nms_iou: f64, mode: IouMode) -> Result<SelectionComparison> {
    let tau = m.config.tau_iou;
    // (quality, psm accepted, oracle)
    let mut rows: Vec<(f64, bool, bool)> = Vec::new();
    for rec in records {
        let batch = labeled_batch(std::slice::from_ref(rec), mode)?;
        let sel: Vec<_> = rec.candidates.iter().map(|c| c.selection_candidate()).collect();
        let q = batch.iter().map(|c| m.pqe_score(&c.scores)).collect::<Result<Vec<_>>>()?;
        let ranked: Vec<(Box7, f64)> = sel.iter().zip(&q).map(|(c, &qi)| (c.bbox, qi)).collect();
        let picked: Vec<usize> = psm::select(m, &sel, nms_iou)?.iter().map(|p| p.source).collect();
        for i in nms_bev(&ranked, nms_iou) {
            rows.push((q[i], picked.contains(&i), batch[i].gt_iou >= tau));
        }
    }
    let counts = |accept: &dyn Fn(&(f64, bool, bool)) -> bool| {
        let mut c = Counts::default();
        for r in &rows {
            match (accept(r), r.2) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    };
    let psm_counts = counts(&|r| r.1);
    let mut best = (0.0, counts(&|r| r.0 > 0.0));
    for k in 1..=100 {
        let t = k as f64 / 100.0;
        let c = counts(&|r| r.0 > t);
        if c.f1() > best.1.f1() {
            best = (t, c);
        }
    }
    Ok(SelectionComparison {
        candidates: rows.len(),
        positives: rows.iter().filter(|r| r.2).count(),
        psm: psm_counts.into(),
        global_threshold: best.0,
        global: best.1.into(),
    })
}

/// CTE threshold at every distance of `grid` for one class.
pub fn threshold_curve(m: &PsmModel, class_id: usize, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&d| Ok((d, m.cte_threshold(&ContextFeature { class_id, distance: d })?)))
        .collect()
}

/// Evenly spaced distances from 0 to `max_range` inclusive.
pub fn distance_grid(max_range: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| max_range * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn threshold_curve_csv(curves: &[(usize, Vec<(f64, f64)>)]) -> Table {
    let mut t = Table::new(&["class", "distance", "threshold"]);
    for (c, curve) in curves {
        for &(d, th) in curve {
            t.push(vec![c.to_string(), fmt_f64(d), fmt_f64(th)]);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinnedScore {
    pub class_id: usize,
    pub distance: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBin {
    pub lo: f64,
    /// `None` for the overflow bin.
    pub hi: Option<f64>,
    pub per_class: Vec<Moments>,
}

/// Per-class score moments in right-open distance bins `[e_i, e_{i+1})`,
/// plus an overflow bin `[e_last, ∞)`. Distances below the first edge join
/// the first bin, so counts always conserve.
pub fn context_bins(items: &[BinnedScore], edges: &[f64], num_classes: usize) -> Result<Vec<ContextBin>> {
    if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("bin edges must be nonempty and strictly increasing".into()));
    }
    let nb = edges.len();
    let mut acc = vec![vec![(0u64, 0.0f64, 0.0f64); num_classes]; nb];
    for it in items {
        if it.class_id >= num_classes {
            return Err(Error::UnknownClass {
                class_id: it.class_id,
                classes: num_classes,
            });
        }
        // Index of the last edge <= distance, clamped into range.
        let b = edges.partition_point(|e| *e <= it.distance).saturating_sub(1);
        let a = &mut acc[b][it.class_id];
        a.0 += 1;
        a.1 += it.score;
        a.2 += it.score * it.score;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(b, per)| ContextBin {
            lo: edges[b],
            hi: edges.get(b + 1).copied(),
            per_class: per
                .into_iter()
                .map(|(n, s, ss)| {
                    if n == 0 {
                        return Moments::default();
                    }
                    let mean = s / n as f64;
                    let var = (ss / n as f64 - mean * mean).max(0.0);
                    Moments {
                        count: n,
                        mean,
                        std: var.sqrt(),
                    }
                })
                .collect(),
        })
        .collect())
}

/// `%g`-style rendering with 9 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    } else {
        format!("{:.8e}", x)
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mant, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let mant = if mant.contains('.') {
        mant.trim_end_matches('0').trim_end_matches('.')
    } else {
        mant
    };
    format!("{mant}{exp}")
}

/// A small CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty CSV".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(str::to_string).collect();
            if r.len() != header.len() {
                return Err(Error::InvalidInput(format!(
                    "CSV row {} has {} fields, header has {}",
                    i + 2,
                    r.len(),
                    header.len()
                )));
            }
            rows.push(r);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::Box7;
    use crate::psm::PsmConfig;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn obj(x: f64, y: f64, class_id: usize) -> GtObject {
        GtObject {
            bbox: Box7::new(x, y, 0.8, 3.9, 1.6, 1.6, 0.0).unwrap(),
            class_id,
            visibility: 0.0,
            hardness: 0.0,
            offset: 0.0,
        }
    }

    fn label(b: Box7, class_id: usize, weight: f64) -> PseudoLabel {
        PseudoLabel {
            bbox: b,
            class_id,
            weight,
            quality: 0.9,
            threshold: 0.5,
            source: 0,
        }
    }

    #[test]
    fn exact_pseudo_set_is_perfect() {
        let gt = vec![obj(0.0, 0.0, 0), obj(10.0, 0.0, 1), obj(20.0, 0.0, 2)];
        let ps: Vec<_> = gt.iter().map(|g| label(g.bbox, g.class_id, 0.5)).collect();
        let r = match_pr(&ps, &gt, &MatchConfig::default());
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_pseudo_set_has_zero_scores() {
        let gt = vec![obj(0.0, 0.0, 0), obj(10.0, 0.0, 0)];
        let r = match_pr(&[], &gt, &MatchConfig::default());
        assert_eq!(r.overall.precision, 0.0);
        assert_eq!(r.overall.recall, 0.0);
        assert_eq!(r.overall.f1, 0.0);
        assert_eq!(r.overall.fn_, 2);
    }

    #[test]
    fn duplicates_count_once_and_wrong_class_is_false_positive() {
        let gt = vec![obj(0.0, 0.0, 0)];
        let ps = vec![
            label(gt[0].bbox, 0, 0.5),
            label(gt[0].bbox, 0, 0.9),
            label(gt[0].bbox, 1, 0.99),
        ];
        let c = match_counts(&ps, &gt, &MatchConfig::default());
        assert_eq!(c[0], Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(c[1], Counts { tp: 0, fp: 1, fn_: 0 });
    }

    /// Maximum bipartite matching over pairs at or above threshold.
    fn max_matching(pseudo: &[PseudoLabel], gt: &[GtObject], cfg: &MatchConfig) -> usize {
        let adj: Vec<Vec<usize>> = pseudo
            .iter()
            .map(|p| {
                (0..gt.len())
                    .filter(|&j| {
                        gt[j].class_id == p.class_id
                            && iou(&p.bbox, &gt[j].bbox, cfg.iou_mode) >= cfg.thresholds[p.class_id]
                    })
                    .collect()
            })
            .collect();
        fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
            for &j in &adj[i] {
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                if owner[j].is_none() || augment(owner[j].unwrap(), adj, seen, owner) {
                    owner[j] = Some(i);
                    return true;
                }
            }
            false
        }
        let mut owner = vec![None; gt.len()];
        (0..pseudo.len())
            .filter(|&i| augment(i, &adj, &mut vec![false; gt.len()], &mut owner))
            .count()
    }

    #[test]
    fn greedy_matches_optimal_assignment_on_unambiguous_instances() {
        let cfg = MatchConfig::default();
        let mut rng = derive_rng(31, &[]);
        for _ in 0..50 {
            let gt: Vec<GtObject> = (0..15)
                .map(|k| obj(12.0 * k as f64, rng.random_range(-1.0..1.0), rng.random_range(0..3)))
                .collect();
            let mut ps = Vec::new();
            for _ in 0..30 {
                let g = &gt[rng.random_range(0..gt.len())];
                let mut b = g.bbox;
                b.cx += rng.random_range(-1.5..1.5);
                b.cy += rng.random_range(-0.5..0.5);
                let class_id = if rng.random::<f64>() < 0.8 { g.class_id } else { rng.random_range(0..3) };
                ps.push(label(b, class_id, rng.random()));
            }
            let c = match_counts(&ps, &gt, &cfg);
            let tp: u64 = c.iter().map(|c| c.tp).sum();
            let fp: u64 = c.iter().map(|c| c.fp).sum();
            let fn_: u64 = c.iter().map(|c| c.fn_).sum();
            let opt = max_matching(&ps, &gt, &cfg) as u64;
            assert_eq!(tp, opt);
            assert_eq!(fp, ps.len() as u64 - opt);
            assert_eq!(fn_, gt.len() as u64 - opt);
        }
    }

    #[test]
    fn correlation_identities_and_absent_values() {
        let xs: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((correlation(&xs, &xs, CorrelationKind::Pearson).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(correlation(&xs, &neg, CorrelationKind::Spearman), Some(-1.0));
        assert_eq!(correlation(&[1.0], &[2.0], CorrelationKind::Pearson), None);
        assert_eq!(correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], CorrelationKind::Spearman), None);
    }

    #[test]
    fn correlation_matches_direct_formulas() {
        let mut rng = derive_rng(32, &[]);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5 + rng.random::<f64>()).collect();
        // Textbook single-pass Pearson.
        let n = xs.len() as f64;
        let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((correlation(&xs, &ys, CorrelationKind::Pearson).unwrap() - r).abs() < 1e-12);
        // Distinct values: Spearman via 1 - 6 Σd² / (n(n²-1)).
        let rank = |v: &[f64]| -> Vec<f64> {
            let mut r = vec![0.0; v.len()];
            for i in 0..v.len() {
                r[i] = 1.0 + v.iter().filter(|w| **w < v[i]).count() as f64;
            }
            r
        };
        let (rx, ry) = (rank(&xs), rank(&ys));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((correlation(&xs, &ys, CorrelationKind::Spearman).unwrap() - rho).abs() < 1e-12);
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn untrained_curve_is_flat_at_half() {
        let m = PsmModel::zeros(PsmConfig::default()).unwrap();
        let c = threshold_curve(&m, 1, &distance_grid(75.0, 16)).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.iter().all(|(_, t)| *t == 0.5));
        assert_eq!(threshold_curve(&m, 0, &[10.0]).unwrap().len(), 1);
        assert!(threshold_curve(&m, 0, &[]).unwrap().is_empty());
        let trained = PsmModel::new(PsmConfig::default(), &mut derive_rng(5, &[])).unwrap();
        for (_, t) in threshold_curve(&trained, 2, &distance_grid(75.0, 50)).unwrap() {
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn bins_conserve_counts_and_use_overflow() {
        let edges = [0.0, 25.0, 50.0, 75.0];
        let one = context_bins(
            &[BinnedScore {
                class_id: 1,
                distance: 30.0,
                score: 0.4,
            }],
            &edges,
            3,
        )
        .unwrap();
        let counts: Vec<u64> = one.iter().map(|b| b.per_class[1].count).collect();
        assert_eq!(counts, vec![0, 1, 0, 0]);
        assert_eq!(one[3].hi, None);

        let mut rng = derive_rng(33, &[]);
        let items: Vec<BinnedScore> = (0..500)
            .map(|_| BinnedScore {
                class_id: rng.random_range(0..3),
                distance: rng.random_range(0.0..90.0),
                score: rng.random(),
            })
            .collect();
        let bins = context_bins(&items, &edges, 3).unwrap();
        let total: u64 = bins.iter().flat_map(|b| b.per_class.iter()).map(|m| m.count).sum();
        assert_eq!(total, 500);
        // 25.0 lands in [25, 50), right-open.
        let b = context_bins(
            &[BinnedScore {
                class_id: 0,
                distance: 25.0,
                score: 1.0,
            }],
            &edges,
            3,
        )
        .unwrap();
        assert_eq!(b[1].per_class[0].count, 1);
    }

    #[test]
    fn floats_render_with_nine_significant_digits() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_f64(123456.789012), "123456.789");
        assert_eq!(fmt_f64(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_f64(1.5e-7), "1.5e-7");
        assert_eq!(fmt_f64(42.0), "42");
        assert_eq!(fmt_f64(1e12), "1e12");
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(0.25)]);
        assert_eq!(Table::parse(&t.to_csv()).unwrap(), t);
        assert!(Table::parse("a,b\n1\n").is_err());
    }
}
