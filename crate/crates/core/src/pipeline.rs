//! Run-directory commands: `gen`, `burnin`, `ssl`, `eval` and `report`.
//!
//! ```text
//! <run>/manifest.json            format, version, seed, scene counts, timestamp
//! <run>/config.json              fully resolved config
//! <run>/data/*.jsonl             labeled/heldout records, unlabeled/validation scenes
//! <run>/checkpoints/             psm_burnin, psm_epoch_####, state_epoch_####
//! <run>/burnin.json              burn-in loss curves
//! <run>/epochs.jsonl             one report per semi-supervised epoch
//! <run>/metrics.csv              one row per epoch and class, plus "all"
//! <run>/softgt.jsonl             the soft GT database, append-only
//! <run>/eval.json                held-out analysis of the latest PSM
//! <run>/report/                  SVG figures with sibling CSVs
//! ```
//!
//! Only the manifest carries a timestamp; every other file is a pure
//! function of the config.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    context_bins, distance_grid, fmt_f64, match_counts, score_correlations, score_correlations_by_class,
    selection_vs_oracle, threshold_curve, threshold_curve_csv, BinnedScore, CorrelationKind, Counts, PrReport,
    ScoreCorrelations, SelectionComparison, Table,
};
use crate::psm::{self, PsmModel};
use crate::report::{Chart, Figure, Series};
use crate::simworld::{
    generate_records, labeled_batch, read_jsonl, sample_scenes, write_jsonl, CandidateKind, Scene, SceneRecord,
};
use crate::ssl::{burn_in, validation_set, EpochReport, SoftGtDatabase, SoftGtEntry, SslRunner, SslState};
use crate::tinynn::checkpoint;

pub const RUN_FORMAT: &str = "psmsel-run";
pub const RUN_VERSION: u32 = 1;
const STATE_KIND: &str = "ssl-state";

pub const METRICS_HEADER: [&str; 17] = [
    "epoch",
    "class",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "fn",
    "l_pqe",
    "l_cte",
    "l_l",
    "l_u",
    "l_total",
    "learning_state",
    "refine_error",
    "pseudo_labels",
    "soft_gt_size",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub heldout: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub counts: SceneCounts,
    /// Seconds since the Unix epoch when the dataset was generated.
    pub created_unix: u64,
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn psm_burnin(&self) -> PathBuf {
        self.checkpoints().join("psm_burnin.json")
    }

    pub fn psm_epoch(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("psm_epoch_{epoch:04}.json"))
    }

    pub fn state_epoch(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("state_epoch_{epoch:04}.json"))
    }

    pub fn burnin_report(&self) -> PathBuf {
        self.root.join("burnin.json")
    }

    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn softgt(&self) -> PathBuf {
        self.root.join("softgt.jsonl")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Epochs with a saved state checkpoint, ascending.
    pub fn state_epochs(&self) -> Result<Vec<usize>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            let name = name.to_string_lossy();
            if let Some(k) = name
                .strip_prefix("state_epoch_")
                .and_then(|r| r.strip_suffix(".json"))
                .and_then(|k| k.parse().ok())
            {
                out.push(k);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// The most recent PSM checkpoint: the last epoch's, else burn-in's.
    pub fn latest_psm(&self) -> Result<Option<(usize, PathBuf)>> {
        for k in self.state_epochs()?.into_iter().rev() {
            let p = self.psm_epoch(k);
            if k > 0 && p.exists() {
                return Ok(Some((k, p)));
            }
        }
        let b = self.psm_burnin();
        Ok(b.exists().then_some((0, b)))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Consecutive scene-id ranges: labeled, unlabeled, heldout, validation.
pub fn scene_ranges(c: &SceneCounts) -> [(u64, usize); 4] {
    let l = 0u64;
    let u = l + c.labeled as u64;
    let h = u + c.unlabeled as u64;
    let v = h + c.heldout as u64;
    [(l, c.labeled), (u, c.unlabeled), (h, c.heldout), (v, c.validation)]
}

/// Generates the dataset and writes the manifest and resolved config.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run_dir);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let counts = SceneCounts {
        labeled: cfg.data.labeled,
        unlabeled: cfg.data.unlabeled,
        heldout: cfg.data.heldout,
        validation: cfg.data.validation,
    };
    let [(l0, nl), (u0, nu), (h0, nh), (v0, nv)] = scene_ranges(&counts);
    let gen0 = cfg.generator.with_learning_state(cfg.ssl.initial_learning_state);
    let seed = cfg.seed;

    let labeled = generate_records(&gen0, &sample_scenes(&cfg.generator, seed, l0, nl, true), seed, 0)?;
    write_jsonl(&paths.data("labeled"), &labeled)?;
    let heldout = generate_records(&gen0, &sample_scenes(&cfg.generator, seed, h0, nh, true), seed, 0)?;
    write_jsonl(&paths.data("heldout"), &heldout)?;
    write_jsonl(&paths.data("unlabeled"), &sample_scenes(&cfg.generator, seed, u0, nu, false))?;
    write_jsonl(&paths.data("validation"), &sample_scenes(&cfg.generator, seed, v0, nv, true))?;

    write_file(&paths.config(), &cfg.to_json_pretty()?)?;
    let manifest = Manifest {
        format: RUN_FORMAT.into(),
        version: RUN_VERSION,
        seed,
        counts,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_json(&paths.manifest(), &manifest)?;
    info!(
        "generated {} labeled, {} unlabeled, {} heldout, {} validation scenes in {}",
        nl,
        nu,
        nh,
        nv,
        paths.root.display()
    );
    Ok(manifest)
}

/// An existing run: its manifest and the config it was generated with.
pub struct Run {
    pub paths: RunPaths,
    pub manifest: Manifest,
    pub config: RunConfig,
}

impl Run {
    /// Opens a run directory, refusing unknown formats or versions. A
    /// config given on the command line must match the stored one.
    pub fn open(dir: &Path, expected: Option<&RunConfig>) -> Result<Run> {
        let paths = RunPaths::new(dir);
        let missing: Vec<PathBuf> = [paths.manifest(), paths.config()]
            .into_iter()
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        let manifest: Manifest = read_json(&paths.manifest())?;
        if manifest.format != RUN_FORMAT {
            return Err(Error::InvalidInput(format!(
                "{} is not a {RUN_FORMAT} manifest (format {:?})",
                paths.manifest().display(),
                manifest.format
            )));
        }
        if manifest.version != RUN_VERSION {
            return Err(Error::VersionMismatch {
                what: "run directory".into(),
                expected: RUN_VERSION,
                found: manifest.version,
            });
        }
        let config = RunConfig::load(&paths.config())?;
        if let Some(exp) = expected {
            let mut exp = exp.clone();
            exp.run_dir = config.run_dir.clone();
            if exp != config {
                return Err(Error::Config {
                    path: "<root>".into(),
                    message: format!("differs from the config stored in {}", paths.config().display()),
                });
            }
        }
        if manifest.seed != config.seed {
            return Err(Error::Invariant(format!(
                "manifest seed {} differs from config seed {}",
                manifest.seed, config.seed
            )));
        }
        Ok(Run {
            paths,
            manifest,
            config,
        })
    }

    fn require(&self, files: &[PathBuf]) -> Result<()> {
        let missing: Vec<PathBuf> = files.iter().filter(|p| !p.exists()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingInputs(missing))
        }
    }

    fn read_split<T: serde::de::DeserializeOwned>(&self, split: &str, expected: usize) -> Result<Vec<T>> {
        let p = self.paths.data(split);
        self.require(std::slice::from_ref(&p))?;
        let v: Vec<T> = read_jsonl(&p)?;
        if v.len() != expected {
            return Err(Error::Invariant(format!(
                "{} holds {} entries, manifest says {expected}",
                p.display(),
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn labeled(&self) -> Result<Vec<SceneRecord>> {
        self.read_split("labeled", self.manifest.counts.labeled)
    }

    pub fn heldout(&self) -> Result<Vec<SceneRecord>> {
        self.read_split("heldout", self.manifest.counts.heldout)
    }

    pub fn unlabeled(&self) -> Result<Vec<Scene>> {
        self.read_split("unlabeled", self.manifest.counts.unlabeled)
    }

    pub fn validation(&self) -> Result<Vec<Scene>> {
        self.read_split("validation", self.manifest.counts.validation)
    }

    fn initial_generator(&self) -> crate::simworld::GeneratorConfig {
        self.config.generator.with_learning_state(self.config.ssl.initial_learning_state)
    }

    /// Removes semi-supervised artifacts after `epoch` and truncates the
    /// append-only logs to match.
    fn truncate_after(&self, epoch: usize) -> Result<()> {
        for k in self.paths.state_epochs()? {
            if k > epoch {
                remove_if_exists(&self.paths.state_epoch(k))?;
                remove_if_exists(&self.paths.psm_epoch(k))?;
            }
        }
        let dir = self.paths.checkpoints();
        if dir.exists() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
                let k = name
                    .strip_prefix("psm_epoch_")
                    .and_then(|r| r.strip_suffix(".json"))
                    .and_then(|k| k.parse::<usize>().ok());
                if k.is_some_and(|k| k > epoch) {
                    remove_if_exists(&p)?;
                }
            }
        }
        let reports: Vec<EpochReport> = if self.paths.epochs().exists() {
            read_jsonl(&self.paths.epochs())?
        } else {
            Vec::new()
        };
        let reports: Vec<EpochReport> = reports.into_iter().filter(|r| r.epoch <= epoch).collect();
        write_jsonl(&self.paths.epochs(), &reports)?;
        write_file(&self.paths.metrics(), &metrics_table(&reports, &self.class_names()).to_csv())?;
        let entries: Vec<SoftGtEntry> = if self.paths.softgt().exists() {
            read_jsonl(&self.paths.softgt())?
        } else {
            Vec::new()
        };
        let entries: Vec<SoftGtEntry> = entries.into_iter().filter(|e| e.epoch <= epoch).collect();
        write_jsonl(&self.paths.softgt(), &entries)?;
        remove_if_exists(&self.paths.eval())
    }

    fn class_names(&self) -> Vec<String> {
        self.config.generator.classes.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurnInSummary {
    pub l_pqe: Vec<f64>,
    pub l_cte: Vec<f64>,
    pub student_loss: Vec<f64>,
    pub learning_state: f64,
}

/// Trains the PSM and proxy student on the labeled split. Any previous
/// semi-supervised artifacts are discarded.
pub fn cmd_burnin(run: &Run) -> Result<SslState> {
    let labeled = run.labeled()?;
    let validation = validation_set(&run.initial_generator(), &run.validation()?, run.config.seed);
    let settings = run.config.settings();
    let (state, rep) = burn_in(&settings, &labeled, &validation)?;
    run.truncate_after(0)?;
    state.psm.save(&run.paths.psm_burnin())?;
    checkpoint::save(&run.paths.state_epoch(0), STATE_KIND, &state)?;
    write_json(
        &run.paths.burnin_report(),
        &BurnInSummary {
            l_pqe: rep.l_pqe.clone(),
            l_cte: rep.l_cte.clone(),
            student_loss: rep.student_loss,
            learning_state: state.learning_state,
        },
    )?;
    info!(
        "burn-in: {} epochs, final l_pqe {} l_cte {}, learning state {}",
        rep.l_pqe.len(),
        rep.l_pqe.last().map_or("-".into(), |v| fmt_f64(*v)),
        rep.l_cte.last().map_or("-".into(), |v| fmt_f64(*v)),
        fmt_f64(state.learning_state)
    );
    Ok(state)
}

/// Runs semi-supervised epochs. Without `resume` the run restarts from the
/// burn-in state; with it, from the latest state checkpoint. `stop_after`
/// ends the command after that epoch even if more are configured.
pub fn cmd_ssl(run: &Run, resume: bool, stop_after: Option<usize>) -> Result<Vec<EpochReport>> {
    let start = if resume {
        *run.paths.state_epochs()?.last().ok_or_else(|| Error::MissingInputs(vec![run.paths.state_epoch(0)]))?
    } else {
        0
    };
    run.require(&[run.paths.state_epoch(start)])?;
    let state: SslState = checkpoint::load(&run.paths.state_epoch(start), STATE_KIND)?;
    if state.epoch != start {
        return Err(Error::Invariant(format!(
            "{} holds epoch {}",
            run.paths.state_epoch(start).display(),
            state.epoch
        )));
    }
    run.truncate_after(start)?;
    let nc = run.config.generator.num_classes();
    let db = SoftGtDatabase::from_entries(nc, read_jsonl(&run.paths.softgt())?)?;

    let labeled: Vec<Scene> = run.labeled()?.into_iter().map(|r| r.scene).collect();
    let unlabeled = run.unlabeled()?;
    let validation = validation_set(&run.initial_generator(), &run.validation()?, run.config.seed);
    let settings = run.config.settings();
    let mut runner = SslRunner::new(&settings, &labeled, &unlabeled, &validation, state, db)?;

    let last = stop_after.map_or(run.config.ssl.epochs, |s| s.min(run.config.ssl.epochs));
    let names = run.class_names();
    let mut reports = Vec::new();
    while runner.state.epoch < last {
        let db_before = runner.soft_gt.len();
        let (rep, inserted) = runner.run_epoch()?;
        if runner.soft_gt.len() < db_before {
            return Err(Error::Invariant("soft GT database shrank".into()));
        }
        let parts = rep.l_l + rep.l_u + (rep.l_pqe + rep.l_cte);
        if rep.l_total != parts {
            return Err(Error::Invariant(format!(
                "reported total loss {} differs from its parts {parts}",
                rep.l_total
            )));
        }
        // Logs first, state last: a state checkpoint implies complete logs.
        append_lines(
            &run.paths.softgt(),
            &inserted.iter().map(json_line).collect::<Result<Vec<_>>>()?,
        )?;
        append_lines(&run.paths.epochs(), &[json_line(&rep)?])?;
        let rows = metrics_table(std::slice::from_ref(&rep), &names).to_csv();
        append_lines(&run.paths.metrics(), &rows.lines().skip(1).map(str::to_string).collect::<Vec<_>>())?;
        runner.state.psm.save(&run.paths.psm_epoch(rep.epoch))?;
        checkpoint::save(&run.paths.state_epoch(rep.epoch), STATE_KIND, &runner.state)?;
        info!(
            "epoch {}: e {} precision {} recall {} f1 {} l_u {} refine {} pseudo {} db {}",
            rep.epoch,
            fmt_f64(rep.learning_state),
            fmt_f64(rep.pr.overall.precision),
            fmt_f64(rep.pr.overall.recall),
            fmt_f64(rep.pr.overall.f1),
            fmt_f64(rep.l_u),
            fmt_f64(rep.refine_error),
            rep.pseudo_labels,
            rep.soft_gt_size
        );
        reports.push(rep);
    }
    Ok(reports)
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::json("log line", e))
}

/// `metrics.csv` rows: one per class and an `all` row per epoch.
pub fn metrics_table(reports: &[EpochReport], class_names: &[String]) -> Table {
    let mut t = Table::new(&METRICS_HEADER);
    for r in reports {
        let mut row = |class: &str, s: &crate::evalkit::PrStats| {
            t.push(vec![
                r.epoch.to_string(),
                class.to_string(),
                fmt_f64(s.precision),
                fmt_f64(s.recall),
                fmt_f64(s.f1),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                fmt_f64(r.l_pqe),
                fmt_f64(r.l_cte),
                fmt_f64(r.l_l),
                fmt_f64(r.l_u),
                fmt_f64(r.l_total),
                fmt_f64(r.learning_state),
                fmt_f64(r.refine_error),
                r.pseudo_labels.to_string(),
                r.soft_gt_size.to_string(),
            ]);
        };
        for (k, s) in r.pr.per_class.iter().enumerate() {
            row(class_names.get(k).map_or("?", |s| s.as_str()), s);
        }
        row("all", &r.pr.overall);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Epoch of the evaluated PSM; 0 is the burn-in model.
    pub psm_epoch: usize,
    pub heldout_candidates: usize,
    pub pearson: ScoreCorrelations,
    pub pearson_per_class: Vec<ScoreCorrelations>,
    pub spearman: ScoreCorrelations,
    pub selection: SelectionComparison,
    /// Pseudo-labels selected on held-out scenes against their GT.
    pub heldout_pr: PrReport,
    pub epochs: usize,
    pub final_epoch: Option<EpochReport>,
}

/// Rebuilds `metrics.csv` from the epoch log and analyzes the latest PSM on
/// the held-out split.
pub fn cmd_eval(run: &Run) -> Result<EvalSummary> {
    let (psm_epoch, psm_path) = run
        .paths
        .latest_psm()?
        .ok_or_else(|| Error::MissingInputs(vec![run.paths.psm_burnin()]))?;
    let m = PsmModel::load(&psm_path)?;
    let reports: Vec<EpochReport> = if run.paths.epochs().exists() {
        read_jsonl(&run.paths.epochs())?
    } else {
        Vec::new()
    };
    write_file(&run.paths.metrics(), &metrics_table(&reports, &run.class_names()).to_csv())?;

    let heldout = run.heldout()?;
    let mode = run.config.generator.iou_mode;
    let nc = run.config.generator.num_classes();
    let batch = labeled_batch(&heldout, mode)?;
    let (pearson, pearson_per_class) = score_correlations_by_class(&m, &batch, nc, CorrelationKind::Pearson)?;
    let spearman = score_correlations(&m, &batch, CorrelationKind::Spearman)?;
    let selection = selection_vs_oracle(&m, &heldout, run.config.ssl.nms_iou, mode)?;
    let mut counts = vec![Counts::default(); nc];
    for rec in &heldout {
        let sel: Vec<_> = rec.candidates.iter().map(|c| c.selection_candidate()).collect();
        let picked = psm::select(&m, &sel, run.config.ssl.nms_iou)?;
        for (k, c) in match_counts(&picked, &rec.scene.objects, &run.config.matching).iter().enumerate() {
            counts[k].add(c);
        }
    }
    let summary = EvalSummary {
        psm_epoch,
        heldout_candidates: batch.len(),
        pearson,
        pearson_per_class,
        spearman,
        selection,
        heldout_pr: PrReport::from_counts(&counts),
        epochs: reports.len(),
        final_epoch: reports.last().cloned(),
    };
    write_json(&run.paths.eval(), &summary)?;
    info!(
        "eval of PSM epoch {psm_epoch}: selection f1 {} vs global {} at {}",
        fmt_f64(summary.selection.psm.f1),
        fmt_f64(summary.selection.global.f1),
        fmt_f64(summary.selection.global_threshold)
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub figures: Vec<String>,
    /// Inputs that were missing and the figures skipped because of them.
    pub gaps: Vec<String>,
}

/// Scatter points per figure are capped by taking every k-th candidate.
pub const SCATTER_CAP: usize = 4000;

/// Emits the report figures that the run's artifacts allow. Fails only if
/// none of the inputs exist.
pub fn cmd_report(dir: &Path) -> Result<ReportIndex> {
    let paths = RunPaths::new(dir);
    let psm_path = paths.latest_psm()?.map(|p| p.1);
    let inputs = [
        paths.manifest(),
        paths.config(),
        paths.data("heldout"),
        psm_path.clone().unwrap_or_else(|| paths.psm_burnin()),
        paths.metrics(),
    ];
    let missing: Vec<PathBuf> = inputs.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.len() == inputs.len() || !paths.config().exists() || !paths.manifest().exists() {
        return Err(Error::MissingInputs(missing));
    }
    let run = Run::open(dir, None)?;
    let out = paths.report();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut index = ReportIndex {
        figures: Vec::new(),
        gaps: Vec::new(),
    };
    let emit = |name: &str, fig: Figure, table: &Table, index: &mut ReportIndex| -> Result<()> {
        let csv = table.to_csv();
        write_file(&out.join(format!("{name}.csv")), &csv)?;
        write_file(&out.join(format!("{name}.svg")), &fig.to_svg(&csv))?;
        index.figures.push(name.to_string());
        Ok(())
    };
    let names = run.class_names();
    let nc = names.len();

    let model = match &psm_path {
        Some(p) => Some(PsmModel::load(p)?),
        None => {
            index.gaps.push(format!(
                "{}: no PSM checkpoint; skipped thresholds, score_vs_gt_iou_*, correlations",
                paths.psm_burnin().display()
            ));
            None
        }
    };
    let heldout = if paths.data("heldout").exists() {
        Some(run.heldout()?)
    } else {
        index.gaps.push(format!(
            "{}: missing; skipped score_vs_gt_iou_*, correlations, score_by_distance",
            paths.data("heldout").display()
        ));
        None
    };

    if let Some(m) = &model {
        let grid = distance_grid(run.config.generator.max_range, 76);
        let curves = (0..nc)
            .map(|k| Ok((k, threshold_curve(m, k, &grid)?)))
            .collect::<Result<Vec<_>>>()?;
        let table = threshold_curve_csv(&curves);
        let fig = Figure {
            title: "CTE threshold by class and distance".into(),
            x_label: "distance (m)".into(),
            y_label: "threshold".into(),
            chart: Chart::Lines(
                curves
                    .iter()
                    .map(|(k, c)| Series {
                        name: names[*k].clone(),
                        points: c.clone(),
                    })
                    .collect(),
            ),
        };
        emit("thresholds", fig, &table, &mut index)?;
    }

    if let Some(heldout) = &heldout {
        let mode = run.config.generator.iou_mode;
        let batch = labeled_batch(heldout, mode)?;
        let bins_in: Vec<BinnedScore> = heldout
            .iter()
            .flat_map(|r| r.candidates.iter().zip(std::iter::repeat(&r.scene)))
            .filter(|(c, _)| c.kind == CandidateKind::Detection)
            .filter_map(|(c, s)| {
                Some(BinnedScore {
                    class_id: s.objects[c.source_gt?].class_id,
                    distance: c.bbox.distance(),
                    score: crate::tinynn::sigmoid(c.obj_logit),
                })
            })
            .collect();
        let edges: Vec<f64> = (0..5).map(|i| i as f64 * run.config.generator.max_range / 5.0).collect();
        let bins = context_bins(&bins_in, &edges, nc)?;
        let mut table = Table::new(&["lo", "hi", "class", "count", "mean", "std"]);
        let mut series: Vec<Series> = names
            .iter()
            .map(|n| Series {
                name: n.clone(),
                points: Vec::new(),
            })
            .collect();
        for b in &bins {
            for (k, mo) in b.per_class.iter().enumerate() {
                table.push(vec![
                    fmt_f64(b.lo),
                    b.hi.map_or("inf".into(), fmt_f64),
                    names[k].clone(),
                    mo.count.to_string(),
                    fmt_f64(mo.mean),
                    fmt_f64(mo.std),
                ]);
                if mo.count > 0 {
                    series[k].points.push((b.lo, mo.mean));
                }
            }
        }
        let fig = Figure {
            title: "Objectness of true detections by distance".into(),
            x_label: "distance bin start (m)".into(),
            y_label: "mean objectness".into(),
            chart: Chart::Lines(series),
        };
        emit("score_by_distance", fig, &table, &mut index)?;

        if let Some(m) = &model {
            let q = batch.iter().map(|c| m.pqe_score(&c.scores)).collect::<Result<Vec<_>>>()?;
            let stride = batch.len().div_ceil(SCATTER_CAP).max(1);
            let scores: [(&str, Box<dyn Fn(usize) -> f64>); 4] = [
                ("pqe", Box::new(|i| q[i])),
                ("objectness", Box::new(|i| batch[i].scores.objectness())),
                ("class_prob", Box::new(|i| batch[i].scores.max_class_prob())),
                ("consistency", Box::new(|i| batch[i].scores.iou_consistency)),
            ];
            for (name, f) in &scores {
                let mut table = Table::new(&["gt_iou", "score"]);
                let mut pts = Vec::new();
                for i in (0..batch.len()).step_by(stride) {
                    let p = (batch[i].gt_iou, f(i));
                    table.push(vec![fmt_f64(p.0), fmt_f64(p.1)]);
                    pts.push(p);
                }
                let fig = Figure {
                    title: format!("{name} vs GT-IoU"),
                    x_label: "GT-IoU".into(),
                    y_label: name.to_string(),
                    chart: Chart::Scatter(vec![Series {
                        name: name.to_string(),
                        points: pts,
                    }]),
                };
                emit(&format!("score_vs_gt_iou_{name}"), fig, &table, &mut index)?;
            }
            let corr = score_correlations(m, &batch, CorrelationKind::Pearson)?;
            let mut table = Table::new(&["rank", "score", "pearson"]);
            let mut bars = Vec::new();
            for (i, (name, v)) in corr.ranked().into_iter().enumerate() {
                table.push(vec![(i + 1).to_string(), name.into(), v.map_or("".into(), fmt_f64)]);
                bars.push((name.to_string(), v.unwrap_or(0.0)));
            }
            let fig = Figure {
                title: "Correlation of each score with GT-IoU".into(),
                x_label: "score".into(),
                y_label: "Pearson r".into(),
                chart: Chart::Bars(bars),
            };
            emit("correlations", fig, &table, &mut index)?;
        }
    }

    if paths.metrics().exists() {
        let text = fs::read_to_string(paths.metrics()).map_err(|e| Error::io(paths.metrics(), e))?;
        let metrics = Table::parse(&text)?;
        let col = |n: &str| {
            metrics
                .column(n)
                .ok_or_else(|| Error::InvalidInput(format!("metrics.csv lacks column {n}")))
        };
        let (ce, cc, cp, cr, cf) = (col("epoch")?, col("class")?, col("precision")?, col("recall")?, col("f1")?);
        let mut table = Table::new(&["epoch", "class", "precision", "recall", "f1"]);
        let mut series: Vec<Series> = Vec::new();
        for r in &metrics.rows {
            table.push(vec![r[ce].clone(), r[cc].clone(), r[cp].clone(), r[cr].clone(), r[cf].clone()]);
            if r[cc] != "all" {
                continue;
            }
            let e: f64 = r[ce].parse().unwrap_or(f64::NAN);
            for (k, (label, c)) in [("precision", cp), ("recall", cr), ("f1", cf)].into_iter().enumerate() {
                if series.len() <= k {
                    series.push(Series {
                        name: label.into(),
                        points: Vec::new(),
                    });
                }
                series[k].points.push((e, r[c].parse().unwrap_or(f64::NAN)));
            }
        }
        if metrics.rows.is_empty() {
            index.gaps.push(format!("{}: no epochs recorded; pr_over_epochs is empty", paths.metrics().display()));
        }
        let fig = Figure {
            title: "Pseudo-label quality over epochs".into(),
            x_label: "epoch".into(),
            y_label: "all classes".into(),
            chart: Chart::Lines(series),
        };
        emit("pr_over_epochs", fig, &table, &mut index)?;
    } else {
        index.gaps.push(format!("{}: missing; skipped pr_over_epochs", paths.metrics().display()));
    }

    for g in &index.gaps {
        warn!("report gap: {g}");
    }
    write_json(&out.join("index.json"), &index)?;
    Ok(index)
}
