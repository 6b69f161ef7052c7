//! On-disk workspace: imported trajectories, annotator feedback, the
//! train/holdout split and one directory per run.
//!
//! ```text
//! <root>/trajectories.jsonl
//! <root>/feedback.jsonl          current feedback, one per (trajectory, annotator)
//! <root>/feedback_audit.jsonl    superseded submissions
//! <root>/split.json
//! <root>/runs/<run_id>/...
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_json, read_jsonl, read_jsonl_or_empty, write_json, write_jsonl};
use crate::judging::ScoreEntry;
use crate::ladder::LadderRun;
use crate::model::{validate_trajectory, Aspect, Feedback, MatchRecord, MetricSet, QualityReport, Rating, Split, Trajectory, Violation};
use crate::optimizer::OptimizeHistory;
use crate::text::short_digest;

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fraction: f64,
    pub train: Vec<String>,
    pub holdout: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<String> {
        match split {
            Split::Train => self.train.clone(),
            Split::Holdout => self.holdout.clone(),
            Split::All => {
                let mut all: Vec<String> = self.train.iter().chain(&self.holdout).cloned().collect();
                all.sort();
                all
            }
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|t| t == id) {
            Some(Split::Train)
        } else if self.holdout.iter().any(|t| t == id) {
            Some(Split::Holdout)
        } else {
            None
        }
    }
}

/// Holdout size: `fraction × total` rounded half up, kept within
/// `[1, total − 1]` so neither side is empty.
pub fn holdout_size(total: usize, fraction: f64) -> usize {
    let raw = (fraction * total as f64 + 0.5).floor() as usize;
    raw.clamp(1, total - 1)
}

/// Deterministic split of `ids`: sort, shuffle with a seeded ChaCha8 stream,
/// take the first `holdout_size` as holdout. Both halves come back sorted.
pub fn split_ids(ids: &[String], fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::Split(format!("need at least 2 trajectories, found {}", sorted.len())));
    }
    let k = holdout_size(sorted.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut holdout = sorted[..k].to_vec();
    let mut train = sorted[k..].to_vec();
    holdout.sort();
    train.sort();
    Ok(SplitAssignment {
        seed,
        fraction,
        train,
        holdout,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportSummary {
    pub count: usize,
    pub warnings: Vec<String>,
}

/// A superseded feedback record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub replaced_at: String,
    pub previous: Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotated: usize,
    pub total: usize,
}

/// Handle on a workspace directory. Writes are serialised through an
/// internal lock, so one handle may be shared between threads.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    writer: Mutex<()>,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Workspace {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.root.join("trajectories.jsonl")
    }

    pub fn feedback_path(&self) -> PathBuf {
        self.root.join("feedback.jsonl")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join("feedback_audit.jsonl")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Validate and add every trajectory in a JSONL file. Nothing is stored
    /// unless the whole file is valid; ids must be unique within the file and
    /// against trajectories already imported.
    pub fn import_trajectories(&self, path: &Path) -> Result<ImportSummary> {
        let incoming: Vec<(usize, Trajectory)> = read_jsonl(path)?;
        let mut warnings = Vec::new();
        if incoming.is_empty() {
            let w = format!("{} contains no trajectories", path.display());
            tracing::warn!("{w}");
            warnings.push(w);
            return Ok(ImportSummary { count: 0, warnings });
        }
        let _guard = self.lock();
        let mut existing = self.trajectories()?;
        let mut seen: HashMap<String, Option<usize>> = existing.iter().map(|t| (t.id.clone(), None)).collect();
        let mut violations = Vec::new();
        for (line, t) in &incoming {
            for v in validate_trajectory(t).violations {
                violations.push(Violation::new(format!("line {line}: {}", v.path), v.message));
            }
            match seen.get(&t.id) {
                Some(Some(first)) => violations.push(Violation::new(
                    format!("line {line}: id"),
                    format!("duplicate id {:?} (first seen on line {first})", t.id),
                )),
                Some(None) => violations.push(Violation::new(
                    format!("line {line}: id"),
                    format!("duplicate id {:?} (already in the workspace)", t.id),
                )),
                None => {
                    seen.insert(t.id.clone(), Some(*line));
                }
            }
        }
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let count = incoming.len();
        existing.extend(incoming.into_iter().map(|(_, t)| t));
        write_jsonl(&self.trajectories_path(), &existing)?;
        Ok(ImportSummary { count, warnings })
    }

    /// Store trajectories whose ids are not present yet, e.g. ladder samples
    /// awaiting annotation. Returns how many were added.
    pub fn add_missing_trajectories(&self, trajectories: &[Trajectory]) -> Result<usize> {
        let _guard = self.lock();
        let mut existing = self.trajectories()?;
        let mut known: HashSet<String> = existing.iter().map(|t| t.id.clone()).collect();
        let mut violations = Vec::new();
        let before = existing.len();
        for t in trajectories {
            violations.extend(validate_trajectory(t).violations.into_iter().map(|v| {
                Violation::new(format!("{}: {}", t.id, v.path), v.message)
            }));
            if known.insert(t.id.clone()) {
                existing.push(t.clone());
            }
        }
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let added = existing.len() - before;
        if added > 0 {
            write_jsonl(&self.trajectories_path(), &existing)?;
        }
        Ok(added)
    }

    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        read_jsonl_or_empty(&self.trajectories_path())
    }

    pub fn trajectory(&self, id: &str) -> Result<Trajectory> {
        self.trajectories()?
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::NotFound(format!("trajectory {id}")))
    }

    /// Split all imported trajectories and store the assignment.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<SplitAssignment> {
        let ids: Vec<String> = self.trajectories()?.into_iter().map(|t| t.id).collect();
        let split = split_ids(&ids, fraction, seed)?;
        let _guard = self.lock();
        write_json(&self.split_path(), &split)?;
        Ok(split)
    }

    pub fn load_split(&self) -> Result<Option<SplitAssignment>> {
        let p = self.split_path();
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    /// Trajectories in `split`, in stored order. Without a stored split every
    /// trajectory counts as training data.
    pub fn trajectories_in(&self, split: Split) -> Result<Vec<Trajectory>> {
        let all = self.trajectories()?;
        let Some(assignment) = self.load_split()? else {
            return Ok(match split {
                Split::Holdout => Vec::new(),
                _ => all,
            });
        };
        let keep: HashSet<String> = assignment.ids(split).into_iter().collect();
        Ok(all.into_iter().filter(|t| keep.contains(&t.id)).collect())
    }

    pub fn feedback(&self) -> Result<Vec<Feedback>> {
        read_jsonl_or_empty(&self.feedback_path())
    }

    pub fn audit_log(&self) -> Result<Vec<AuditEntry>> {
        read_jsonl_or_empty(&self.audit_path())
    }

    /// Store feedback for a trajectory. A second submission by the same
    /// annotator replaces the first; the replaced record goes to the audit log.
    pub fn submit_feedback(&self, trajectory_id: &str, annotator: &str, text: &str, created_at: &str) -> Result<Feedback> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("feedback text is empty".into()));
        }
        self.trajectory(trajectory_id)?;
        let record = Feedback {
            id: format!("fb-{}", short_digest(&[trajectory_id, annotator])),
            trajectory_id: trajectory_id.to_string(),
            annotator: annotator.to_string(),
            text: text.trim().to_string(),
            created_at: created_at.to_string(),
        };
        let _guard = self.lock();
        let mut all = self.feedback()?;
        match all
            .iter()
            .position(|f| f.trajectory_id == trajectory_id && f.annotator == annotator)
        {
            Some(i) => {
                let previous = std::mem::replace(&mut all[i], record.clone());
                append_jsonl(
                    &self.audit_path(),
                    &AuditEntry {
                        replaced_at: created_at.to_string(),
                        previous,
                    },
                )?;
                write_jsonl(&self.feedback_path(), &all)?;
            }
            None => append_jsonl(&self.feedback_path(), &record)?,
        }
        Ok(record)
    }

    /// One feedback per trajectory for an induction run: the submission of
    /// the alphabetically first annotator. Trajectories without feedback are
    /// skipped.
    pub fn annotated_pairs(&self, split: Split) -> Result<Vec<(Trajectory, Feedback)>> {
        let mut chosen: BTreeMap<String, Feedback> = BTreeMap::new();
        for f in self.feedback()? {
            match chosen.get(&f.trajectory_id) {
                Some(existing) if existing.annotator <= f.annotator => {}
                _ => {
                    chosen.insert(f.trajectory_id.clone(), f);
                }
            }
        }
        Ok(self
            .trajectories_in(split)?
            .into_iter()
            .filter_map(|t| chosen.remove(&t.id).map(|f| (t, f)))
            .collect())
    }

    pub fn progress(&self) -> Result<Progress> {
        let annotated: HashSet<String> = self.feedback()?.into_iter().map(|f| f.trajectory_id).collect();
        let trajectories = self.trajectories()?;
        Ok(Progress {
            annotated: trajectories.iter().filter(|t| annotated.contains(&t.id)).count(),
            total: trajectories.len(),
        })
    }

    pub fn run(&self, run_id: &str) -> Result<RunDir> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
            return Err(Error::InvalidArgument(format!("invalid run id {run_id:?}")));
        }
        Ok(RunDir {
            path: self.runs_dir().join(run_id),
        })
    }

    pub fn persist_run(&self, bundle: &RunBundle) -> Result<RunDir> {
        let dir = self.run(&bundle.manifest.run_id)?;
        let _guard = self.lock();
        dir.persist(bundle)?;
        Ok(dir)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunBundle> {
        self.run(run_id)?.load()
    }
}

/// `run.json`: what produced the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    /// The effective configuration, as it was loaded.
    pub config: serde_json::Value,
    /// Cassette file name inside the run directory, when one is used.
    pub cassette: Option<String>,
    /// Metric set chosen for reporting, if any.
    #[serde(default)]
    pub selected_metric_set: Option<String>,
}

/// Every artifact a run may hold.
#[derive(Debug, Clone, PartialEq)]
pub struct RunBundle {
    pub manifest: RunManifest,
    pub metric_sets: Vec<MetricSet>,
    pub aspects: Vec<Aspect>,
    pub ratings: Vec<Rating>,
    pub scores: Option<BTreeMap<String, ScoreEntry>>,
    pub matches: Vec<MatchRecord>,
    pub report: Option<QualityReport>,
    pub report_holdout: Option<QualityReport>,
    pub optimize_history: Option<OptimizeHistory>,
    pub ladder_run: Option<LadderRun>,
    pub ladder_report: Option<String>,
}

impl RunBundle {
    pub fn new(manifest: RunManifest) -> Self {
        RunBundle {
            manifest,
            metric_sets: Vec::new(),
            aspects: Vec::new(),
            ratings: Vec::new(),
            scores: None,
            matches: Vec::new(),
            report: None,
            report_holdout: None,
            optimize_history: None,
            ladder_run: None,
            ladder_report: None,
        }
    }
}

/// One run directory; each artifact can also be read and written on its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub path: PathBuf,
}

pub const RUN_MANIFEST: &str = "run.json";
pub const METRICSETS_DIR: &str = "metricsets";
pub const ASPECTS: &str = "aspects.jsonl";
pub const RATINGS: &str = "ratings.jsonl";
pub const SCORES: &str = "scores.json";
pub const MATCHES: &str = "matches.jsonl";
pub const REPORT: &str = "report.json";
pub const REPORT_HOLDOUT: &str = "report_holdout.json";
pub const OPTIMIZE_HISTORY: &str = "optimize_history.json";
pub const LADDER_RUN: &str = "ladder_run.json";
pub const LADDER_REPORT: &str = "ladder_report.csv";
pub const CASSETTE: &str = "cassette.jsonl";

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        Ok(Some(read_json(path)?))
    } else {
        Ok(None)
    }
}

impl RunDir {
    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn exists(&self) -> bool {
        self.file(RUN_MANIFEST).exists()
    }

    pub fn cassette_path(&self) -> PathBuf {
        self.file(CASSETTE)
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        write_json(&self.file(RUN_MANIFEST), m)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        if !self.exists() {
            return Err(Error::NotFound(format!("run {}", self.path.display())));
        }
        read_json(&self.file(RUN_MANIFEST))
    }

    pub fn write_metric_set(&self, ms: &MetricSet) -> Result<PathBuf> {
        let p = self.path.join(METRICSETS_DIR).join(format!("{}.json", ms.id));
        write_json(&p, ms)?;
        Ok(p)
    }

    pub fn metric_set(&self, id: &str) -> Result<MetricSet> {
        let p = self.path.join(METRICSETS_DIR).join(format!("{id}.json"));
        if !p.exists() {
            return Err(Error::NotFound(format!("metric set {id}")));
        }
        read_json(&p)
    }

    /// All stored metric sets, ordered by id.
    pub fn metric_sets(&self) -> Result<Vec<MetricSet>> {
        let dir = self.path.join(METRICSETS_DIR);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| read_json(p)).collect()
    }

    pub fn write_aspects(&self, aspects: &[Aspect]) -> Result<()> {
        write_jsonl(&self.file(ASPECTS), aspects)
    }

    pub fn aspects(&self) -> Result<Vec<Aspect>> {
        read_jsonl_or_empty(&self.file(ASPECTS))
    }

    pub fn write_ratings(&self, ratings: &[Rating]) -> Result<()> {
        write_jsonl(&self.file(RATINGS), ratings)
    }

    pub fn ratings(&self) -> Result<Vec<Rating>> {
        read_jsonl_or_empty(&self.file(RATINGS))
    }

    pub fn write_scores(&self, scores: &BTreeMap<String, ScoreEntry>) -> Result<()> {
        write_json(&self.file(SCORES), scores)
    }

    pub fn write_matches(&self, matches: &[MatchRecord]) -> Result<()> {
        write_jsonl(&self.file(MATCHES), matches)
    }

    pub fn matches(&self) -> Result<Vec<MatchRecord>> {
        read_jsonl_or_empty(&self.file(MATCHES))
    }

    pub fn write_report(&self, report: &QualityReport) -> Result<PathBuf> {
        let name = if report.split == Split::Holdout { REPORT_HOLDOUT } else { REPORT };
        write_json(&self.file(name), report)?;
        Ok(self.file(name))
    }

    pub fn report(&self, split: Split) -> Result<Option<QualityReport>> {
        optional(&self.file(if split == Split::Holdout { REPORT_HOLDOUT } else { REPORT }))
    }

    pub fn write_optimize_history(&self, h: &OptimizeHistory) -> Result<()> {
        write_json(&self.file(OPTIMIZE_HISTORY), h)
    }

    pub fn write_ladder(&self, run: &LadderRun, csv: &str) -> Result<()> {
        write_json(&self.file(LADDER_RUN), run)?;
        fs::create_dir_all(&self.path)?;
        fs::write(self.file(LADDER_REPORT), csv)?;
        Ok(())
    }

    pub fn persist(&self, b: &RunBundle) -> Result<()> {
        self.write_manifest(&b.manifest)?;
        for ms in &b.metric_sets {
            self.write_metric_set(ms)?;
        }
        if !b.aspects.is_empty() {
            self.write_aspects(&b.aspects)?;
        }
        if !b.ratings.is_empty() {
            self.write_ratings(&b.ratings)?;
        }
        if let Some(s) = &b.scores {
            self.write_scores(s)?;
        }
        if !b.matches.is_empty() {
            self.write_matches(&b.matches)?;
        }
        if let Some(r) = &b.report {
            write_json(&self.file(REPORT), r)?;
        }
        if let Some(r) = &b.report_holdout {
            write_json(&self.file(REPORT_HOLDOUT), r)?;
        }
        if let Some(h) = &b.optimize_history {
            self.write_optimize_history(h)?;
        }
        if let Some(l) = &b.ladder_run {
            write_json(&self.file(LADDER_RUN), l)?;
        }
        if let Some(csv) = &b.ladder_report {
            fs::write(self.file(LADDER_REPORT), csv)?;
        }
        Ok(())
    }

    pub fn load(&self) -> Result<RunBundle> {
        let manifest = self.manifest()?;
        let ladder_csv = self.file(LADDER_REPORT);
        Ok(RunBundle {
            manifest,
            metric_sets: self.metric_sets()?,
            aspects: self.aspects()?,
            ratings: self.ratings()?,
            scores: optional(&self.file(SCORES))?,
            matches: self.matches()?,
            report: optional(&self.file(REPORT))?,
            report_holdout: optional(&self.file(REPORT_HOLDOUT))?,
            optimize_history: optional(&self.file(OPTIMIZE_HISTORY))?,
            ladder_run: optional(&self.file(LADDER_RUN))?,
            ladder_report: if ladder_csv.exists() { Some(fs::read_to_string(ladder_csv)?) } else { None },
        })
    }
}
