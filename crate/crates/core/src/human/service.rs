//! Transport-independent benchmark service. Every mutation goes through one
//! lock, so verdicts on the same `(pair, annotator)` key are serialized and
//! analytics always see a consistent snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::metrics::{binary_accuracy, eer_auroc_from_roc, interpolated_roc, Judgment};
use super::store::{AnnotationRecord, RecordStore, StoredEvent};
use super::HumanError;
use crate::eval::Trial;

/// Soft per-pair limit in seconds.
pub const TIME_LIMIT_S: f64 = 30.0;
/// Allowance for submission latency past the limit.
pub const GRACE_S: f64 = 5.0;

/// A benchmark pair with its hidden label. Never sent to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPair {
    pub pair_id: String,
    pub subset: String,
    pub audio_a: PathBuf,
    pub audio_b: PathBuf,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub pairs: Vec<BenchmarkPair>,
}

fn subset_name(i: usize) -> String {
    let mut name = String::new();
    let mut i = i + 1;
    while i > 0 {
        i -= 1;
        name.insert(0, (b'A' + (i % 26) as u8) as char);
        i /= 26;
    }
    name
}

impl BenchmarkSet {
    /// Cuts `trials` into `n_subsets` contiguous subsets named A, B, ...
    /// Audio paths are resolved against `root`.
    pub fn from_trials(trials: &[Trial], n_subsets: usize, root: &Path) -> Result<Self, HumanError> {
        if n_subsets == 0 || n_subsets > trials.len() {
            return Err(HumanError::InvalidSet(format!(
                "cannot split {} pairs into {n_subsets} subsets",
                trials.len()
            )));
        }
        let pairs = trials
            .iter()
            .enumerate()
            .map(|(i, t)| BenchmarkPair {
                pair_id: format!("p{i:05}"),
                subset: subset_name(i * n_subsets / trials.len()),
                audio_a: root.join(&t.a),
                audio_b: root.join(&t.b),
                same: t.same,
            })
            .collect();
        let set = BenchmarkSet { pairs };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), HumanError> {
        if self.pairs.is_empty() {
            return Err(HumanError::InvalidSet("no pairs".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.pairs {
            if !valid_id(&p.pair_id) || !valid_id(&p.subset) {
                return Err(HumanError::InvalidSet(format!("bad id in pair {:?}", p.pair_id)));
            }
            if !seen.insert(p.pair_id.as_str()) {
                return Err(HumanError::InvalidSet(format!("duplicate pair id {}", p.pair_id)));
            }
        }
        Ok(())
    }

    /// Subset names in sorted order.
    pub fn subsets(&self) -> Vec<String> {
        let mut s: Vec<String> = self.pairs.iter().map(|p| p.subset.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn load(path: &Path) -> Result<Self, HumanError> {
        let set: BenchmarkSet = serde_json::from_str(&fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), HumanError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// What an annotator is shown. Carries no label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub pair_id: String,
    pub subset: String,
    pub audio_a: String,
    pub audio_b: String,
    /// Pairs left in this subset for this annotator, including this one.
    pub remaining_in_subset: usize,
    pub time_limit_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub pair_id: String,
    pub annotator_id: String,
    pub score: i64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub record: AnnotationRecord,
    /// True when this repeated an answer already on file.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub subset: Option<String>,
    pub eer: f64,
    pub auroc: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator_id: String,
    pub subsets: Vec<String>,
    pub annotated: usize,
    pub skipped: usize,
    pub remaining_in_subset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Debug)]
enum Outcome {
    Annotated(usize),
    Skipped,
}

struct Inner {
    store: RecordStore,
    /// Subsets claimed by each annotator, in claim order.
    claims: BTreeMap<String, Vec<String>>,
    owner: HashMap<String, String>,
    outcomes: HashMap<(String, String), Outcome>,
    records: Vec<AnnotationRecord>,
}

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

pub struct BenchmarkService {
    set: BenchmarkSet,
    index: HashMap<String, usize>,
    inner: Mutex<Inner>,
    clock: Clock,
}

fn wall_clock() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl BenchmarkService {
    /// Opens the record log at `store_path` and replays it.
    pub fn open(set: BenchmarkSet, store_path: &Path) -> Result<Self, HumanError> {
        Self::with_clock(set, store_path, Box::new(wall_clock))
    }

    pub fn with_clock(set: BenchmarkSet, store_path: &Path, clock: Clock) -> Result<Self, HumanError> {
        set.validate()?;
        let index = set.pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        let (store, events) = RecordStore::open(store_path)?;
        let mut inner = Inner {
            store,
            claims: BTreeMap::new(),
            owner: HashMap::new(),
            outcomes: HashMap::new(),
            records: Vec::new(),
        };
        for ev in events {
            apply(&mut inner, ev);
        }
        Ok(BenchmarkService {
            set,
            index,
            inner: Mutex::new(inner),
            clock,
        })
    }

    pub fn set(&self) -> &BenchmarkSet {
        &self.set
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn pair(&self, pair_id: &str) -> Result<&BenchmarkPair, HumanError> {
        self.index
            .get(pair_id)
            .map(|&i| &self.set.pairs[i])
            .ok_or_else(|| HumanError::UnknownPair(pair_id.to_string()))
    }

    fn pending<'a>(&'a self, inner: &Inner, annotator: &str, subset: &str) -> Vec<&'a BenchmarkPair> {
        self.set
            .pairs
            .iter()
            .filter(|p| p.subset == subset && !inner.outcomes.contains_key(&(p.pair_id.clone(), annotator.to_string())))
            .collect()
    }

    /// The next pair for `annotator`, claiming a fresh subset when the
    /// current one is finished.
    pub fn next_task(&self, annotator: &str) -> Result<TaskDescriptor, HumanError> {
        if !valid_id(annotator) {
            return Err(HumanError::InvalidAnnotator(annotator.to_string()));
        }
        let mut inner = self.lock();
        let current = inner.claims.get(annotator).and_then(|c| c.last().cloned());
        let subset = match current {
            Some(s) if !self.pending(&inner, annotator, &s).is_empty() => s,
            _ => {
                let free = self
                    .set
                    .subsets()
                    .into_iter()
                    .find(|s| !inner.owner.contains_key(s))
                    .ok_or_else(|| HumanError::SubsetExhausted(annotator.to_string()))?;
                let ev = StoredEvent::Claim {
                    annotator_id: annotator.to_string(),
                    subset: free.clone(),
                    timestamp: (self.clock)(),
                };
                inner.store.append(&ev)?;
                apply(&mut inner, ev);
                free
            }
        };
        let pending = self.pending(&inner, annotator, &subset);
        let p = pending[0];
        Ok(TaskDescriptor {
            pair_id: p.pair_id.clone(),
            subset,
            audio_a: format!("/audio/{}/a", p.pair_id),
            audio_b: format!("/audio/{}/b", p.pair_id),
            remaining_in_subset: pending.len(),
            time_limit_s: TIME_LIMIT_S,
        })
    }

    fn check_assigned(&self, inner: &Inner, pair_id: &str, annotator: &str) -> Result<(), HumanError> {
        let pair = self.pair(pair_id)?;
        if inner.owner.get(&pair.subset).map(String::as_str) != Some(annotator) {
            return Err(HumanError::NotAssigned {
                pair_id: pair_id.to_string(),
                annotator_id: annotator.to_string(),
            });
        }
        Ok(())
    }

    /// Stores a verdict. Repeating an identical verdict is acknowledged
    /// without writing anything.
    pub fn record_annotation(&self, sub: &Submission) -> Result<Ack, HumanError> {
        if !(1..=5).contains(&sub.score) {
            return Err(HumanError::InvalidScore(sub.score));
        }
        if !(sub.elapsed_s.is_finite() && sub.elapsed_s >= 0.0) {
            return Err(HumanError::InvalidElapsed(sub.elapsed_s));
        }
        let mut inner = self.lock();
        self.check_assigned(&inner, &sub.pair_id, &sub.annotator_id)?;
        let key = (sub.pair_id.clone(), sub.annotator_id.clone());
        match inner.outcomes.get(&key) {
            Some(Outcome::Annotated(i)) if inner.records[*i].score as i64 == sub.score => {
                return Ok(Ack {
                    record: inner.records[*i].clone(),
                    duplicate: true,
                });
            }
            Some(_) => {
                return Err(HumanError::DuplicateAnnotation {
                    pair_id: sub.pair_id.clone(),
                    annotator_id: sub.annotator_id.clone(),
                })
            }
            None => {}
        }
        let record = AnnotationRecord {
            pair_id: sub.pair_id.clone(),
            annotator_id: sub.annotator_id.clone(),
            score: sub.score as u8,
            elapsed_s: sub.elapsed_s,
            timestamp: (self.clock)(),
            borderline_used: sub.score == 3,
            overrun: sub.elapsed_s > TIME_LIMIT_S + GRACE_S,
        };
        let ev = StoredEvent::Annotation(record.clone());
        inner.store.append(&ev)?;
        apply(&mut inner, ev);
        Ok(Ack { record, duplicate: false })
    }

    /// Records that the timer ran out on a pair. Repeated skips are no-ops.
    pub fn record_skip(&self, pair_id: &str, annotator: &str, elapsed_s: f64) -> Result<(), HumanError> {
        if !(elapsed_s.is_finite() && elapsed_s >= 0.0) {
            return Err(HumanError::InvalidElapsed(elapsed_s));
        }
        let mut inner = self.lock();
        self.check_assigned(&inner, pair_id, annotator)?;
        match inner.outcomes.get(&(pair_id.to_string(), annotator.to_string())) {
            Some(Outcome::Skipped) => return Ok(()),
            Some(Outcome::Annotated(_)) => {
                return Err(HumanError::DuplicateAnnotation {
                    pair_id: pair_id.to_string(),
                    annotator_id: annotator.to_string(),
                })
            }
            None => {}
        }
        let ev = StoredEvent::Skip {
            pair_id: pair_id.to_string(),
            annotator_id: annotator.to_string(),
            elapsed_s,
            timestamp: (self.clock)(),
        };
        inner.store.append(&ev)?;
        apply(&mut inner, ev);
        Ok(())
    }

    pub fn progress(&self, annotator: &str) -> Progress {
        let inner = self.lock();
        let subsets = inner.claims.get(annotator).cloned().unwrap_or_default();
        let mine = inner.outcomes.iter().filter(|((_, a), _)| a == annotator);
        let (mut annotated, mut skipped) = (0, 0);
        for (_, o) in mine {
            match o {
                Outcome::Annotated(_) => annotated += 1,
                Outcome::Skipped => skipped += 1,
            }
        }
        let remaining_in_subset = subsets.last().map_or(0, |s| self.pending(&inner, annotator, s).len());
        Progress {
            annotator_id: annotator.to_string(),
            subsets,
            annotated,
            skipped,
            remaining_in_subset,
        }
    }

    /// All stored verdicts, in arrival order.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.lock().records.clone()
    }

    /// Labelled verdicts, optionally restricted to one subset.
    pub fn judgments(&self, subset: Option<&str>) -> Result<Vec<Judgment>, HumanError> {
        if let Some(s) = subset {
            if !self.set.pairs.iter().any(|p| p.subset == s) {
                return Err(HumanError::UnknownSubset(s.to_string()));
            }
        }
        let inner = self.lock();
        Ok(inner
            .records
            .iter()
            .filter_map(|r| {
                let p = self.pair(&r.pair_id).ok()?;
                (subset.is_none_or(|s| s == p.subset)).then_some(Judgment {
                    score: r.score,
                    same: p.same,
                })
            })
            .collect())
    }

    pub fn metrics(&self, subset: Option<&str>) -> Result<SubsetMetrics, HumanError> {
        let judgments = self.judgments(subset)?;
        let (eer, auroc) = eer_auroc_from_roc(&interpolated_roc(&judgments)?);
        Ok(SubsetMetrics {
            subset: subset.map(str::to_string),
            eer,
            auroc,
            accuracy: binary_accuracy(&judgments, true)?,
            n: judgments.len(),
        })
    }

    /// CSV with columns `pair_id,annotator_id,score,elapsed_s,timestamp`.
    pub fn export_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair_id", "annotator_id", "score", "elapsed_s", "timestamp"])
            .expect("writing to memory");
        for r in self.lock().records.iter() {
            w.write_record([
                r.pair_id.clone(),
                r.annotator_id.clone(),
                r.score.to_string(),
                r.elapsed_s.to_string(),
                r.timestamp.to_string(),
            ])
            .expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("ids are ascii")
    }

    pub fn audio_path(&self, pair_id: &str, side: Side) -> Result<&Path, HumanError> {
        let p = self.pair(pair_id)?;
        Ok(match side {
            Side::A => &p.audio_a,
            Side::B => &p.audio_b,
        })
    }
}

fn apply(inner: &mut Inner, ev: StoredEvent) {
    match ev {
        StoredEvent::Claim { annotator_id, subset, .. } => {
            inner.owner.insert(subset.clone(), annotator_id.clone());
            inner.claims.entry(annotator_id).or_default().push(subset);
        }
        StoredEvent::Annotation(r) => {
            let key = (r.pair_id.clone(), r.annotator_id.clone());
            inner.outcomes.insert(key, Outcome::Annotated(inner.records.len()));
            inner.records.push(r);
        }
        StoredEvent::Skip { pair_id, annotator_id, .. } => {
            inner.outcomes.insert((pair_id, annotator_id), Outcome::Skipped);
        }
    }
}
