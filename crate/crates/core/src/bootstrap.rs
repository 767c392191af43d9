//! Round-based dataset bootstrapping.
//!
//! Round `i` trains on the current dataset `S_{i-1}` (with the hard pool
//! `H_{i-1}` as extra negatives), keeps candidates of subset `C_i` whose top
//! confidence exceeds the threshold (`D_i`), asks a [`Labeler`] for a binary
//! verdict on each, then folds true positives into `S_i` under their assigned
//! category and false positives into `H_i`.
//!
//! # State directory
//!
//! ```text
//! state.json                 round counter, consumed flags, config, round records
//! s0.txt                     seed dataset S_0
//! dataset-rNNN.txt           S after round NNN
//! hard_pool-rNNN.txt         H after round NNN (label column = rejected-for category)
//! candidates/subset-NNN.txt  candidate subsets C_1..C_k (unlabeled)
//! decisions.jsonl            append-only decision log
//! checkpoints/round-NNN.ckpt model trained at the start of round NNN
//! checkpoints/final.ckpt     model retrained after the last round
//! ```
//!
//! `state.json` is written last, so a crash mid-round leaves the previous
//! round's state intact; decisions already logged for the interrupted round
//! are reused on resume.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, HardNegative};
use crate::embednet::Sample;
use crate::trainer::{self, TrainConfig, TrainedModel};
use crate::vecmath::sq_dist;
use crate::{Error, Result};

pub const DEFAULT_EXEMPLARS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "tp")]
    TruePositive,
    #[serde(rename = "fp")]
    FalsePositive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::TruePositive => "tp",
            Verdict::FalsePositive => "fp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tp" => Some(Verdict::TruePositive),
            "fp" => Some(Verdict::FalsePositive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub round: usize,
    pub candidate_id: String,
    pub assigned_category: usize,
    pub confidence: f64,
    pub decision: Verdict,
    pub labeler: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppendOutcome {
    Recorded,
    /// A decision already existed; the first one stands.
    Duplicate(Verdict),
}

/// Append-only decision log, optionally mirrored to a JSON-lines file.
/// At most one decision is kept per `(round, candidate)`.
#[derive(Debug, Default)]
pub struct DecisionLog {
    file: Option<File>,
    records: Vec<DecisionRecord>,
    by_key: HashMap<(usize, String), usize>,
}

pub type SharedDecisionLog = Arc<Mutex<DecisionLog>>;

impl DecisionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a log file and loads its records. A torn
    /// final line from an interrupted write is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut log = Self::default();
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let complete = text.ends_with('\n');
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<DecisionRecord>(line) {
                    Ok(r) => log.insert(r),
                    Err(_) if i + 1 == lines.len() && !complete => break,
                    Err(e) => {
                        return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })
                    }
                }
            }
            if !complete && !text.is_empty() {
                // rewrite without the torn tail so appends stay line-aligned
                let mut clean = String::new();
                for r in &log.records {
                    clean.push_str(&serde_json::to_string(r)?);
                    clean.push('\n');
                }
                data::write_atomic(path, clean.as_bytes())?;
            }
        }
        log.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(log)
    }

    pub fn shared(self) -> SharedDecisionLog {
        Arc::new(Mutex::new(self))
    }

    fn insert(&mut self, r: DecisionRecord) {
        let key = (r.round, r.candidate_id.clone());
        if self.by_key.contains_key(&key) {
            return;
        }
        self.by_key.insert(key, self.records.len());
        self.records.push(r);
    }

    pub fn append(&mut self, record: DecisionRecord) -> Result<AppendOutcome> {
        if let Some(existing) = self.get(record.round, &record.candidate_id) {
            return Ok(AppendOutcome::Duplicate(existing.decision));
        }
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.insert(record);
        Ok(AppendOutcome::Recorded)
    }

    pub fn get(&self, round: usize, candidate_id: &str) -> Option<&DecisionRecord> {
        self.by_key.get(&(round, candidate_id.to_string())).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// A member of `D_i`: a candidate with its assigned category and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub sample: Sample,
    pub assigned: usize,
    pub confidence: f64,
}

/// Keeps candidates whose top confidence is strictly above `threshold`,
/// ordered by descending confidence then id.
pub fn filter_candidates(model: &TrainedModel, candidates: &[Sample], threshold: f64) -> Result<Vec<Filtered>> {
    let embeddings = model.embed_all(candidates)?;
    let mut kept = Vec::new();
    for (s, e) in candidates.iter().zip(&embeddings) {
        let p = model.score_embedding(e)?;
        let assigned = p.argmax();
        let confidence = p.0[assigned];
        if confidence > threshold {
            kept.push(Filtered { sample: Sample::unlabeled(s.id.clone(), s.features.clone()), assigned, confidence });
        }
    }
    sort_filtered(&mut kept);
    Ok(kept)
}

fn sort_filtered(v: &mut [Filtered]) {
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.sample.id.cmp(&b.sample.id)));
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRequest {
    pub candidate: Sample,
    pub assigned: usize,
    pub confidence: f64,
    /// Nearest training samples of the assigned category.
    pub exemplars: Vec<Sample>,
}

/// Everything a labeler needs for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundContext {
    pub round: usize,
    pub requests: Vec<LabelRequest>,
    pub category_names: Vec<String>,
    /// Representative training samples per category.
    pub category_exemplars: Vec<Vec<Sample>>,
}

/// Produces a binary verdict for every request of a round, recording each
/// one in the decision log. Requests already decided in the log must be
/// left as they are.
pub trait Labeler {
    fn label(&mut self, ctx: &RoundContext, log: &SharedDecisionLog) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenTruth {
    Category(usize),
    /// Belongs to none of the dataset's categories.
    Distractor,
}

/// Simulated labeler decision: true positive iff the hidden category equals
/// the assigned one, flipped with probability `noise`.
pub fn oracle_label<R: Rng + ?Sized>(truth: HiddenTruth, assigned: usize, noise: f64, rng: &mut R) -> Verdict {
    let correct = truth == HiddenTruth::Category(assigned);
    let flip = noise > 0.0 && rng.random_bool(noise.min(1.0));
    if correct != flip {
        Verdict::TruePositive
    } else {
        Verdict::FalsePositive
    }
}

fn stable_hash(parts: &[&[u8]]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Labeler backed by the hidden ground truth of simulated candidates.
#[derive(Debug, Clone)]
pub struct OracleLabeler {
    truth: HashMap<String, HiddenTruth>,
    noise: f64,
    seed: u64,
    id: String,
}

impl OracleLabeler {
    pub fn new(truth: HashMap<String, HiddenTruth>, noise: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::config(format!("noise rate must lie in [0, 1], got {noise}")));
        }
        Ok(Self { truth, noise, seed, id: "oracle".into() })
    }

    /// Hidden truth from labeled candidates and unlabeled distractors.
    pub fn from_pools(candidates: &[Sample], distractors: &[Sample], noise: f64, seed: u64) -> Result<Self> {
        let mut truth = HashMap::new();
        for s in candidates {
            let l = s.label.ok_or_else(|| Error::input(format!("candidate {} has no hidden label", s.id)))?;
            truth.insert(s.id.clone(), HiddenTruth::Category(l));
        }
        for s in distractors {
            truth.insert(s.id.clone(), HiddenTruth::Distractor);
        }
        Self::new(truth, noise, seed)
    }

    /// Noise draws depend only on `(seed, round, id)` so resumed runs agree.
    pub fn decide(&self, round: usize, candidate_id: &str, assigned: usize) -> Result<Verdict> {
        let truth = *self
            .truth
            .get(candidate_id)
            .ok_or_else(|| Error::input(format!("no hidden label for candidate {candidate_id}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
            &self.seed.to_le_bytes(),
            &(round as u64).to_le_bytes(),
            candidate_id.as_bytes(),
        ]));
        Ok(oracle_label(truth, assigned, self.noise, &mut rng))
    }
}

impl Labeler for OracleLabeler {
    fn label(&mut self, ctx: &RoundContext, log: &SharedDecisionLog) -> Result<()> {
        let mut log = log.lock().map_err(|_| Error::State("decision log poisoned".into()))?;
        for req in &ctx.requests {
            if log.get(ctx.round, &req.candidate.id).is_some() {
                continue;
            }
            let decision = self.decide(ctx.round, &req.candidate.id, req.assigned)?;
            log.append(DecisionRecord {
                round: ctx.round,
                candidate_id: req.candidate.id.clone(),
                assigned_category: req.assigned,
                confidence: req.confidence,
                decision,
                labeler: self.id.clone(),
                timestamp: now_timestamp(),
            })?;
        }
        Ok(())
    }
}

/// Splits candidates into `k` near-equal chunks ordered by a stable hash of
/// their ids. Labels are stripped.
pub fn split_candidates(candidates: &[Sample], k: usize) -> Result<Vec<Vec<Sample>>> {
    if k == 0 {
        return Err(Error::config("need at least one candidate subset"));
    }
    let mut keyed: Vec<(u64, &Sample)> =
        candidates.iter().map(|s| (stable_hash(&[s.id.as_bytes()]), s)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let base = keyed.len() / k;
    let extra = keyed.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut it = keyed.into_iter();
    for i in 0..k {
        let n = base + usize::from(i < extra);
        out.push(it.by_ref().take(n).map(|(_, s)| Sample::unlabeled(s.id.clone(), s.features.clone())).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSubset {
    #[serde(skip)]
    pub samples: Vec<Sample>,
    pub consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub id: String,
    pub assigned: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `D_i` in filtering order.
    pub filtered: Vec<FilteredRecord>,
    pub true_positives: Vec<String>,
    pub false_positives: Vec<String>,
    /// Mean accuracy of the round's model on the held-out set, when given.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapState {
    /// Completed rounds.
    pub round: usize,
    pub config: TrainConfig,
    pub seed_dataset: Dataset,
    pub dataset: Dataset,
    pub hard_pool: Vec<HardNegative>,
    pub subsets: Vec<CandidateSubset>,
    pub records: Vec<RoundRecord>,
    pub model: Option<TrainedModel>,
}

impl BootstrapState {
    pub fn new(seed_dataset: Dataset, candidates: &[Sample], k: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        seed_dataset.validate()?;
        if let Some(s) = candidates.iter().find(|s| s.features.len() != seed_dataset.input_dim) {
            return Err(Error::input(format!("candidate {} has wrong dimension", s.id)));
        }
        let subsets = split_candidates(candidates, k)?
            .into_iter()
            .map(|samples| CandidateSubset { samples, consumed: false })
            .collect();
        Ok(Self {
            round: 0,
            config,
            dataset: seed_dataset.clone(),
            seed_dataset,
            hard_pool: Vec::new(),
            subsets,
            records: Vec::new(),
            model: None,
        })
    }

    pub fn next_subset(&self) -> Option<usize> {
        self.subsets.iter().position(|s| !s.consumed)
    }

    pub fn is_complete(&self) -> bool {
        self.next_subset().is_none()
    }

    /// Checks the per-round partition and monotonicity invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::State(m));
        let mut expected_s = self.seed_dataset.len();
        let mut expected_h = 0;
        for r in &self.records {
            let d: HashSet<&str> = r.filtered.iter().map(|f| f.id.as_str()).collect();
            let t: HashSet<&str> = r.true_positives.iter().map(String::as_str).collect();
            let f: HashSet<&str> = r.false_positives.iter().map(String::as_str).collect();
            if !t.is_disjoint(&f) {
                return fail(format!("round {}: T and F intersect", r.round));
            }
            if t.union(&f).copied().collect::<HashSet<_>>() != d {
                return fail(format!("round {}: T u F != D", r.round));
            }
            if r.filtered.iter().any(|x| !(x.confidence > self.config.confidence_threshold)) {
                return fail(format!("round {}: D member below threshold", r.round));
            }
            expected_s += t.len();
            expected_h += f.len();
        }
        if self.dataset.len() != expected_s || self.hard_pool.len() != expected_h {
            return fail("dataset or hard pool size disagrees with round records".into());
        }
        if self.dataset.samples[..self.seed_dataset.len()] != self.seed_dataset.samples[..] {
            return fail("seed dataset is not a prefix of the current dataset".into());
        }
        Ok(())
    }
}

fn category_exemplars(
    model: &TrainedModel,
    dataset: &Dataset,
    embeddings: &[Vec<f64>],
    count: usize,
) -> Result<Vec<Vec<Sample>>> {
    let mut scored: Vec<Vec<(f64, &Sample)>> = vec![Vec::new(); dataset.n_categories];
    for (s, e) in dataset.samples.iter().zip(embeddings) {
        if let Some(l) = s.label {
            let p = model.score_embedding(e)?;
            scored[l].push((p.0[l], s));
        }
    }
    Ok(scored
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
            v.into_iter().take(count).map(|(_, s)| s.clone()).collect()
        })
        .collect())
}

fn nearest_exemplars(
    target: &[f64],
    category: usize,
    dataset: &Dataset,
    embeddings: &[Vec<f64>],
    count: usize,
) -> Vec<Sample> {
    let mut v: Vec<(f64, &Sample)> = dataset
        .samples
        .iter()
        .zip(embeddings)
        .filter(|(s, _)| s.label == Some(category))
        .map(|(s, e)| (sq_dist(target, e), s))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    v.into_iter().take(count).map(|(_, s)| s.clone()).collect()
}

/// Builds the labeling context for a round from a trained model.
pub fn round_context(model: &TrainedModel, dataset: &Dataset, round: usize, filtered: &[Filtered]) -> Result<RoundContext> {
    let train_emb = model.embed_all(&dataset.samples)?;
    let cand_emb = model.embed_all(&filtered.iter().map(|f| f.sample.clone()).collect::<Vec<_>>())?;
    let requests = filtered
        .iter()
        .zip(&cand_emb)
        .map(|(f, e)| LabelRequest {
            candidate: f.sample.clone(),
            assigned: f.assigned,
            confidence: f.confidence,
            exemplars: nearest_exemplars(e, f.assigned, dataset, &train_emb, DEFAULT_EXEMPLARS),
        })
        .collect();
    Ok(RoundContext {
        round,
        requests,
        category_names: dataset.category_names.clone(),
        category_exemplars: category_exemplars(model, dataset, &train_emb, DEFAULT_EXEMPLARS)?,
    })
}

/// Runs one bootstrap round in place and returns its record.
pub fn bootstrap_round(
    state: &mut BootstrapState,
    labeler: &mut dyn Labeler,
    log: &SharedDecisionLog,
    testset: Option<&[Sample]>,
) -> Result<RoundRecord> {
    let subset_idx = state.next_subset().ok_or(Error::CandidatesExhausted)?;
    let round = state.round + 1;
    let model = trainer::train(&state.dataset, &state.hard_pool, &state.config)?;
    let test_accuracy = testset.map(|t| model.evaluate(t)).transpose()?.map(|e| e.mean_accuracy);

    let filtered =
        filter_candidates(&model, &state.subsets[subset_idx].samples, state.config.confidence_threshold)?;
    let ctx = round_context(&model, &state.dataset, round, &filtered)?;
    labeler.label(&ctx, log)?;

    let mut true_positives = Vec::new();
    let mut false_positives = Vec::new();
    {
        let log = log.lock().map_err(|_| Error::State("decision log poisoned".into()))?;
        for f in &filtered {
            let rec = log.get(round, &f.sample.id).ok_or_else(|| {
                Error::Labeling(format!("no decision recorded for candidate {} in round {round}", f.sample.id))
            })?;
            if rec.assigned_category != f.assigned {
                return Err(Error::Labeling(format!(
                    "decision for {} names category {}, model assigned {}",
                    f.sample.id, rec.assigned_category, f.assigned
                )));
            }
            match rec.decision {
                Verdict::TruePositive => true_positives.push(f),
                Verdict::FalsePositive => false_positives.push(f),
            }
        }
    }

    for f in &true_positives {
        state.dataset.samples.push(Sample::new(f.sample.id.clone(), f.sample.features.clone(), Some(f.assigned)));
    }
    for f in &false_positives {
        state.hard_pool.push(HardNegative { sample: f.sample.clone(), rejected_for: Some(f.assigned) });
    }
    let record = RoundRecord {
        round,
        filtered: filtered
            .iter()
            .map(|f| FilteredRecord { id: f.sample.id.clone(), assigned: f.assigned, confidence: f.confidence })
            .collect(),
        true_positives: true_positives.iter().map(|f| f.sample.id.clone()).collect(),
        false_positives: false_positives.iter().map(|f| f.sample.id.clone()).collect(),
        test_accuracy,
    };
    state.subsets[subset_idx].consumed = true;
    state.round = round;
    state.records.push(record.clone());
    state.model = Some(model);
    state.check_invariants()?;
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub model: TrainedModel,
    pub state: BootstrapState,
    /// Mean accuracy of the final model, when a test set was given.
    pub final_accuracy: Option<f64>,
}

/// Runs every remaining round, persisting after each one when `store` is
/// given, then retrains on the final `S_k` and `H_k`.
pub fn run_bootstrap(
    mut state: BootstrapState,
    labeler: &mut dyn Labeler,
    log: &SharedDecisionLog,
    testset: Option<&[Sample]>,
    store: Option<&BootstrapStore>,
) -> Result<BootstrapOutcome> {
    while !state.is_complete() {
        let record = bootstrap_round(&mut state, labeler, log, testset)?;
        tracing::info!(
            round = record.round,
            filtered = record.filtered.len(),
            tp = record.true_positives.len(),
            fp = record.false_positives.len(),
            test_accuracy = ?record.test_accuracy,
            "bootstrap round complete"
        );
        if let Some(store) = store {
            store.save(&state)?;
        }
    }
    let model = trainer::train(&state.dataset, &state.hard_pool, &state.config)?;
    let final_accuracy = testset.map(|t| model.evaluate(t)).transpose()?.map(|e| e.mean_accuracy);
    if let Some(store) = store {
        data::save_checkpoint(&model, &store.root.join("checkpoints").join("final.ckpt"))?;
    }
    Ok(BootstrapOutcome { model, state, final_accuracy })
}

/// Rebuilds `S_k` and `H_k` from `S_0`, the candidate subsets and the
/// decision log. Round `r` draws its candidates from subset `r - 1`, and
/// decisions are folded in filtering order (descending confidence, then id).
pub fn replay(
    seed_dataset: &Dataset,
    subsets: &[CandidateSubset],
    decisions: &[DecisionRecord],
    through_round: usize,
) -> Result<(Dataset, Vec<HardNegative>)> {
    let mut dataset = seed_dataset.clone();
    let mut hard_pool = Vec::new();
    for round in 1..=through_round {
        let subset = subsets
            .get(round - 1)
            .ok_or_else(|| Error::State(format!("no candidate subset for round {round}")))?;
        let features: HashMap<&str, &Sample> = subset.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut recs: Vec<&DecisionRecord> = decisions.iter().filter(|d| d.round == round).collect();
        recs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.candidate_id.cmp(&b.candidate_id)));
        for r in recs {
            let s = features.get(r.candidate_id.as_str()).ok_or_else(|| {
                Error::State(format!("decision for unknown candidate {} in round {round}", r.candidate_id))
            })?;
            match r.decision {
                Verdict::TruePositive => {
                    dataset.samples.push(Sample::new(s.id.clone(), s.features.clone(), Some(r.assigned_category)))
                }
                Verdict::FalsePositive => hard_pool.push(HardNegative {
                    sample: Sample::unlabeled(s.id.clone(), s.features.clone()),
                    rejected_for: Some(r.assigned_category),
                }),
            }
        }
    }
    Ok((dataset, hard_pool))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    round: usize,
    name: String,
    n_categories: usize,
    input_dim: usize,
    category_names: Vec<String>,
    config: TrainConfig,
    consumed: Vec<bool>,
    records: Vec<RoundRecord>,
}

/// On-disk home of a [`BootstrapState`].
#[derive(Debug, Clone)]
pub struct BootstrapStore {
    pub root: PathBuf,
}

impl BootstrapStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn exists(&self) -> bool {
        self.root.join("state.json").exists()
    }

    pub fn decision_log_path(&self) -> PathBuf {
        self.root.join("decisions.jsonl")
    }

    pub fn open_log(&self) -> Result<SharedDecisionLog> {
        fs::create_dir_all(&self.root)?;
        Ok(DecisionLog::open(&self.decision_log_path())?.shared())
    }

    fn round_file(&self, stem: &str, round: usize) -> PathBuf {
        self.root.join(format!("{stem}-r{round:03}.txt"))
    }

    fn subset_file(&self, i: usize) -> PathBuf {
        self.root.join("candidates").join(format!("subset-{i:03}.txt"))
    }

    /// Writes a freshly created state, including `S_0` and the subsets.
    pub fn init(&self, state: &BootstrapState) -> Result<()> {
        if self.exists() {
            return Err(Error::State(format!("{} already holds a bootstrap state", self.root.display())));
        }
        fs::create_dir_all(self.root.join("candidates"))?;
        fs::create_dir_all(self.root.join("checkpoints"))?;
        data::save_dataset(&state.seed_dataset, &self.root.join("s0.txt"))?;
        for (i, s) in state.subsets.iter().enumerate() {
            let ds = state.seed_dataset.with_samples(s.samples.clone());
            data::save_dataset(&ds, &self.subset_file(i))?;
        }
        self.save(state)
    }

    pub fn save(&self, state: &BootstrapState) -> Result<()> {
        fs::create_dir_all(self.root.join("checkpoints"))?;
        let ds = &state.dataset;
        data::save_dataset(ds, &self.round_file("dataset", state.round))?;
        data::save_hard_pool(&state.hard_pool, ds.n_categories, ds.input_dim, &self.round_file("hard_pool", state.round))?;
        if let Some(m) = &state.model {
            data::save_checkpoint(m, &self.root.join("checkpoints").join(format!("round-{:03}.ckpt", state.round)))?;
        }
        let file = StateFile {
            version: 1,
            round: state.round,
            name: state.seed_dataset.name.clone(),
            n_categories: ds.n_categories,
            input_dim: ds.input_dim,
            category_names: ds.category_names.clone(),
            config: state.config.clone(),
            consumed: state.subsets.iter().map(|s| s.consumed).collect(),
            records: state.records.clone(),
        };
        data::write_atomic(&self.root.join("state.json"), serde_json::to_string_pretty(&file)?.as_bytes())
    }

    pub fn load(&self) -> Result<BootstrapState> {
        let file: StateFile = serde_json::from_str(&fs::read_to_string(self.root.join("state.json"))?)?;
        if file.version != 1 {
            return Err(Error::State(format!("unsupported state version {}", file.version)));
        }
        let seed_dataset = data::load_dataset(&self.root.join("s0.txt"))?;
        let dataset = data::load_dataset(&self.round_file("dataset", file.round))?;
        let hard_pool = data::load_hard_pool(&self.round_file("hard_pool", file.round))?;
        let subsets = file
            .consumed
            .iter()
            .enumerate()
            .map(|(i, &consumed)| {
                Ok(CandidateSubset { samples: data::load_dataset(&self.subset_file(i))?.samples, consumed })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = if file.round > 0 {
            Some(data::load_checkpoint(&self.root.join("checkpoints").join(format!("round-{:03}.ckpt", file.round)))?)
        } else {
            None
        };
        let state = BootstrapState {
            round: file.round,
            config: file.config,
            seed_dataset,
            dataset,
            hard_pool,
            subsets,
            records: file.records,
            model,
        };
        state.check_invariants()?;
        Ok(state)
    }
}

/// Reads back a decision log file without opening it for writing.
pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}
