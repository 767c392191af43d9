//! Training loop for the five model variants.
//!
//! Triplet variants use quasi-online sampling: every `refresh_period`
//! iterations the whole training set (plus the hard pool) is re-embedded into
//! an [`EmbeddingIndex`] snapshot, and every batch until the next refresh is
//! mined from that snapshot.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSet, ConfidenceVector, JointParams};
use crate::data::{Dataset, HardNegative};
use crate::embednet::{self, Network, Sample, SoftmaxHead};
use crate::triplet::{self, EmbeddingIndex, MiningParams, PoolEntry};
use crate::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_REFRESH_PERIOD: usize = 1000;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Softmax,
    TripletNaive,
    TripletHn,
    TripletM,
    TripletA,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Softmax, Variant::TripletNaive, Variant::TripletHn, Variant::TripletM, Variant::TripletA];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::TripletNaive => "triplet-naive",
            Variant::TripletHn => "triplet-hn",
            Variant::TripletM => "triplet-m",
            Variant::TripletA => "triplet-a",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Softmax => 0,
            Variant::TripletNaive => 1,
            Variant::TripletHn => 2,
            Variant::TripletM => 3,
            Variant::TripletA => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

/// Which references a human-rejected candidate may serve as a negative for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardNegativeScope {
    /// Only references of the category the candidate was rejected for.
    PerCategory,
    /// Any reference.
    Global,
}

impl HardNegativeScope {
    pub(crate) fn tag(self) -> u8 {
        match self {
            HardNegativeScope::PerCategory => 0,
            HardNegativeScope::Global => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HardNegativeScope::PerCategory),
            1 => Some(HardNegativeScope::Global),
            _ => None,
        }
    }
}

impl FromStr for HardNegativeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-category" => Ok(HardNegativeScope::PerCategory),
            "global" => Ok(HardNegativeScope::Global),
            _ => Err(Error::config(format!("unknown hard-negative scope '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub margin: f64,
    pub gamma: f64,
    pub omega: f64,
    /// Anchor points per category.
    pub k: usize,
    /// Fraction of nearest same-category neighbours eligible as positives.
    pub rho: f64,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub batch_size: usize,
    pub refresh_period: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub confidence_threshold: f64,
    pub renormalize_anchors: bool,
    pub hard_negative_scope: HardNegativeScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TripletA,
            margin: triplet::DEFAULT_MARGIN,
            gamma: anchors::DEFAULT_GAMMA,
            omega: anchors::DEFAULT_OMEGA,
            k: anchors::DEFAULT_K,
            rho: triplet::DEFAULT_RHO,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dims: vec![64],
            batch_size: triplet::DEFAULT_BATCH_SIZE,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            max_iterations: 10_000,
            learning_rate: 0.05,
            seed: 0,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            renormalize_anchors: false,
            hard_negative_scope: HardNegativeScope::PerCategory,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.margin >= 0.0) {
            return fail(format!("margin must be >= 0, got {}", self.margin));
        }
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return fail(format!("omega must lie in [0, 1], got {}", self.omega));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if self.refresh_period == 0 {
            return fail("refresh_period must be >= 1".into());
        }
        if self.k == 0 || self.embed_dim == 0 || self.batch_size == 0 {
            return fail("k, embed_dim and batch_size must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden dims must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return fail("confidence_threshold must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    pub fn mining_params(&self) -> MiningParams {
        let (rho, naive) = match self.variant {
            Variant::TripletNaive => (1.0, true),
            Variant::TripletHn => (1.0, false),
            _ => (self.rho, false),
        };
        MiningParams::new(self.margin, rho, self.batch_size, naive)
    }

    pub fn joint_params(&self) -> JointParams {
        JointParams { margin: self.margin, gamma: self.gamma, omega: self.omega }
    }

    /// Sets one field from its `key=value` spelling (keys as in [`canonical`](Self::canonical)).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "margin" => self.margin = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "omega" => self.omega = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden" => {
                self.hidden_dims = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "refresh_period" => self.refresh_period = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "confidence_threshold" => self.confidence_threshold = num(key, value)?,
            "renormalize_anchors" => self.renormalize_anchors = num(key, value)?,
            "hard_negative_scope" => self.hard_negative_scope = value.parse()?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Canonical `key=value` rendering, one per line.
    pub fn canonical(&self) -> String {
        let hidden: Vec<String> = self.hidden_dims.iter().map(usize::to_string).collect();
        format!(
            "variant={}\nmargin={:?}\ngamma={:?}\nomega={:?}\nk={}\nrho={:?}\nembed_dim={}\nhidden={}\n\
             batch_size={}\nrefresh_period={}\nmax_iterations={}\nlearning_rate={:?}\nseed={}\n\
             confidence_threshold={:?}\nrenormalize_anchors={}\nhard_negative_scope={}\n",
            self.variant,
            self.margin,
            self.gamma,
            self.omega,
            self.k,
            self.rho,
            self.embed_dim,
            hidden.join(","),
            self.batch_size,
            self.refresh_period,
            self.max_iterations,
            self.learning_rate,
            self.seed,
            self.confidence_threshold,
            self.renormalize_anchors,
            match self.hard_negative_scope {
                HardNegativeScope::PerCategory => "per-category",
                HardNegativeScope::Global => "global",
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    /// The objective the step descended: summed loss over `batch_size`, so
    /// slots the miner could not fill count as zero.
    pub batch_loss: f64,
    /// Batch members with non-zero loss under the current parameters.
    pub violators: usize,
    pub batch_len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub variant: Option<Variant>,
    pub records: Vec<LogRecord>,
    pub anchors_initialized_at: Option<usize>,
    pub early_stop: Option<usize>,
}

impl TrainLog {
    /// Tab-separated text log, one record per iteration.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let variant = self.variant.map_or("unknown", Variant::name);
        let mut out = String::from("# fgboot train log v1\niteration\tbatch_loss\tviolators\tvariant\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{:.9e}\t{}\t{}", r.iteration, r.batch_loss, r.violators, variant);
        }
        if let Some(it) = self.anchors_initialized_at {
            let _ = writeln!(out, "# anchors-initialized iteration={it}");
        }
        if let Some(it) = self.early_stop {
            let _ = writeln!(out, "# early-stop iteration={it} reason=mining-exhausted");
        }
        out
    }

    /// Mean batch loss over `[start, start + window)` records.
    pub fn mean_loss(&self, start: usize, window: usize) -> Option<f64> {
        let slice = self.records.get(start..(start + window).min(self.records.len()))?;
        if slice.is_empty() {
            return None;
        }
        Some(slice.iter().map(|r| r.batch_loss).sum::<f64>() / slice.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub anchors: Option<AnchorSet>,
    pub head: Option<SoftmaxHead>,
    pub config: TrainConfig,
    pub n_categories: usize,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean of per-class accuracies over the classes present in the test set.
    pub mean_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

impl TrainedModel {
    pub fn new(
        network: Network,
        anchors: Option<AnchorSet>,
        head: Option<SoftmaxHead>,
        config: TrainConfig,
        n_categories: usize,
        log: TrainLog,
    ) -> Result<Self> {
        if network.output_dim() != config.embed_dim {
            return Err(Error::config("network output dim differs from embed_dim"));
        }
        if let Some(a) = &anchors {
            if a.n_categories() != n_categories || a.dim() != config.embed_dim {
                return Err(Error::config("anchor set does not match the model"));
            }
        }
        if let Some(h) = &head {
            if h.n_categories() != n_categories || h.layer.fan_in != config.embed_dim {
                return Err(Error::config("softmax head does not match the model"));
            }
        }
        Ok(Self { network, anchors, head, config, n_categories, log })
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.network.forward(features)
    }

    pub fn embed_all(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        embed_features(&self.network, samples.iter().map(|s| s.features.as_slice()).collect())
    }

    pub fn score_embedding(&self, embedding: &[f64]) -> Result<ConfidenceVector> {
        if let Some(a) = &self.anchors {
            anchors::soft_vote(embedding, a, self.config.gamma)
        } else if let Some(h) = &self.head {
            Ok(ConfidenceVector(h.probabilities(embedding)))
        } else {
            Err(Error::State("model has neither anchors nor a classification head".into()))
        }
    }

    /// Category confidences for one (possibly unlabeled) sample.
    pub fn score(&self, features: &[f64]) -> Result<ConfidenceVector> {
        let e = self.embed(features)?;
        self.score_embedding(&e)
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        Ok(self.score(features)?.argmax())
    }

    pub fn evaluate(&self, testset: &[Sample]) -> Result<Evaluation> {
        if testset.is_empty() {
            return Err(Error::input("empty test set"));
        }
        let mut hits = vec![0usize; self.n_categories];
        let mut totals = vec![0usize; self.n_categories];
        let embeddings = self.embed_all(testset)?;
        for (s, e) in testset.iter().zip(&embeddings) {
            let label = s
                .label
                .ok_or_else(|| Error::input(format!("test sample {} is unlabeled", s.id)))?;
            if label >= self.n_categories {
                return Err(Error::input(format!("test label {label} unknown to the model")));
            }
            totals[label] += 1;
            if self.score_embedding(e)?.argmax() == label {
                hits[label] += 1;
            }
        }
        let per_class: Vec<Option<f64>> = hits
            .iter()
            .zip(&totals)
            .map(|(h, t)| (*t > 0).then(|| *h as f64 / *t as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(Evaluation {
            mean_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            overall: hits.iter().sum::<usize>() as f64 / testset.len() as f64,
            per_class,
        })
    }
}

fn embed_features(net: &Network, features: Vec<&[f64]>) -> Result<Vec<Vec<f64>>> {
    features.into_par_iter().map(|f| net.forward(f)).collect()
}

fn anchors_from_snapshot(
    index: &EmbeddingIndex,
    n_labeled: usize,
    n_categories: usize,
    cfg: &TrainConfig,
) -> Result<AnchorSet> {
    let embeddings = index.embeddings()[..n_labeled].to_vec();
    let labels: Vec<usize> = (0..n_labeled).map(|i| index.label(i).expect("labeled prefix")).collect();
    anchors::fit_anchors(&embeddings, &labels, n_categories, cfg.k, cfg.seed)
}

/// Trains one model. `hard_pool` members only ever act as triplet negatives;
/// the softmax variant ignores them.
pub fn train(dataset: &Dataset, hard_pool: &[HardNegative], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    dataset.validate()?;
    if let Some(s) = dataset.samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::input(format!("training sample {} is unlabeled", s.id)));
    }
    let present = dataset.labeled_counts().iter().filter(|c| **c > 0).count();
    if present < 2 {
        return Err(Error::config(format!("training needs at least 2 categories, found {present}")));
    }
    if let Some(h) = hard_pool.iter().find(|h| h.sample.features.len() != dataset.input_dim) {
        return Err(Error::input(format!("hard negative {} has wrong dimension", h.sample.id)));
    }

    let n = dataset.n_categories;
    let network = embednet::init_network(&cfg.layer_dims(dataset.input_dim), cfg.seed)?;
    let mut log = TrainLog { variant: Some(cfg.variant), ..TrainLog::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    if cfg.variant == Variant::Softmax {
        return train_softmax(dataset, network, cfg, log, &mut rng);
    }

    let labeled = &dataset.samples;
    let mut features: Vec<&[f64]> = labeled.iter().map(|s| s.features.as_slice()).collect();
    features.extend(hard_pool.iter().map(|h| h.sample.features.as_slice()));
    let ids: Vec<String> =
        labeled.iter().map(|s| s.id.clone()).chain(hard_pool.iter().map(|h| h.sample.id.clone())).collect();
    let labels: Vec<Option<usize>> =
        labeled.iter().map(|s| s.label).chain(hard_pool.iter().map(|_| None)).collect();
    let pool: Vec<PoolEntry> = hard_pool
        .iter()
        .enumerate()
        .map(|(i, h)| PoolEntry {
            index: labeled.len() + i,
            rejected_for: match cfg.hard_negative_scope {
                HardNegativeScope::PerCategory => h.rejected_for,
                HardNegativeScope::Global => None,
            },
        })
        .collect();

    let mining = cfg.mining_params();
    let joint = cfg.joint_params();
    let mut net = network;
    let mut anchor_set: Option<AnchorSet> = None;
    let mut index: Option<EmbeddingIndex> = None;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for it in 0..cfg.max_iterations {
        if it % cfg.refresh_period == 0 || index.is_none() {
            let snapshot = embed_features(&net, features.clone())?;
            let fresh = EmbeddingIndex::new(ids.clone(), snapshot, labels.clone())?;
            if cfg.variant == Variant::TripletA && anchor_set.is_none() && it >= cfg.refresh_period {
                anchor_set = Some(anchors_from_snapshot(&fresh, labeled.len(), n, cfg)?);
                log.anchors_initialized_at = Some(it);
            }
            index = Some(fresh);
        }
        let snapshot = index.as_ref().expect("refreshed above");
        let batch = triplet::mine_triplets(snapshot, &pool, &mining, &mut rng)?;
        if batch.triplets.is_empty() {
            log.early_stop = Some(it);
            break;
        }

        let mut grads = net.zero_grads();
        let mut anchor_grads = anchor_set.as_ref().map(AnchorSet::zeros_like);
        let mut batch_loss = 0.0;
        let mut violators = 0;
        for t in &batch.triplets {
            let tx = net.trace(features[t.reference])?;
            let tp = net.trace(features[t.positive])?;
            let tn = net.trace(features[t.negative])?;
            let (loss, gx, gp, gn) = match (&anchor_set, &mut anchor_grads) {
                (Some(a), Some(ag)) => {
                    let label = snapshot.label(t.reference).expect("references are labeled");
                    let j = anchors::joint_loss_and_grads(&tx.output, &tp.output, &tn.output, a, label, &joint)?;
                    for (acc, g) in ag.iter_mut().flatten().zip(j.anchors.iter().flatten()) {
                        crate::vecmath::axpy(acc, inv_batch, g);
                    }
                    (j.loss, j.x, j.p, j.n)
                }
                _ => {
                    let (l, g) = triplet::hinge_grads(&tx.output, &tp.output, &tn.output, cfg.margin);
                    (l, g.x, g.p, g.n)
                }
            };
            if loss > 0.0 {
                violators += 1;
            }
            batch_loss += loss;
            let scale = |g: Vec<f64>| g.into_iter().map(|v| v * inv_batch).collect::<Vec<_>>();
            net.accumulate_backward(&tx, &scale(gx), &mut grads)?;
            net.accumulate_backward(&tp, &scale(gp), &mut grads)?;
            net.accumulate_backward(&tn, &scale(gn), &mut grads)?;
        }
        net.sgd_step(&grads, cfg.learning_rate)?;
        if let (Some(a), Some(ag)) = (&mut anchor_set, &anchor_grads) {
            a.sgd_step(ag, cfg.learning_rate, cfg.renormalize_anchors);
        }
        log.records.push(LogRecord {
            iteration: it,
            batch_loss: batch_loss * inv_batch,
            violators,
            batch_len: batch.triplets.len(),
        });
    }

    let anchors = match anchor_set {
        Some(a) => a,
        None => {
            let snapshot = EmbeddingIndex::new(
                ids[..labeled.len()].to_vec(),
                embed_features(&net, features[..labeled.len()].to_vec())?,
                labels[..labeled.len()].to_vec(),
            )?;
            anchors_from_snapshot(&snapshot, labeled.len(), n, cfg)?
        }
    };
    TrainedModel::new(net, Some(anchors), None, cfg.clone(), n, log)
}

fn train_softmax(
    dataset: &Dataset,
    mut net: Network,
    cfg: &TrainConfig,
    mut log: TrainLog,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    let n = dataset.n_categories;
    let mut head = SoftmaxHead::new(cfg.embed_dim, n, cfg.seed.wrapping_add(1))?;
    let weight = 1.0 / cfg.batch_size as f64;
    for it in 0..cfg.max_iterations {
        let mut grads = net.zero_grads();
        let mut head_grads = head.zero_grads();
        let mut batch_loss = 0.0;
        let mut wrong = 0;
        for _ in 0..cfg.batch_size {
            let s = &dataset.samples[rng.random_range(0..dataset.samples.len())];
            let l = embednet::accumulate_softmax_head(&net, &head, s, weight, &mut grads, &mut head_grads)?;
            // loss above ln 2 means the true class has p < 1/2
            if l > std::f64::consts::LN_2 {
                wrong += 1;
            }
            batch_loss += l;
        }
        net.sgd_step(&grads, cfg.learning_rate)?;
        head.sgd_step(&head_grads, cfg.learning_rate)?;
        log.records.push(LogRecord {
            iteration: it,
            batch_loss: batch_loss * weight,
            violators: wrong,
            batch_len: cfg.batch_size,
        });
    }
    TrainedModel::new(net, None, Some(head), cfg.clone(), n, log)
}
