//! Datasets, synthetic data generation, persistence and 2-D export.
//!
//! # Dataset text format
//!
//! ```text
//! #name=<dataset name>            optional
//! #categories=<name>|<name>|...   optional
//! <input dim>,<N>
//! <id>,<label or blank>,<f_1>,...,<f_dim>
//! ```
//!
//! Other lines starting with `#` and blank lines are ignored. Features are
//! written with 17 significant digits so a save/load round trip is exact.
//! Hard-pool files use the same layout, with the label column holding the
//! category the sample was rejected for (blank when unscoped).
//!
//! # Checkpoint container (version 1)
//!
//! All integers and floats are little-endian; `u64` counts, `f64` values.
//!
//! ```text
//! magic        8 bytes  "FGBCKPT\0"
//! version      u32      1
//! n_categories u64
//! -- network
//! activation   u32      1 = tanh
//! seed         u64
//! n_dims       u64, then n_dims x u64 layer dims
//! per layer    fan_in*fan_out f64 weights (row-major, fan_in rows), fan_out f64 biases
//! -- train config
//! variant u8, margin f64, gamma f64, omega f64, k u64, rho f64, embed_dim u64,
//! n_hidden u64 + n_hidden x u64, batch_size u64, refresh_period u64,
//! max_iterations u64, learning_rate f64, seed u64, confidence_threshold f64,
//! renormalize_anchors u8, hard_negative_scope u8
//! -- anchors
//! present u8; if 1: k u64, dim u64, n u64, then per category: count u64, count*dim f64
//! -- softmax head
//! present u8; if 1: embed_dim u64, n u64, embed_dim*n f64 weights, n f64 biases
//! -- trailer
//! checksum     u64      FNV-1a over every preceding byte
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anchors::AnchorSet;
use crate::embednet::{Activation, Layer, Network, Sample, SoftmaxHead};
use crate::trainer::{HardNegativeScope, TrainConfig, TrainLog, TrainedModel, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_categories: usize,
    pub category_names: Vec<String>,
    pub input_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, n_categories: usize, input_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            n_categories,
            category_names: (0..n_categories).map(|c| format!("category-{c}")).collect(),
            input_dim,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_names.len() != self.n_categories {
            return Err(Error::input("category name count does not match N"));
        }
        for s in &self.samples {
            if s.features.len() != self.input_dim {
                return Err(Error::input(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    self.input_dim
                )));
            }
            if let Some(l) = s.label {
                if l >= self.n_categories {
                    return Err(Error::input(format!("sample {} has label {l} >= N", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self { samples, ..self.clone() }
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_categories];
        for l in self.samples.iter().filter_map(|s| s.label) {
            counts[l] += 1;
        }
        counts
    }
}

/// A human-rejected candidate used only as a triplet negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub sample: Sample,
    pub rejected_for: Option<usize>,
}

/// Parameters of the synthetic multi-modal benchmark.
///
/// Every category is a mixture of `modes_per_category` truncated Gaussian
/// blobs (standard deviation `mode_spread`, truncated at radius
/// `R = mode_spread * (sqrt(input_dim) + 2)`). Mode centers are drawn
/// uniformly from `[-inter_mode_distance, inter_mode_distance]^d`, rejecting
/// any center closer than `2R (1 - overlap)` to a center of another
/// category, so `overlap = 0` gives disjoint class supports.
///
/// Distractors come from `distractor_modes` extra blobs, each placed at
/// distance `distractor_offset` from a randomly chosen class mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub modes_per_category: usize,
    pub input_dim: usize,
    pub samples_per_mode: usize,
    pub test_per_mode: usize,
    pub candidates_per_mode: usize,
    pub mode_spread: f64,
    pub inter_mode_distance: f64,
    pub overlap: f64,
    /// Fraction of the candidate pool made of distractors, in `[0, 1)`.
    pub distractor_fraction: f64,
    pub distractor_modes: usize,
    pub distractor_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_categories: 8,
            modes_per_category: 3,
            input_dim: 8,
            samples_per_mode: 20,
            test_per_mode: 20,
            candidates_per_mode: 20,
            mode_spread: 0.25,
            inter_mode_distance: 4.0,
            overlap: 0.3,
            distractor_fraction: 0.3,
            distractor_modes: 8,
            distractor_offset: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_categories", self.n_categories),
            ("modes_per_category", self.modes_per_category),
            ("input_dim", self.input_dim),
            ("samples_per_mode", self.samples_per_mode),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.mode_spread > 0.0) || !(self.inter_mode_distance > 0.0) {
            return Err(Error::config("mode_spread and inter_mode_distance must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config(format!("overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return Err(Error::config("distractor_fraction must lie in [0, 1)"));
        }
        if self.distractor_fraction > 0.0 && self.distractor_modes == 0 {
            return Err(Error::config("distractors requested but distractor_modes = 0"));
        }
        Ok(())
    }

    pub fn truncation_radius(&self) -> f64 {
        self.mode_spread * ((self.input_dim as f64).sqrt() + 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    /// Real candidates; labels are the hidden ground truth.
    pub candidates: Dataset,
    /// Off-manifold candidates that belong to no category.
    pub distractors: Dataset,
    /// `mode_centers[c][m]`
    pub mode_centers: Vec<Vec<Vec<f64>>>,
}

fn blob_sample(center: &[f64], spread: f64, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = center.iter().map(|_| rng.sample::<f64, _>(StandardNormal) * spread).collect();
        if crate::vecmath::norm(&g) <= radius {
            return center.iter().zip(g).map(|(c, v)| c + v).collect();
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let radius = spec.truncation_radius();
    let min_gap = 2.0 * radius * (1.0 - spec.overlap);
    let l = spec.inter_mode_distance;

    let mut centers: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.n_categories];
    for m in 0..spec.modes_per_category {
        for c in 0..spec.n_categories {
            let mut placed = false;
            for _ in 0..100_000 {
                let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-l..=l)).collect();
                let ok = centers.iter().enumerate().filter(|(o, _)| *o != c).all(|(_, other)| {
                    other.iter().all(|u| crate::vecmath::sq_dist(u, &cand).sqrt() >= min_gap)
                });
                if ok {
                    centers[c].push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::config(format!(
                    "could not place mode {m} of category {c}; increase inter_mode_distance"
                )));
            }
        }
    }

    let draw_split = |per_mode: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::new();
        for (c, modes) in centers.iter().enumerate() {
            for (m, center) in modes.iter().enumerate() {
                for k in 0..per_mode {
                    let f = blob_sample(center, spec.mode_spread, radius, rng);
                    out.push(Sample::new(format!("{prefix}-c{c}-m{m}-{k}"), f, Some(c)));
                }
            }
        }
        out
    };
    let train = draw_split(spec.samples_per_mode, "train", &mut rng);
    let test = draw_split(spec.test_per_mode, "test", &mut rng);
    let mut pool = draw_split(spec.candidates_per_mode, "cand", &mut rng);

    let real = pool.len();
    let n_distractors = if spec.distractor_fraction > 0.0 {
        ((spec.distractor_fraction * real as f64) / (1.0 - spec.distractor_fraction)).round() as usize
    } else {
        0
    };
    let mut distractor_centers = Vec::with_capacity(spec.distractor_modes);
    if n_distractors > 0 {
        for _ in 0..spec.distractor_modes {
            let c = rng.random_range(0..spec.n_categories);
            let m = rng.random_range(0..spec.modes_per_category);
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let dir = crate::embednet::l2_normalize(&dir);
            distractor_centers
                .push(centers[c][m].iter().zip(&dir).map(|(x, u)| x + spec.distractor_offset * u).collect::<Vec<_>>());
        }
    }
    for k in 0..n_distractors {
        let center = &distractor_centers[k % distractor_centers.len()];
        let f = blob_sample(center, spec.mode_spread, radius, &mut rng);
        pool.push(Sample::new(format!("distractor-{k}"), f, None));
    }
    pool.shuffle(&mut rng);
    let mut candidates = Vec::new();
    let mut distractors = Vec::new();
    for (i, mut s) in pool.into_iter().enumerate() {
        s.id = format!("cand-{i:05}");
        if s.label.is_some() {
            candidates.push(s);
        } else {
            distractors.push(s);
        }
    }

    let n = spec.n_categories;
    Ok(SyntheticData {
        train: Dataset::new("synthetic-train", n, d, train)?,
        test: Dataset::new("synthetic-test", n, d, test)?,
        candidates: Dataset::new("synthetic-candidates", n, d, candidates)?,
        distractors: Dataset::new("synthetic-distractors", n, d, distractors)?,
        mode_centers: centers,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#name={}", ds.name);
    let _ = writeln!(out, "#categories={}", ds.category_names.join("|"));
    let _ = writeln!(out, "{},{}", ds.input_dim, ds.n_categories);
    for s in &ds.samples {
        out.push_str(&s.id);
        out.push(',');
        if let Some(l) = s.label {
            let _ = write!(out, "{l}");
        }
        for v in &s.features {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut names: Option<Vec<String>> = None;
    let mut header: Option<(usize, usize)> = None;
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if header.is_none() {
                if let Some(v) = meta.strip_prefix("name=") {
                    name = v.to_string();
                } else if let Some(v) = meta.strip_prefix("categories=") {
                    names = Some(if v.is_empty() { Vec::new() } else { v.split('|').map(str::to_string).collect() });
                }
            }
            continue;
        }
        let Some((dim, n)) = header else {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(err(lineno, "expected header '<dim>,<N>'".into()));
            }
            let dim = parts[0].parse::<usize>().map_err(|e| err(lineno, format!("bad dim: {e}")))?;
            let n = parts[1].parse::<usize>().map_err(|e| err(lineno, format!("bad N: {e}")))?;
            header = Some((dim, n));
            continue;
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err(
                lineno,
                format!("expected {} features, found {}", dim, fields.len().saturating_sub(2)),
            ));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(err(lineno, "empty sample id".into()));
        }
        let label = match fields[1].trim() {
            "" => None,
            s => {
                let l = s.parse::<usize>().map_err(|e| err(lineno, format!("bad label '{s}': {e}")))?;
                if l >= n {
                    return Err(err(lineno, format!("label {l} out of range for N = {n}")));
                }
                Some(l)
            }
        };
        let features = fields[2..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| err(lineno, format!("bad feature '{f}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample::new(id, features, label));
    }
    let (dim, n) = header.ok_or_else(|| err(text.lines().count().max(1), "missing header".into()))?;
    let category_names = match names {
        Some(v) if v.len() == n => v,
        Some(v) => return Err(err(1, format!("{} category names for N = {n}", v.len()))),
        None => (0..n).map(|c| format!("category-{c}")).collect(),
    };
    Ok(Dataset { name, n_categories: n, category_names, input_dim: dim, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, format_dataset(ds).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

pub fn save_hard_pool(pool: &[HardNegative], n_categories: usize, input_dim: usize, path: &Path) -> Result<()> {
    let samples = pool
        .iter()
        .map(|h| Sample::new(h.sample.id.clone(), h.sample.features.clone(), h.rejected_for))
        .collect();
    let ds = Dataset::new("hard-pool", n_categories, input_dim, samples)?;
    save_dataset(&ds, path)
}

pub fn load_hard_pool(path: &Path) -> Result<Vec<HardNegative>> {
    Ok(load_dataset(path)?
        .samples
        .into_iter()
        .map(|s| HardNegative { rejected_for: s.label, sample: Sample::unlabeled(s.id, s.features) })
        .collect())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // bounds every allocation by the bytes actually present
        usize::try_from(v)
            .ok()
            .filter(|v| *v <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible count {v}")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn encode_config(e: &mut Enc, c: &TrainConfig) {
    e.u8(c.variant.tag());
    e.f64(c.margin);
    e.f64(c.gamma);
    e.f64(c.omega);
    e.usize(c.k);
    e.f64(c.rho);
    e.usize(c.embed_dim);
    e.usize(c.hidden_dims.len());
    c.hidden_dims.iter().for_each(|h| e.usize(*h));
    e.usize(c.batch_size);
    e.usize(c.refresh_period);
    e.usize(c.max_iterations);
    e.f64(c.learning_rate);
    e.u64(c.seed);
    e.f64(c.confidence_threshold);
    e.u8(u8::from(c.renormalize_anchors));
    e.u8(c.hard_negative_scope.tag());
}

fn decode_config(d: &mut Dec) -> Result<TrainConfig> {
    let bad = |what: &str| Error::Checkpoint(format!("invalid {what}"));
    let variant = Variant::from_tag(d.u8()?).ok_or_else(|| bad("variant"))?;
    let margin = d.f64()?;
    let gamma = d.f64()?;
    let omega = d.f64()?;
    let k = d.usize()?;
    let rho = d.f64()?;
    let embed_dim = d.usize()?;
    let n_hidden = d.usize()?;
    let hidden_dims = (0..n_hidden).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
    Ok(TrainConfig {
        variant,
        margin,
        gamma,
        omega,
        k,
        rho,
        embed_dim,
        hidden_dims,
        batch_size: d.usize()?,
        refresh_period: d.usize()?,
        max_iterations: d.usize()?,
        learning_rate: d.f64()?,
        seed: d.u64()?,
        confidence_threshold: d.f64()?,
        renormalize_anchors: d.u8()? != 0,
        hard_negative_scope: HardNegativeScope::from_tag(d.u8()?).ok_or_else(|| bad("hard-negative scope"))?,
    })
}

pub fn encode_checkpoint(model: &TrainedModel) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.usize(model.n_categories);

    let net = &model.network;
    e.u32(net.activation().tag());
    e.u64(net.seed());
    e.usize(net.layer_dims().len());
    net.layer_dims().iter().for_each(|d| e.usize(*d));
    for layer in net.layers() {
        e.f64s(&layer.weights);
        e.f64s(&layer.bias);
    }

    encode_config(&mut e, &model.config);

    match &model.anchors {
        Some(a) => {
            e.u8(1);
            e.usize(a.k());
            e.usize(a.dim());
            e.usize(a.n_categories());
            for cat in a.points() {
                e.usize(cat.len());
                cat.iter().for_each(|u| e.f64s(u));
            }
        }
        None => e.u8(0),
    }
    match &model.head {
        Some(h) => {
            e.u8(1);
            e.usize(h.layer.fan_in);
            e.usize(h.layer.fan_out);
            e.f64s(&h.layer.weights);
            e.f64s(&h.layer.bias);
        }
        None => e.u8(0),
    }
    let sum = fnv1a(&e.0);
    e.u64(sum);
    e.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut d = Dec { buf: bytes, pos: 8 };
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut d = Dec { buf: body, pos: d.pos };

    let n_categories = d.usize()?;
    let activation = Activation::from_tag(d.u32()?).ok_or_else(|| Error::Checkpoint("unknown activation".into()))?;
    let seed = d.u64()?;
    let n_dims = d.usize()?;
    let dims = (0..n_dims).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let n = fan_in.checked_mul(fan_out).ok_or_else(|| Error::Checkpoint("layer too large".into()))?;
        let weights = d.f64s(n)?;
        let bias = d.f64s(fan_out)?;
        layers.push(Layer { fan_in, fan_out, weights, bias });
    }
    let network = Network::from_parts(dims, activation, seed, layers)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = decode_config(&mut d)?;

    let anchors = match d.u8()? {
        0 => None,
        1 => {
            let k = d.usize()?;
            let dim = d.usize()?;
            let n = d.usize()?;
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                let count = d.usize()?;
                points.push((0..count).map(|_| d.f64s(dim)).collect::<Result<Vec<_>>>()?);
            }
            Some(AnchorSet::new(k, dim, points).map_err(|e| Error::Checkpoint(e.to_string()))?)
        }
        t => return Err(Error::Checkpoint(format!("bad anchor tag {t}"))),
    };
    let head = match d.u8()? {
        0 => None,
        1 => {
            let fan_in = d.usize()?;
            let fan_out = d.usize()?;
            let weights = d.f64s(fan_in * fan_out)?;
            let bias = d.f64s(fan_out)?;
            Some(SoftmaxHead { layer: Layer { fan_in, fan_out, weights, bias } })
        }
        t => return Err(Error::Checkpoint(format!("bad head tag {t}"))),
    };
    if d.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    TrainedModel::new(network, anchors, head, config, n_categories, TrainLog::default())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(&fs::read(path)?)
}

/// Projects embeddings onto their top two principal directions.
///
/// Each direction's largest-magnitude component is made positive. With a
/// one-dimensional input the second coordinate is zero.
pub fn project_2d(embeddings: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if embeddings.len() < 2 {
        return Err(Error::input("2-D projection needs at least 2 points"));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::input("embeddings differ in dimension"));
    }
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        crate::vecmath::axpy(&mut mean, 1.0, e);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<Vec<f64>> = embeddings.iter().map(|e| crate::vecmath::sub(e, &mean)).collect();

    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let directions: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let mut big = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[big].abs() {
                    big = i;
                }
            }
            if v[big] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(centered
        .iter()
        .map(|c| {
            let x = crate::vecmath::dot(c, &directions[0]);
            let y = directions.get(1).map_or(0.0, |v| crate::vecmath::dot(c, v));
            [x, y]
        })
        .collect())
}

pub fn format_projection(ids: &[String], coords: &[[f64; 2]]) -> String {
    let mut out = String::from("id,x,y\n");
    for (id, [x, y]) in ids.iter().zip(coords) {
        let _ = writeln!(out, "{id},{x:.16e},{y:.16e}");
    }
    out
}
