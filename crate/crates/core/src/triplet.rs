//! Triplet hinge loss, hard-negative predicate and triplet mining over an
//! embedding snapshot.

use rand::Rng;

use crate::vecmath::{norm, sq_dist, sub};
use crate::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_RHO: f64 = 0.6;
pub const DEFAULT_BATCH_SIZE: usize = 50;
pub const DEFAULT_DRAWS_PER_REF: usize = 50;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NegativeSource {
    OtherCategory,
    HumanHardNegative,
}

/// A mined `(reference, positive, negative)` triplet. Members are indices
/// into the [`EmbeddingIndex`] the triplet was mined from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub reference: usize,
    pub positive: usize,
    pub negative: usize,
    pub neg_source: NegativeSource,
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::input(format!("{name} is not unit-norm (|{name}| = {n})")));
    }
    Ok(())
}

fn check_triplet(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> Result<()> {
    if fx.len() != fp.len() || fx.len() != fn_.len() {
        return Err(Error::input("triplet embeddings differ in dimension"));
    }
    if !(m >= 0.0) {
        return Err(Error::input(format!("margin must be non-negative, got {m}")));
    }
    check_unit("f(x)", fx)?;
    check_unit("f(x_p)", fp)?;
    check_unit("f(x_n)", fn_)
}

pub(crate) fn hinge(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> f64 {
    (sq_dist(fx, fp) - sq_dist(fx, fn_) + m).max(0.0)
}

/// `max(0, |fx - fp|^2 - |fx - fn|^2 + m)` on unit-norm embeddings.
pub fn triplet_loss(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> Result<f64> {
    check_triplet(fx, fp, fn_, m)?;
    Ok(hinge(fx, fp, fn_, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub n: Vec<f64>,
}

pub(crate) fn hinge_grads(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> (f64, TripletGrads) {
    let loss = hinge(fx, fp, fn_, m);
    let d = fx.len();
    if loss <= 0.0 {
        let z = vec![0.0; d];
        return (0.0, TripletGrads { x: z.clone(), p: z.clone(), n: z });
    }
    let two = |a: &[f64], b: &[f64]| sub(a, b).into_iter().map(|v| 2.0 * v).collect::<Vec<_>>();
    (loss, TripletGrads { x: two(fn_, fp), p: two(fp, fx), n: two(fx, fn_) })
}

/// Gradients of [`triplet_loss`] with respect to the three (normalised)
/// embeddings; all zero when the hinge is inactive.
pub fn triplet_grads(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> Result<TripletGrads> {
    check_triplet(fx, fp, fn_, m)?;
    Ok(hinge_grads(fx, fp, fn_, m).1)
}

/// True iff the triplet has strictly positive loss.
pub fn is_hard_negative(fx: &[f64], fp: &[f64], fn_: &[f64], m: f64) -> Result<bool> {
    Ok(triplet_loss(fx, fp, fn_, m)? > 0.0)
}

/// Immutable snapshot of embeddings used for quasi-online mining.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    /// Members of each category, ascending index.
    classes: Vec<Vec<usize>>,
    /// Labeled indices grouped by category, with each category's offset.
    grouped: Vec<usize>,
    offsets: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, embeddings: Vec<Vec<f64>>, labels: Vec<Option<usize>>) -> Result<Self> {
        if ids.len() != embeddings.len() || ids.len() != labels.len() {
            return Err(Error::input("ids, embeddings and labels differ in length"));
        }
        if let Some(first) = embeddings.first() {
            let d = first.len();
            for (id, e) in ids.iter().zip(&embeddings) {
                if e.len() != d {
                    return Err(Error::input(format!("embedding {id} has wrong dimension")));
                }
                check_unit(id, e)?;
            }
        }
        let n_classes = labels.iter().flatten().map(|l| l + 1).max().unwrap_or(0);
        let mut classes = vec![Vec::new(); n_classes];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                classes[*l].push(i);
            }
        }
        let mut grouped = Vec::new();
        let mut offsets = Vec::with_capacity(n_classes);
        for c in &classes {
            offsets.push(grouped.len());
            grouped.extend_from_slice(c);
        }
        Ok(Self { ids, embeddings, labels, classes, grouped, offsets })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn class_members(&self, c: usize) -> &[usize] {
        self.classes.get(c).map_or(&[], Vec::as_slice)
    }

    pub fn n_nonempty_classes(&self) -> usize {
        self.classes.iter().filter(|c| !c.is_empty()).count()
    }

    /// Squared Euclidean distance between two indexed embeddings.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            0.0
        } else {
            sq_dist(&self.embeddings[a], &self.embeddings[b])
        }
    }

    /// Same-category members except `reference`, nearest first (ties by index).
    pub fn same_class_by_distance(&self, reference: usize) -> Result<Vec<usize>> {
        let label = self.labels[reference]
            .ok_or_else(|| Error::Sampling(format!("reference {} is unlabeled", self.ids[reference])))?;
        let mut others: Vec<(f64, usize)> = self.classes[label]
            .iter()
            .filter(|&&j| j != reference)
            .map(|&j| (self.distance(reference, j), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(others.into_iter().map(|(_, j)| j).collect())
    }

    fn local_positive_candidates(&self, reference: usize, rho: f64) -> Result<Vec<usize>> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1], got {rho}")));
        }
        let sorted = self.same_class_by_distance(reference)?;
        if sorted.is_empty() {
            return Err(Error::Sampling(format!(
                "category of {} has a single member",
                self.ids[reference]
            )));
        }
        let take = ((rho * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Ok(sorted[..take].to_vec())
    }

    fn random_other_category<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Option<usize> {
        let own = self.classes[label].len();
        let total = self.grouped.len();
        if total <= own {
            return None;
        }
        let mut r = rng.random_range(0..total - own);
        if r >= self.offsets[label] {
            r += own;
        }
        Some(self.grouped[r])
    }
}

/// Draws a positive uniformly from the `ceil(rho * |S|)` nearest same-category
/// neighbours of `reference`.
pub fn sample_local_positive<R: Rng + ?Sized>(
    index: &EmbeddingIndex,
    reference: usize,
    rho: f64,
    rng: &mut R,
) -> Result<usize> {
    let candidates = index.local_positive_candidates(reference, rho)?;
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// A human-marked false positive in the index. `rejected_for` is the category
/// the labeler rejected it for; `None` makes it a negative for every category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolEntry {
    pub index: usize,
    pub rejected_for: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningParams {
    pub margin: f64,
    pub rho: f64,
    pub batch_size: usize,
    /// Skip both the locality and the hardness filter.
    pub naive: bool,
    pub max_draws_per_ref: usize,
    pub max_ref_draws: usize,
}

impl MiningParams {
    pub fn new(margin: f64, rho: f64, batch_size: usize, naive: bool) -> Self {
        Self {
            margin,
            rho,
            batch_size,
            naive,
            max_draws_per_ref: DEFAULT_DRAWS_PER_REF,
            max_ref_draws: 20 * batch_size,
        }
    }
}

impl Default for MiningParams {
    fn default() -> Self {
        Self::new(DEFAULT_MARGIN, DEFAULT_RHO, DEFAULT_BATCH_SIZE, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub triplets: Vec<Triplet>,
    /// The attempt budget ran out before the batch filled.
    pub exhausted: bool,
}

struct PoolBuckets {
    global: Vec<usize>,
    per_class: Vec<Vec<usize>>,
}

impl PoolBuckets {
    fn new(pool: &[PoolEntry], n_classes: usize) -> Self {
        let mut global = Vec::new();
        let mut per_class = vec![Vec::new(); n_classes];
        for e in pool {
            match e.rejected_for {
                Some(c) if c < n_classes => per_class[c].push(e.index),
                Some(_) => {}
                None => global.push(e.index),
            }
        }
        Self { global, per_class }
    }

    fn count(&self, label: usize) -> usize {
        self.global.len() + self.per_class[label].len()
    }

    fn draw<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> usize {
        let r = rng.random_range(0..self.count(label));
        if r < self.global.len() {
            self.global[r]
        } else {
            self.per_class[label][r - self.global.len()]
        }
    }
}

/// Fills one batch of triplets from an embedding snapshot.
///
/// For each uniformly drawn reference a positive is drawn from its local
/// region, then negatives are drawn (from other categories or, with equal
/// probability when available, from the hard pool) until one violates the
/// margin. References that yield no violator within `max_draws_per_ref`
/// draws are abandoned.
pub fn mine_triplets<R: Rng + ?Sized>(
    index: &EmbeddingIndex,
    pool: &[PoolEntry],
    params: &MiningParams,
    rng: &mut R,
) -> Result<MinedBatch> {
    if index.n_nonempty_classes() < 2 {
        return Err(Error::config("triplet mining needs at least 2 categories"));
    }
    for e in pool {
        if e.index >= index.len() {
            return Err(Error::input(format!("pool index {} out of range", e.index)));
        }
    }
    let refs: Vec<usize> = index
        .classes
        .iter()
        .filter(|c| c.len() >= 2)
        .flat_map(|c| c.iter().copied())
        .collect();
    let buckets = PoolBuckets::new(pool, index.classes.len());
    let mut triplets = Vec::with_capacity(params.batch_size);
    if refs.is_empty() {
        return Ok(MinedBatch { triplets, exhausted: true });
    }

    let rho = if params.naive { 1.0 } else { params.rho };
    let draws = if params.naive { 1 } else { params.max_draws_per_ref.max(1) };
    let mut ref_draws = 0;
    while triplets.len() < params.batch_size && ref_draws < params.max_ref_draws {
        ref_draws += 1;
        let reference = refs[rng.random_range(0..refs.len())];
        let label = index.labels[reference].expect("refs are labeled");
        let positive = sample_local_positive(index, reference, rho, rng)?;
        let pooled = buckets.count(label);
        for _ in 0..draws {
            let (negative, neg_source) = if pooled > 0 && rng.random_bool(0.5) {
                (buckets.draw(label, rng), NegativeSource::HumanHardNegative)
            } else {
                match index.random_other_category(label, rng) {
                    Some(n) => (n, NegativeSource::OtherCategory),
                    None => continue,
                }
            };
            let hard = hinge(
                index.embedding(reference),
                index.embedding(positive),
                index.embedding(negative),
                params.margin,
            ) > 0.0;
            if params.naive || hard {
                triplets.push(Triplet { reference, positive, negative, neg_source });
                break;
            }
        }
    }
    let exhausted = triplets.len() < params.batch_size;
    Ok(MinedBatch { triplets, exhausted })
}

/// Within-class spread versus the global-sampling bound `2 (D^2 - m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldBound {
    pub max_within_sq: f64,
    /// Largest between-class (non-squared) distance `D`.
    pub max_between: f64,
    pub bound: f64,
}

pub fn manifold_bound(embeddings: &[Vec<f64>], labels: &[usize], m: f64) -> Result<ManifoldBound> {
    if embeddings.len() != labels.len() {
        return Err(Error::input("embeddings and labels differ in length"));
    }
    let mut max_within_sq = 0.0f64;
    let mut max_between_sq = 0.0f64;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = sq_dist(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                max_within_sq = max_within_sq.max(d);
            } else {
                max_between_sq = max_between_sq.max(d);
            }
        }
    }
    Ok(ManifoldBound {
        max_within_sq,
        max_between: max_between_sq.sqrt(),
        bound: 2.0 * (max_between_sq - m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::l2_normalize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        // fx = fp, |fx - fn|^2 = 0.5
        let fx = [1.0, 0.0];
        let fn_ = [0.75, (1.0f64 - 0.75 * 0.75).sqrt()];
        assert!((sq_dist(&fx, &fn_) - 0.5).abs() < 1e-12);
        assert_eq!(triplet_loss(&fx, &fx, &fn_, 0.2).unwrap(), 0.0);

        let l = triplet_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], 0.2).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        assert_eq!(DEFAULT_MARGIN, 0.2);
    }

    #[test]
    fn loss_rejects_non_unit() {
        assert!(matches!(triplet_loss(&[1.0, 0.1], &[1.0, 0.0], &[0.0, 1.0], 0.2), Err(Error::Input(_))));
        assert!(triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn grads_examples() {
        let g = triplet_grads(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], 0.2).unwrap();
        assert_eq!(g.x, vec![0.0, 0.0]);
        assert_eq!(g.p, vec![-2.0, 2.0]);
        assert_eq!(g.n, vec![2.0, -2.0]);

        let g = triplet_grads(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.2).unwrap();
        assert!(g.x.iter().chain(&g.p).chain(&g.n).all(|v| *v == 0.0));
    }

    #[test]
    fn hard_negative_predicate() {
        let fx = [1.0, 0.0];
        let fp = l2_normalize(&[1.0, 0.3]);
        assert!(!is_hard_negative(&fx, &fx, &[-1.0, 0.0], 0.2).unwrap());
        assert!(is_hard_negative(&fx, &fp, &fp, 0.2).unwrap());
        // |fx - fn|^2 = |fx - fp|^2 + m exactly: 2 - 0 + 0 with fp = fx, m = 2
        assert!(!is_hard_negative(&fx, &fx, &[-1.0, 0.0], 4.0).unwrap());
        assert_eq!(hinge(&fx, &fx, &[-1.0, 0.0], 4.0), 0.0);
    }

    fn ring_index(n_per_class: usize, classes: usize) -> EmbeddingIndex {
        let mut ids = Vec::new();
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for k in 0..n_per_class {
                let theta = c as f64 * 1.3 + k as f64 * 0.01;
                ids.push(format!("c{c}-{k}"));
                emb.push(vec![theta.cos(), theta.sin()]);
                labels.push(Some(c));
            }
        }
        EmbeddingIndex::new(ids, emb, labels).unwrap()
    }

    #[test]
    fn local_positive_region() {
        let index = ring_index(11, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sorted = index.same_class_by_distance(0).unwrap();
        assert_eq!(sorted.len(), 10);
        assert_eq!(index.local_positive_candidates(0, 0.6).unwrap(), sorted[..6].to_vec());
        assert_eq!(index.local_positive_candidates(0, 1.0).unwrap(), sorted);
        for _ in 0..200 {
            let p = sample_local_positive(&index, 0, 0.6, &mut rng).unwrap();
            assert!(sorted[..6].contains(&p));
        }

        let pair = ring_index(2, 2);
        for rho in [0.01, 0.5, 1.0] {
            assert_eq!(sample_local_positive(&pair, 0, rho, &mut rng).unwrap(), 1);
        }

        let single = ring_index(1, 2);
        assert!(matches!(sample_local_positive(&single, 0, 0.6, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn mining_without_pool_uses_other_categories() {
        let index = ring_index(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MiningParams::new(10.0, 0.6, 50, false);
        let batch = mine_triplets(&index, &[], &params, &mut rng).unwrap();
        assert_eq!(batch.triplets.len(), 50);
        assert!(!batch.exhausted);
        for t in &batch.triplets {
            assert_eq!(t.neg_source, NegativeSource::OtherCategory);
            assert_ne!(index.label(t.negative), index.label(t.reference));
            assert_eq!(index.label(t.positive), index.label(t.reference));
        }
    }

    #[test]
    fn mining_separated_embedding_is_exhausted() {
        let mut ids = Vec::new();
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for k in 0..5 {
            ids.push(format!("a{k}"));
            emb.push(vec![1.0, 0.0]);
            labels.push(Some(0));
            ids.push(format!("b{k}"));
            emb.push(vec![-1.0, 0.0]);
            labels.push(Some(1));
        }
        let index = EmbeddingIndex::new(ids, emb, labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = mine_triplets(&index, &[], &MiningParams::default(), &mut rng).unwrap();
        assert!(batch.exhausted);
        assert!(batch.triplets.is_empty());
    }

    #[test]
    fn mining_needs_two_categories() {
        let index = ring_index(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            mine_triplets(&index, &[], &MiningParams::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scoped_pool_entries_only_serve_their_category() {
        let mut index = ring_index(6, 2);
        let mut ids = index.ids.clone();
        let mut emb = index.embeddings.clone();
        let mut labels = index.labels.clone();
        ids.push("h".into());
        emb.push(vec![1.0, 0.0]);
        labels.push(None);
        index = EmbeddingIndex::new(ids, emb, labels).unwrap();
        let pool = [PoolEntry { index: 12, rejected_for: Some(1) }];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = MiningParams::new(10.0, 1.0, 400, false);
        let batch = mine_triplets(&index, &pool, &params, &mut rng).unwrap();
        for t in &batch.triplets {
            if t.neg_source == NegativeSource::HumanHardNegative {
                assert_eq!(index.label(t.reference), Some(1));
            }
        }
        assert!(batch.triplets.iter().any(|t| t.neg_source == NegativeSource::HumanHardNegative));
    }

    #[test]
    fn bound_report() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let b = manifold_bound(&emb, &[0, 0, 1], 0.2).unwrap();
        assert!((b.max_within_sq - 2.0).abs() < 1e-12);
        assert!((b.max_between - 2.0).abs() < 1e-12);
        assert!((b.bound - 2.0 * (4.0 - 0.2)).abs() < 1e-12);
    }
}
