//! Per-category anchor points: K-means initialisation, soft-voting
//! confidences, the logistic classification loss and the joint
//! triplet + classification loss used to learn anchors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::triplet::{hinge_grads, triplet_loss};
use crate::vecmath::{axpy, log_sum_exp, sq_dist, sub};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_GAMMA: f64 = 5.0;
pub const DEFAULT_OMEGA: f64 = 0.1;
pub const KMEANS_MAX_ITERS: usize = 100;
const PROB_FLOOR: f64 = 1e-300;

/// Anchor points `u_ij`, stored category-major. A category may hold fewer
/// than `k` anchors when it had fewer samples than `k` at fitting time.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    k: usize,
    dim: usize,
    points: Vec<Vec<Vec<f64>>>,
}

impl AnchorSet {
    pub fn new(k: usize, dim: usize, points: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("anchor set needs at least one category"));
        }
        for (i, cat) in points.iter().enumerate() {
            if cat.is_empty() || cat.len() > k {
                return Err(Error::input(format!(
                    "category {i} has {} anchors, expected 1..={k}",
                    cat.len()
                )));
            }
            if cat.iter().any(|u| u.len() != dim || u.iter().any(|v| !v.is_finite())) {
                return Err(Error::input(format!("category {i} has a malformed anchor")));
            }
        }
        Ok(Self { k, dim, points })
    }

    pub fn n_categories(&self) -> usize {
        self.points.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Anchors actually held by category `i` (the clamped `K'`).
    pub fn anchors_in(&self, i: usize) -> usize {
        self.points[i].len()
    }

    pub fn category(&self, i: usize) -> &[Vec<f64>] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<Vec<f64>>] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vec<Vec<f64>>] {
        &mut self.points
    }

    pub fn zeros_like(&self) -> Vec<Vec<Vec<f64>>> {
        self.points.iter().map(|c| c.iter().map(|u| vec![0.0; u.len()]).collect()).collect()
    }

    /// `u <- u - lr * g`, optionally projecting each anchor back to the unit sphere.
    pub fn sgd_step(&mut self, grads: &[Vec<Vec<f64>>], lr: f64, renormalize: bool) {
        for (cat, gcat) in self.points.iter_mut().zip(grads) {
            for (u, g) in cat.iter_mut().zip(gcat) {
                axpy(u, -lr, g);
                if renormalize {
                    *u = crate::embednet::l2_normalize(u);
                }
            }
        }
    }

    /// `-gamma |f - u_ij|^2` for every anchor, category-major.
    fn logits(&self, fx: &[f64], gamma: f64) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|cat| cat.iter().map(|u| -gamma * sq_dist(fx, u)).collect())
            .collect()
    }
}

/// Per-category probabilities; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector(pub Vec<f64>);

impl ConfidenceVector {
    /// Highest-probability category, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after each assignment step, starting with the seeding.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// Lloyd's algorithm from farthest-point seeding.
///
/// The first center is a seed-chosen point; each following center is the
/// point farthest from the chosen ones (ties to the lowest index). Runs until
/// assignments stop changing or [`KMEANS_MAX_ITERS`] iterations. With fewer
/// points than `k`, returns one center per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::input("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::config("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::input("k-means points differ in dimension"));
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = rng.random_range(0..points.len());
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mut far = 0;
        for (i, d) in nearest.iter().enumerate() {
            if *d > nearest[far] {
                far = i;
            }
        }
        centers.push(points[far].clone());
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[far]));
        }
    }

    let (mut assignments, mut dists) = assign(points, &centers);
    let mut objective_trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // reseed at the point farthest from its current center
                let mut far = 0;
                for (i, d) in dists.iter().enumerate() {
                    if *d > dists[far] {
                        far = i;
                    }
                }
                centers[j] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        let (next, next_dists) = assign(points, &centers);
        objective_trace.push(next_dists.iter().sum());
        dists = next_dists;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult { centers, assignments, objective_trace, iterations })
}

/// Fits `k` anchors per category by running [`kmeans`] on each category's
/// embeddings. Every category in `0..n_categories` must be present.
pub fn fit_anchors(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_categories: usize,
    k: usize,
    seed: u64,
) -> Result<AnchorSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::input("embeddings and labels differ in length"));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (e, &l) in embeddings.iter().zip(labels) {
        if l >= n_categories {
            return Err(Error::input(format!("label {l} out of range for {n_categories} categories")));
        }
        by_class.entry(l).or_default().push(e.clone());
    }
    let mut points = Vec::with_capacity(n_categories);
    for c in 0..n_categories {
        let members = by_class
            .get(&c)
            .ok_or_else(|| Error::input(format!("category {c} has no samples")))?;
        let fit = kmeans(members, k, seed.wrapping_add(c as u64))?;
        points.push(fit.centers);
    }
    AnchorSet::new(k, dim, points)
}

fn check_query(fx: &[f64], anchors: &AnchorSet, gamma: f64) -> Result<()> {
    if fx.len() != anchors.dim() {
        return Err(Error::input(format!(
            "embedding has {} dims, anchors have {}",
            fx.len(),
            anchors.dim()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::input(format!("gamma must be non-negative, got {gamma}")));
    }
    Ok(())
}

/// Per-category log-sum-exp of anchor logits and the total.
fn category_lse(logits: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let per: Vec<f64> = logits.iter().map(|c| log_sum_exp(c)).collect();
    let total = log_sum_exp(&per);
    (per, total)
}

/// Soft-voting confidences:
/// `p_i = sum_j exp(-gamma |f - u_ij|^2) / sum_l sum_j exp(-gamma |f - u_lj|^2)`.
pub fn soft_vote(fx: &[f64], anchors: &AnchorSet, gamma: f64) -> Result<ConfidenceVector> {
    check_query(fx, anchors, gamma)?;
    let (per, total) = category_lse(&anchors.logits(fx, gamma));
    Ok(ConfidenceVector(per.into_iter().map(|l| (l - total).exp()).collect()))
}

pub fn predict(fx: &[f64], anchors: &AnchorSet, gamma: f64) -> Result<usize> {
    Ok(soft_vote(fx, anchors, gamma)?.argmax())
}

/// `-ln p_label`, with `p` floored at 1e-300.
pub fn classification_loss(fx: &[f64], anchors: &AnchorSet, gamma: f64, label: usize) -> Result<f64> {
    check_query(fx, anchors, gamma)?;
    if label >= anchors.n_categories() {
        return Err(Error::input(format!(
            "label {label} out of range for {} categories",
            anchors.n_categories()
        )));
    }
    let (per, total) = category_lse(&anchors.logits(fx, gamma));
    Ok(-(per[label] - total).max(PROB_FLOOR.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointParams {
    pub margin: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl Default for JointParams {
    fn default() -> Self {
        Self { margin: crate::triplet::DEFAULT_MARGIN, gamma: DEFAULT_GAMMA, omega: DEFAULT_OMEGA }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    pub loss: f64,
    pub triplet_loss: f64,
    pub classification_loss: f64,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub n: Vec<f64>,
    /// Same layout as [`AnchorSet::points`].
    pub anchors: Vec<Vec<Vec<f64>>>,
}

/// `omega * L_triplet(x, x_p, x_n) + (1 - omega) * L_cls(x)` and its
/// gradients. The classification term only involves the reference.
pub fn joint_loss_and_grads(
    fx: &[f64],
    fp: &[f64],
    fn_: &[f64],
    anchors: &AnchorSet,
    label: usize,
    params: &JointParams,
) -> Result<JointGrads> {
    if !(0.0..=1.0).contains(&params.omega) {
        return Err(Error::config(format!("omega must lie in [0, 1], got {}", params.omega)));
    }
    // validates unit norms and margin
    triplet_loss(fx, fp, fn_, params.margin)?;
    let cls = classification_loss(fx, anchors, params.gamma, label)?;
    let (tl, tg) = hinge_grads(fx, fp, fn_, params.margin);
    let w = params.omega;

    let mut gx: Vec<f64> = tg.x.iter().map(|v| w * v).collect();
    let gp: Vec<f64> = tg.p.iter().map(|v| w * v).collect();
    let gn: Vec<f64> = tg.n.iter().map(|v| w * v).collect();
    let mut ga = anchors.zeros_like();

    let cw = 1.0 - w;
    let floored = -cls <= PROB_FLOOR.ln();
    if cw > 0.0 && !floored {
        let logits = anchors.logits(fx, params.gamma);
        let (per, total) = category_lse(&logits);
        // dL/dlogit_ij = softmax_all_ij - [i = label] softmax_label_ij
        for (i, cat) in anchors.points().iter().enumerate() {
            for (j, u) in cat.iter().enumerate() {
                let mut coef = (logits[i][j] - total).exp();
                if i == label {
                    coef -= (logits[i][j] - per[i]).exp();
                }
                // dlogit/df = -2 gamma (f - u), dlogit/du = 2 gamma (f - u)
                let diff = sub(fx, u);
                let s = 2.0 * params.gamma * coef * cw;
                axpy(&mut gx, -s, &diff);
                axpy(&mut ga[i][j], s, &diff);
            }
        }
    }
    Ok(JointGrads {
        loss: w * tl + cw * cls,
        triplet_loss: tl,
        classification_loss: cls,
        x: gx,
        p: gp,
        n: gn,
        anchors: ga,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<Vec<Vec<f64>>>) -> AnchorSet {
        let k = points.iter().map(Vec::len).max().unwrap();
        let dim = points[0][0].len();
        AnchorSet::new(k, dim, points).unwrap()
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let r = kmeans(&pts, 1, 0).unwrap();
        assert!((r.centers[0][0] - 3.0).abs() < 1e-15);
        assert!((r.centers[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_k_distinct_points() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let r = kmeans(&pts, 3, 9).unwrap();
        assert_eq!(r.objective(), 0.0);
        let mut c: Vec<f64> = r.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 1.0, 5.0]);
    }

    #[test]
    fn kmeans_clamps_and_errors() {
        let r = kmeans(&[vec![1.0], vec![2.0]], 3, 0).unwrap();
        assert_eq!(r.centers.len(), 2);
        assert!(matches!(kmeans(&[], 2, 0), Err(Error::Input(_))));
    }

    #[test]
    fn fit_anchors_clamps_per_category() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.6, 0.8], vec![0.8, 0.6]];
        let labels = [0, 0, 1, 2, 2];
        let a = fit_anchors(&emb, &labels, 3, 3, 1).unwrap();
        assert_eq!(a.anchors_in(0), 2);
        assert_eq!(a.anchors_in(1), 1);
        assert_eq!(a.category(1)[0], vec![-1.0, 0.0]);
        assert!(matches!(fit_anchors(&emb, &labels, 4, 3, 1), Err(Error::Input(_))));
        assert_eq!(DEFAULT_K, 3);
    }

    #[test]
    fn soft_vote_cases() {
        let a = set(vec![vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]]);
        let p = soft_vote(&[0.0, 1.0], &a, DEFAULT_GAMMA).unwrap();
        assert!((p.0[0] - 0.5).abs() < 1e-15 && (p.0[1] - 0.5).abs() < 1e-15);

        let p = soft_vote(&[1.0, 0.0], &a, 0.0).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
        assert_eq!(DEFAULT_GAMMA, 5.0);
        assert!(soft_vote(&[1.0], &a, 1.0).is_err());
        assert!(soft_vote(&[1.0, 0.0], &a, -1.0).is_err());
    }

    #[test]
    fn predict_cases() {
        let a = set(vec![
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![-1.0, 0.0]],
        ]);
        assert_eq!(predict(&[-1.0, 0.0], &a, 1e3).unwrap(), 2);
        // equidistant from categories 0 and 1
        let q = crate::embednet::l2_normalize(&[1.0, 1.0]);
        assert_eq!(predict(&q, &a, 5.0).unwrap(), 0);
        let one = set(vec![vec![vec![0.0, 1.0]]]);
        assert_eq!(predict(&[1.0, 0.0], &one, 5.0).unwrap(), 0);
    }

    #[test]
    fn classification_loss_cases() {
        let a = set(vec![vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]]);
        let l = classification_loss(&[0.0, 1.0], &a, 5.0, 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = classification_loss(&[1.0, 0.0], &a, 50.0, 0).unwrap();
        assert!(l < 1e-40);
        let four = set(vec![
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![-1.0, 0.0]],
            vec![vec![0.0, -1.0]],
        ]);
        let l = classification_loss(&[0.6, 0.8], &four, 0.0, 3).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(classification_loss(&[0.6, 0.8], &four, 1.0, 4), Err(Error::Input(_))));
        // floored probability
        let l = classification_loss(&[1.0, 0.0], &a, 1e6, 1).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn joint_omega_one_is_triplet() {
        let a = set(vec![vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]]);
        let params = JointParams { omega: 1.0, ..JointParams::default() };
        let g = joint_loss_and_grads(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &a, 0, &params).unwrap();
        assert!((g.loss - 0.2).abs() < 1e-15);
        assert_eq!(g.p, vec![-2.0, 2.0]);
        assert_eq!(g.n, vec![2.0, -2.0]);
        assert!(g.anchors.iter().flatten().flatten().all(|v| *v == 0.0));
        assert_eq!(DEFAULT_OMEGA, 0.1);
    }

    #[test]
    fn joint_omega_zero_leaves_positive_negative_untouched() {
        let a = set(vec![vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]]);
        let params = JointParams { omega: 0.0, ..JointParams::default() };
        let g = joint_loss_and_grads(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &a, 1, &params).unwrap();
        assert!(g.p.iter().chain(&g.n).all(|v| *v == 0.0));
        assert!(g.x.iter().any(|v| *v != 0.0));
        let bad = JointParams { omega: 1.5, ..JointParams::default() };
        assert!(matches!(
            joint_loss_and_grads(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &a, 1, &bad),
            Err(Error::Config(_))
        ));
    }
}
