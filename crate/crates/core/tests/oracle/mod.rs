//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `max(0, |x-p|^2 - |x-n|^2 + m)` for arbitrary vectors.
pub fn triplet(x: &[f64], p: &[f64], n: &[f64], m: f64) -> f64 {
    (sq(x, p) - sq(x, n) + m).max(0.0)
}

/// Category probabilities by direct summation with a global max shift.
pub fn soft_vote(f: &[f64], anchors: &[Vec<Vec<f64>>], gamma: f64) -> Vec<f64> {
    let logits: Vec<Vec<f64>> =
        anchors.iter().map(|c| c.iter().map(|u| -gamma * sq(f, u)).collect()).collect();
    let top = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let per: Vec<f64> = logits.iter().map(|c| c.iter().map(|l| (l - top).exp()).sum()).collect();
    let total: f64 = per.iter().sum();
    per.into_iter().map(|p| p / total).collect()
}

pub fn classification(f: &[f64], anchors: &[Vec<Vec<f64>>], gamma: f64, label: usize) -> f64 {
    -soft_vote(f, anchors, gamma)[label].max(1e-300).ln()
}

#[allow(clippy::too_many_arguments)]
pub fn joint(
    x: &[f64],
    p: &[f64],
    n: &[f64],
    anchors: &[Vec<Vec<f64>>],
    label: usize,
    m: f64,
    gamma: f64,
    omega: f64,
) -> f64 {
    omega * triplet(x, p, n, m) + (1.0 - omega) * classification(x, anchors, gamma, label)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error of a full gradient: largest absolute difference over the
/// largest magnitude in either vector, with `floor` for all-zero gradients.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Forward pass of a tanh MLP with a linear, L2-normalised last layer.
/// Weights are row-major `fan_in x fan_out`.
pub fn mlp(layers: &[(usize, usize, Vec<f64>, Vec<f64>)], x: &[f64]) -> Vec<f64> {
    let a = mlp_pre_norm(layers, x);
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.into_iter().map(|v| v / n).collect()
}

/// The same network without the final normalisation.
pub fn mlp_pre_norm(layers: &[(usize, usize, Vec<f64>, Vec<f64>)], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (l, (fan_in, fan_out, w, b)) in layers.iter().enumerate() {
        let mut z = b.clone();
        for i in 0..*fan_in {
            for o in 0..*fan_out {
                z[o] += a[i] * w[i * fan_out + o];
            }
        }
        a = if l + 1 == layers.len() { z } else { z.into_iter().map(f64::tanh).collect() };
    }
    a
}

/// True when every `(x, p, n)` with `p` same-class and `n` other-class has
/// zero triplet loss at margin `m`.
pub fn all_triplets_zero(emb: &[Vec<f64>], labels: &[usize], m: f64) -> bool {
    for x in 0..emb.len() {
        for p in 0..emb.len() {
            if p == x || labels[p] != labels[x] {
                continue;
            }
            for n in 0..emb.len() {
                if labels[n] != labels[x] && triplet(&emb[x], &emb[p], &emb[n], m) > 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Within-class max squared distance and between-class max distance `D`.
pub fn spreads(emb: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let (mut within, mut between) = (0.0f64, 0.0f64);
    for i in 0..emb.len() {
        for j in 0..emb.len() {
            let d = sq(&emb[i], &emb[j]);
            if labels[i] == labels[j] {
                within = within.max(d);
            } else {
                between = between.max(d);
            }
        }
    }
    (within, between.sqrt())
}

/// Best k-partition of 1-D points by exhaustive enumeration of labelings.
/// Returns sorted cluster means and the objective.
pub fn exhaustive_kmeans_1d(points: &[f64], k: usize) -> (Vec<f64>, f64) {
    let n = points.len();
    let mut best = (Vec::new(), f64::INFINITY);
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut groups = vec![Vec::new(); k];
        for &p in points {
            groups[c % k].push(p);
            c /= k;
        }
        if groups.iter().any(Vec::is_empty) {
            continue;
        }
        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
        let obj: f64 = groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.iter().map(|p| (p - m) * (p - m)).sum::<f64>())
            .sum();
        if obj < best.1 {
            let mut sorted = means;
            sorted.sort_by(f64::total_cmp);
            best = (sorted, obj);
        }
    }
    best
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching column eigenvectors.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}
