use fgboot::anchors::{self, AnchorSet, JointParams};
use fgboot::data::{self, Dataset, SyntheticSpec};
use fgboot::embednet::{l2_normalize, Network, Sample};
use fgboot::triplet::{self, EmbeddingIndex, MiningParams, NegativeSource, PoolEntry};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_anchors(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> AnchorSet {
    let pts = (0..n).map(|_| (0..k).map(|_| gauss(rng, d)).collect()).collect();
    AnchorSet::new(k, d, pts).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn soft_vote_sums_to_one_and_ignores_shifts(
        seed in any::<u64>(), n in 2usize..6, k in 1usize..4, d in 1usize..6,
        gamma in 0.0f64..50.0, shift in 0.1f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_anchors(&mut rng, n, k, d);
        let f = gauss(&mut rng, d);
        let p = anchors::soft_vote(&f, &a, gamma).unwrap();
        prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.0.iter().all(|v| (0.0..=1.0).contains(v)));

        // an extra coordinate, `shift` for the query and 0 for every anchor,
        // adds shift^2 to every squared distance
        let mut f2 = f.clone();
        f2.push(shift);
        let lifted: Vec<Vec<Vec<f64>>> = a
            .points()
            .iter()
            .map(|c| c.iter().map(|u| u.iter().copied().chain([0.0]).collect()).collect())
            .collect();
        let a2 = AnchorSet::new(k, d + 1, lifted).unwrap();
        let q = anchors::soft_vote(&f2, &a2, gamma).unwrap();
        for (x, y) in p.0.iter().zip(&q.0) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_anchor_decides_prediction(seed in any::<u64>(), n in 2usize..6, k in 1usize..4, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_anchors(&mut rng, n, k, d);
        let query = gauss(&mut rng, d);
        let f = &query;
        let mut dists: Vec<(f64, usize)> = a
            .points()
            .iter()
            .enumerate()
            .flat_map(|(c, pts)| pts.iter().map(move |u| (sq(f, u), c)))
            .collect();
        dists.sort_by(|x, y| x.0.total_cmp(&y.0));
        let nearest = dists[0].1;
        let Some(&(runner_up, _)) = dists.iter().find(|(_, c)| *c != nearest) else { return Ok(()) };
        let gap = runner_up - dists[0].0;
        prop_assume!(gap > 1e-6);
        // 40 nats over the closest rival plus ln(nk) covers the rival's whole category mass
        let gamma = (40.0 + ((n * k) as f64).ln()) / gap;
        prop_assert_eq!(anchors::predict(f, &a, gamma).unwrap(), nearest);
    }

    #[test]
    fn forward_output_is_unit_norm(
        seed in any::<u64>(),
        dims in prop::collection::vec(1usize..9, 2..5),
        scale in 0.01f64..100.0,
    ) {
        let net = Network::new(&dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x: Vec<f64> = gauss(&mut rng, dims[0]).into_iter().map(|v| v * scale).collect();
        let y = net.forward(&x).unwrap();
        prop_assert_eq!(y.len(), *dims.last().unwrap());
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mined_triplets_respect_mining_rules(
        seed in any::<u64>(), n_classes in 2usize..5, per_class in 2usize..12, d in 2usize..5,
        rho in 0.1f64..=1.0, margin in 0.0f64..1.0, pool_size in 0usize..6, naive in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_classes {
            for i in 0..per_class {
                ids.push(format!("s{c}-{i}"));
                emb.push(l2_normalize(&gauss(&mut rng, d)));
                labels.push(Some(c));
            }
        }
        let mut pool = Vec::new();
        for j in 0..pool_size {
            pool.push(PoolEntry {
                index: ids.len(),
                rejected_for: if j % 2 == 0 { None } else { Some(j % n_classes) },
            });
            ids.push(format!("h{j}"));
            emb.push(l2_normalize(&gauss(&mut rng, d)));
            labels.push(None);
        }
        let index = EmbeddingIndex::new(ids, emb, labels.clone()).unwrap();
        let params = MiningParams::new(margin, rho, 30, naive);
        let batch = triplet::mine_triplets(&index, &pool, &params, &mut rng).unwrap();
        prop_assert_eq!(batch.exhausted, batch.triplets.len() < 30);
        let effective_rho = if naive { 1.0 } else { rho };
        for t in &batch.triplets {
            let label = labels[t.reference].unwrap();
            prop_assert_eq!(labels[t.positive], Some(label));
            prop_assert_ne!(t.positive, t.reference);
            let region = index.same_class_by_distance(t.reference).unwrap();
            let take = ((effective_rho * region.len() as f64).ceil() as usize).max(1);
            prop_assert!(region[..take].contains(&t.positive));
            match t.neg_source {
                NegativeSource::OtherCategory => {
                    prop_assert!(labels[t.negative].is_some_and(|l| l != label));
                }
                NegativeSource::HumanHardNegative => {
                    let entry = pool.iter().find(|e| e.index == t.negative).unwrap();
                    prop_assert!(entry.rejected_for.is_none_or(|c| c == label));
                }
            }
            if !naive {
                let hard = triplet::is_hard_negative(
                    index.embedding(t.reference),
                    index.embedding(t.positive),
                    index.embedding(t.negative),
                    margin,
                ).unwrap();
                prop_assert!(hard);
            }
        }
    }

    #[test]
    fn kmeans_descends_to_a_fixed_point(seed in any::<u64>(), n in 1usize..40, k in 1usize..6, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, d)).collect();
        let r = anchors::kmeans(&pts, k, seed).unwrap();
        for w in r.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        for (p, &a) in pts.iter().zip(&r.assignments) {
            let own = sq(p, &r.centers[a]);
            prop_assert!(r.centers.iter().all(|c| own <= sq(p, c) + 1e-12));
        }
        if r.iterations < anchors::KMEANS_MAX_ITERS {
            for (j, c) in r.centers.iter().enumerate() {
                let members: Vec<&Vec<f64>> = pts.iter().zip(&r.assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for i in 0..d {
                    let mean = members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mean - c[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_loss_is_continuous_in_omega(seed in any::<u64>(), omega in 0.0f64..0.999) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let a = random_anchors(&mut rng, 3, 2, d);
        let f: Vec<Vec<f64>> = (0..3).map(|_| l2_normalize(&gauss(&mut rng, d))).collect();
        let at = |w: f64| {
            let p = JointParams { margin: 0.2, gamma: 5.0, omega: w };
            anchors::joint_loss_and_grads(&f[0], &f[1], &f[2], &a, 1, &p).unwrap().loss
        };
        let delta = 1e-7;
        prop_assert!((at(omega + delta) - at(omega)).abs() < 1e-4);
    }

    #[test]
    fn dataset_text_round_trip_is_exact(
        seed in any::<u64>(),
        rows in prop::collection::vec((prop::option::of(0usize..4), prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3)), 1..20),
    ) {
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, f))| Sample::new(format!("id-{seed}-{i}"), f, label))
            .collect();
        let ds = Dataset::new("prop", 4, 3, samples).unwrap();
        let text = data::format_dataset(&ds);
        let back = data::parse_dataset(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.label, b.label);
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_generation_is_deterministic(seed in any::<u64>()) {
        let spec = SyntheticSpec { n_categories: 3, modes_per_category: 2, input_dim: 4, samples_per_mode: 4, seed, ..Default::default() };
        prop_assert_eq!(data::generate_synthetic(&spec).unwrap(), data::generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn zero_overlap_separates_class_supports(seed in any::<u64>()) {
        let spec = SyntheticSpec {
            n_categories: 3, modes_per_category: 2, input_dim: 3, samples_per_mode: 10,
            inter_mode_distance: 3.0, overlap: 0.0, seed, ..Default::default()
        };
        let syn = data::generate_synthetic(&spec).unwrap();
        let all: Vec<&Sample> = syn.train.samples.iter().chain(&syn.test.samples).chain(&syn.candidates.samples).collect();
        let radius = spec.truncation_radius();
        for a in &all {
            for b in &all {
                if a.label != b.label {
                    prop_assert!(sq(&a.features, &b.features) > 0.0);
                }
            }
        }
        // supports are balls of radius R around the centers; other-class centers sit at least 2R apart
        for (c, modes) in syn.mode_centers.iter().enumerate() {
            for (c2, modes2) in syn.mode_centers.iter().enumerate() {
                if c != c2 {
                    for u in modes {
                        for v in modes2 {
                            prop_assert!(sq(u, v).sqrt() >= 2.0 * radius - 1e-9);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn hard_pool_supplies_half_the_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 3;
    let mut ids = Vec::new();
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for c in 0..4 {
        for i in 0..10 {
            ids.push(format!("s{c}-{i}"));
            emb.push(l2_normalize(&gauss(&mut rng, d)));
            labels.push(Some(c));
        }
    }
    let mut pool = Vec::new();
    for j in 0..10 {
        pool.push(PoolEntry { index: ids.len(), rejected_for: None });
        ids.push(format!("h{j}"));
        emb.push(l2_normalize(&gauss(&mut rng, d)));
        labels.push(None);
    }
    let index = EmbeddingIndex::new(ids, emb, labels).unwrap();
    // no pair on the unit sphere is more than 4 apart in squared distance, so
    // at margin 4.5 every draw of either kind violates
    let params = MiningParams::new(4.5, 0.6, 50, false);
    let (mut human, mut total) = (0usize, 0usize);
    while total < 2000 {
        let batch = triplet::mine_triplets(&index, &pool, &params, &mut rng).unwrap();
        assert!(!batch.exhausted);
        total += batch.triplets.len();
        human += batch.triplets.iter().filter(|t| t.neg_source == NegativeSource::HumanHardNegative).count();
    }
    let frac = human as f64 / total as f64;
    assert!((frac - 0.5).abs() <= 0.05, "hard-pool fraction {frac}");
}

#[test]
fn empty_pool_draws_only_other_categories() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb: Vec<Vec<f64>> = (0..12).map(|_| l2_normalize(&gauss(&mut rng, 3))).collect();
    let labels: Vec<Option<usize>> = (0..12).map(|i| Some(i % 3)).collect();
    let ids = (0..12).map(|i| format!("s{i}")).collect();
    let index = EmbeddingIndex::new(ids, emb, labels).unwrap();
    let batch = triplet::mine_triplets(&index, &[], &MiningParams::new(4.5, 1.0, 200, false), &mut rng).unwrap();
    assert_eq!(batch.triplets.len(), 200);
    assert!(batch.triplets.iter().all(|t| t.neg_source == NegativeSource::OtherCategory));
}
