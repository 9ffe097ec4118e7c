use std::collections::BTreeSet;

use dce_core::dataset::{generate_synthetic, split_by_class, FeatureDataset, SplitRule, SynthSpec};
use dce_core::embedding::{merge_normalize, EmbeddingModel};
use dce_core::eval::{nmi, recall_at_k};
use dce_core::linalg::norm;
use dce_core::losses::{margin_loss, triplet_loss, Relation};
use dce_core::partition::{iou_matrix, kmeans, match_learners, Partition};
use dce_core::sampling::{build_batch, BatchSpec, BatchStrategy};
use dce_core::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels_with_all(k: usize, extra: Vec<usize>) -> Vec<usize> {
    (0..k).chain(extra.into_iter().map(|v| v % k)).collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian-ish columns.
fn orthogonal(dim: usize, raw: &[f64]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..dim {
        let mut v: Vec<f64> = raw[c * dim..(c + 1) * dim].to_vec();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis
}

fn rotate(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_bit_exact(
        rows in 1usize..12,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| f64::from_bits(rand::Rng::random::<u64>(&mut rng) & 0x3fff_ffff_ffff_ffff))
            .collect();
        let labels: Vec<u32> = (0..rows).map(|i| (i as u32 * 7) % 3 + 10).collect();
        let ds = FeatureDataset::new(Matrix::from_vec(rows, cols, data).unwrap(), &labels).unwrap();
        let back = FeatureDataset::from_bytes(&ds.to_bytes()).unwrap();
        let a: Vec<u64> = ds.features().as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.features().as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ds.raw_labels(), back.raw_labels());
    }

    #[test]
    fn class_split_covers_every_sample_once(
        classes in 2usize..10,
        per_class in 1usize..4,
        fraction in 0.05f64..0.95,
    ) {
        let n = classes * per_class;
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32 * 3).collect();
        let ids: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ds = FeatureDataset::new(Matrix::from_vec(n, 1, ids).unwrap(), &labels).unwrap();
        match split_by_class(&ds, &SplitRule::Fraction(fraction)) {
            Ok((train, test, split)) => {
                prop_assert_eq!(train.len() + test.len(), n);
                let mut seen: Vec<usize> = train.features().as_slice().iter()
                    .chain(test.features().as_slice())
                    .map(|&v| v as usize)
                    .collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
                prop_assert!(split.train_classes.is_disjoint(&split.test_classes));
                let train_raw: BTreeSet<u32> = train.raw_labels().into_iter().collect();
                prop_assert_eq!(train_raw, split.train_classes);
            }
            Err(e) => prop_assert!(matches!(e, dce_core::Error::Config(_))),
        }
    }

    #[test]
    fn forward_outputs_are_unit_norm(
        seed in any::<u64>(),
        k in 1usize..4,
        adapter in any::<bool>(),
        x in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EmbeddingModel::new_random(5, 4 * k, k, adapter.then_some(6), &mut rng).unwrap();
        if let Ok(full) = model.merge_and_forward(&x) {
            prop_assert!((norm(&full) - 1.0).abs() <= 1e-12);
            for s in model.slices() {
                let part = model.forward(&x, Some(s)).unwrap();
                prop_assert!((norm(&part) - 1.0).abs() <= 1e-12);
                let mut restricted = full[s.range()].to_vec();
                let n = norm(&restricted);
                restricted.iter_mut().for_each(|v| *v /= n);
                // Same bits: both normalize the same projection slice.
                let direct = merge_normalize(&model.project(&x).unwrap(), k).unwrap();
                prop_assert_eq!(&direct, &full);
                prop_assert!(restricted.iter().zip(&part).all(|(a, b)| (a - b).abs() <= 1e-15));
            }
        }
    }

    #[test]
    fn hinge_losses_are_rotation_invariant(
        raw in prop::collection::vec(-1.0f64..1.0, 16 + 12),
        alpha in 0.0f64..0.5,
        beta in 0.5f64..1.5,
    ) {
        let dim = 4;
        let q = orthogonal(dim, &raw[..16]);
        let a = &raw[16..20];
        let p = &raw[20..24];
        let n = &raw[24..28];
        let (ra, rp, rn) = (rotate(&q, a), rotate(&q, p), rotate(&q, n));
        let t0 = triplet_loss(a, p, n, alpha).loss;
        let t1 = triplet_loss(&ra, &rp, &rn, alpha).loss;
        prop_assert!((t0 - t1).abs() <= 1e-10);
        for rel in [Relation::Positive, Relation::Negative] {
            let m0 = margin_loss(a, n, rel, alpha, beta).loss;
            let m1 = margin_loss(&ra, &rn, rel, alpha, beta).loss;
            prop_assert!((m0 - m1).abs() <= 1e-10);
        }
    }

    #[test]
    fn triplet_gradient_symmetry(
        raw in prop::collection::vec(-1.0f64..1.0, 9),
        alpha in 0.0f64..2.0,
    ) {
        let (a, p, n) = (&raw[0..3], &raw[3..6], &raw[6..9]);
        let out = triplet_loss(a, p, n, alpha);
        if out.loss > 0.0 {
            // The positive-distance term contributes -grad_p to the anchor.
            for i in 0..3 {
                let anchor_pos_term = 2.0 * (a[i] - p[i]);
                prop_assert!((anchor_pos_term + out.grad_p[i]).abs() <= 1e-15);
                prop_assert!((out.grad_a[i] + out.grad_p[i] + out.grad_n[i]).abs() <= 1e-12);
            }
        } else {
            prop_assert!(out.grad_a.iter().chain(&out.grad_p).chain(&out.grad_n).all(|&g| g == 0.0));
        }
    }

    #[test]
    fn self_matching_is_identity(k in 1usize..7, extra in prop::collection::vec(0usize..100, 0..30)) {
        let p = Partition::new(labels_with_all(k, extra), k, None, 0).unwrap();
        let m = match_learners(&iou_matrix(&p, &p).unwrap()).unwrap();
        prop_assert_eq!(m.permutation, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn matching_maximizes_total_iou(
        k in 1usize..6,
        a in prop::collection::vec(0usize..100, 0..30),
        b in prop::collection::vec(0usize..100, 0..30),
    ) {
        let n = k + a.len().min(b.len());
        let prev = Partition::new(labels_with_all(k, a)[..n].to_vec(), k, None, 0).unwrap();
        let mut next_labels = labels_with_all(k, b)[..n].to_vec();
        next_labels.reverse();
        let next = Partition::new(next_labels, k, None, 1).unwrap();
        let iou = iou_matrix(&prev, &next).unwrap();
        for v in iou.as_slice() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let m = match_learners(&iou).unwrap();
        let total = |perm: &[usize]| (0..k).map(|j| iou[(perm[j], j)]).sum::<f64>();
        let best = permutations(k).iter().map(|p| total(p)).fold(f64::MIN, f64::max);
        prop_assert!((total(&m.permutation) - best).abs() <= 1e-12);
        let relabeled = next.relabel(&m.permutation).unwrap();
        let mut s0 = next.sizes();
        let mut s1 = relabeled.sizes();
        s0.sort_unstable();
        s1.sort_unstable();
        prop_assert_eq!(s0, s1);
    }

    #[test]
    fn kmeans_is_deterministic(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..40).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let pts = Matrix::from_vec(20, 2, data).unwrap();
        let a = kmeans(&pts, k, 50, seed).unwrap();
        let b = kmeans(&pts, k, 50, seed).unwrap();
        prop_assert_eq!(a.assignment(), b.assignment());
        prop_assert_eq!(a.centroids(), b.centroids());
    }

    #[test]
    fn batches_stay_inside_their_cluster(
        seed in any::<u64>(),
        members in prop::collection::btree_set(0usize..60, 1..40),
        balanced in any::<bool>(),
    ) {
        let labels: Vec<usize> = (0..60).map(|i| i % 7).collect();
        let members: Vec<usize> = members.into_iter().collect();
        let spec = BatchSpec {
            batch_size: 12,
            per_class: 3,
            strategy: if balanced { BatchStrategy::Balanced } else { BatchStrategy::Uniform },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = build_batch(&members, &labels, 3, &spec, &mut rng).unwrap();
        prop_assert_eq!(batch.cluster, 3);
        prop_assert!(batch.indices.len() <= spec.batch_size);
        for (i, &idx) in batch.indices.iter().enumerate() {
            prop_assert!(members.contains(&idx));
            prop_assert_eq!(batch.labels[i], labels[idx]);
        }
    }

    #[test]
    fn nmi_symmetric_and_permutation_invariant(
        a in prop::collection::vec(0usize..4, 2..40),
        shift in 1usize..4,
    ) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &v)| (v + i / 3) % 5).collect();
        let ab = nmi(&a, &b).unwrap();
        let ba = nmi(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        let permuted: Vec<usize> = a.iter().map(|&v| (v + shift) % 4).collect();
        prop_assert!((nmi(&permuted, &b).unwrap() - ab).abs() <= 1e-12);
    }

    #[test]
    fn recall_is_one_at_n_minus_one(
        seed in any::<u64>(),
        classes in 1usize..5,
    ) {
        let n = classes * 2 + (seed % 3) as usize;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let emb = Matrix::from_vec(n, 3, data).unwrap();
        let r = recall_at_k(&emb, &labels, &[n - 1]).unwrap();
        prop_assert_eq!(r[&(n - 1)], 1.0);
    }
}

#[test]
fn synthetic_zero_noise_modes_coincide() {
    let spec = SynthSpec {
        num_modes: 3,
        classes_per_mode: 2,
        samples_per_class: 4,
        feature_dim: 4,
        class_spread: 0.0,
        noise_sigma: 0.0,
        seed: 9,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            let same_mode = spec.mode_of_class(ds.raw_labels()[i]) == spec.mode_of_class(ds.raw_labels()[j]);
            assert_eq!(same_mode, ds.feature(i) == ds.feature(j), "samples {i} and {j}");
        }
    }
}
