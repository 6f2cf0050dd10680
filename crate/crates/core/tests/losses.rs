use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlalign::losses::{
    hungarian_match, itm_loss, mcr_loss, mcr_targets, sample_hard_negatives, vsc_distributions,
    vsc_loss, wpg_hinge, wpg_similarity,
};

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

fn square(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max).prop_flat_map(|m| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, m), m))
}

fn distributions(m: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-6.0f64..6.0, k), m).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect()
    })
}

fn masked_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    (1usize..=6, 6usize..14).prop_flat_map(|(m, k)| {
        (
            distributions(m, k),
            prop::collection::vec(0..k, m),
            Just((0..m).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

fn unit_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                r.into_iter().map(|x| x / n).collect()
            })
            .collect()
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn hungarian_matches_brute_force(cost in square(7)) {
        let a = hungarian_match(&cost).unwrap();
        let mut seen = a.perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..cost.len()).collect::<Vec<_>>());
        let total: f64 = a.perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        prop_assert_eq!(total, a.cost);
        prop_assert_eq!(a.cost, brute_force(&cost));
    }

    #[test]
    fn mcr_is_order_invariant((probs, labels, perm) in masked_set()) {
        let shuffled: Vec<usize> = perm.iter().map(|&j| labels[j]).collect();
        let a = mcr_loss(&probs, &labels).unwrap();
        let b = mcr_loss(&probs, &shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
        let mut t = mcr_targets(&probs, &labels).unwrap();
        let mut l = labels.clone();
        t.sort_unstable();
        l.sort_unstable();
        prop_assert_eq!(t, l);
    }

    #[test]
    fn vsc_is_symmetric_and_non_negative(u in (2usize..8).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, n), n)), tau in 0.01f64..1.0) {
        let n = u.len();
        let ut: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| u[i][j]).collect()).collect();
        let a = vsc_loss(&vsc_distributions(&u, tau, 0.01).unwrap());
        let b = vsc_loss(&vsc_distributions(&ut, tau, 0.01).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn constant_similarity_gives_ln_n(n in 2usize..20, c in -1.0f64..1.0, tau in 0.01f64..1.0) {
        let l = vsc_loss(&vsc_distributions(&vec![vec![c; n]; n], tau, 0.01).unwrap());
        prop_assert!((l - (n as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn renormalized_embeddings_leave_similarity_unchanged(
        x in unit_rows(4, 6),
        y in unit_rows(4, 6),
        s in prop::collection::vec(0.1f64..10.0, 8),
    ) {
        let rescale = |rows: &[Vec<f64>], f: &[f64]| -> Vec<Vec<f64>> {
            rows.iter().zip(f).map(|(r, &k)| {
                let v: Vec<f64> = r.iter().map(|x| x * k).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            }).collect()
        };
        let (x2, y2) = (rescale(&x, &s[..4]), rescale(&y, &s[4..]));
        for i in 0..4 {
            for k in 0..4 {
                prop_assert!((dot(&x[i], &y[k]) - dot(&x2[i], &y2[k])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn grounding_similarity_is_bounded_and_monotone(
        phrases in unit_rows(3, 5),
        regions in unit_rows(4, 5),
        extra in unit_rows(1, 5),
    ) {
        let (s, arg) = wpg_similarity(&phrases, &regions).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(arg.iter().all(|&j| j < regions.len()));
        let mut more = regions.clone();
        more.extend(extra);
        let (s2, _) = wpg_similarity(&phrases, &more).unwrap();
        prop_assert!(s2 >= s);
    }

    #[test]
    fn pointwise_losses_are_non_negative(pos in -1.0f64..1.0, neg in -1.0f64..1.0, p in 1e-6f64..(1.0 - 1e-6), m: bool) {
        prop_assert!(wpg_hinge(pos, neg) >= 0.0);
        prop_assert!(itm_loss(&[p], &[m]).unwrap() >= 0.0);
    }
}

#[test]
fn near_one_hot_negative_is_sampled_almost_always() {
    let n = 4;
    let mut u = vec![vec![0.0; n]; n];
    for i in 0..n {
        u[i][(i + 1) % n] = 1.0;
    }
    let block = vsc_distributions(&u, 0.05, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 10_000;
    let mut hits = [0usize; 2];
    for _ in 0..draws {
        let neg = sample_hard_negatives(&block, &mut rng);
        hits[0] += usize::from(neg.text_for_image[0] == 1);
        // column softmax: image 3 scores text 0 highest
        hits[1] += usize::from(neg.image_for_text[0] == 3);
    }
    for h in hits {
        assert!(h as f64 / draws as f64 >= 0.99, "{h}");
    }
}

#[test]
fn diagonal_is_never_sampled() {
    let u: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..5).map(|k| if i == k { 1.0 } else { 0.1 }).collect())
        .collect();
    let block = vsc_distributions(&u, 0.01, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100_000 / 5 {
        let neg = sample_hard_negatives(&block, &mut rng);
        for i in 0..5 {
            assert_ne!(neg.text_for_image[i], i);
            assert_ne!(neg.image_for_text[i], i);
        }
    }
}
