use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Counts every (known, unknown) pair.
fn auroc_pairs(known: &[f64], unknown: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &k in known {
        for &u in unknown {
            twice += if k > u {
                2
            } else if k == u {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * known.len() * unknown.len()) as f64
}

/// Builds the full confusion matrix and reads the counts off its rows and columns.
fn macro_f1_confusion(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c];
        let row: u64 = m[c].iter().sum();
        let col: u64 = (0..k).map(|r| m[r][c]).sum();
        total += f1_from_counts(tp, col - tp, row - tp);
    }
    total / k as f64
}

fn open(i: usize, n: usize) -> OpenLabel {
    if i == n {
        OpenLabel::Unknown
    } else {
        OpenLabel::Known(i)
    }
}

#[test]
fn score_examples() {
    let p = t([2, 2], &[1.0, 1.0, -1.0, -1.0]);
    let s = score(&t([1, 2], &[1.0, 1.0]), &p).unwrap();
    assert_eq!(s[0].min_distance, 0.0);
    assert_eq!(s[0].known_score, 1.0);
    assert_eq!(s[0].nearest_class, 0);
    let s = score(&t([1, 2], &[1.0, -1.0]), &p).unwrap();
    assert_eq!(s[0].nearest_class, 0, "tie goes to the lower index");
    assert!(score(&t([1, 3], &[0.0; 3]), &p).is_err());
}

#[test]
fn score_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let f: Vec<f64> = (0..200 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let p: Vec<f64> = (0..7 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let s = score(&t([200, 5], &f), &t([7, 5], &p)).unwrap();
    for (i, s) in s.iter().enumerate() {
        let d: Vec<f64> = (0..7)
            .map(|k| {
                (0..5)
                    .map(|j| (f[i * 5 + j] - p[k * 5 + j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let best = (0..7).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        assert_eq!(s.nearest_class, best);
        assert!((s.min_distance - d[best]).abs() < 1e-12);
        assert!(s.known_score > 0.0 && s.known_score <= 1.0);
    }
}

#[test]
fn threshold_examples() {
    assert_eq!(calibrate_threshold(&[2.5; 9], 37.0).unwrap(), 2.5);
    let d: Vec<f64> = (1..=100).map(f64::from).collect();
    assert!((calibrate_threshold(&d, 95.0).unwrap() - 95.05).abs() < 1e-9);
    assert!(matches!(calibrate_threshold(&[], 95.0), Err(Error::Usage(_))));
    assert!(calibrate_threshold(&d, 100.0).is_err());
    assert!(calibrate_threshold(&d, 0.0).is_err());
}

#[test]
fn threshold_is_order_independent() {
    let mut d: Vec<f64> = (1..=100).map(f64::from).collect();
    d.reverse();
    assert!((calibrate_threshold(&d, 95.0).unwrap() - 95.05).abs() < 1e-9);
}

#[test]
fn predict_open_boundary() {
    let s = ScoredSample {
        min_distance: 1.5,
        nearest_class: 3,
        known_score: (-1.5f64).exp(),
    };
    assert_eq!(predict_open(&s, 1.5), OpenLabel::Known(3));
    assert_eq!(predict_open(&s, 1.5 - 1e-12), OpenLabel::Unknown);
    assert_eq!(predict_open(&s, f64::INFINITY), OpenLabel::Known(3));
}

#[test]
fn predict_open_matches_threshold_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let samples: Vec<ScoredSample> = (0..300)
        .map(|_| {
            let d: f64 = (rng.random_range(0..40) as f64) / 8.0;
            ScoredSample {
                min_distance: d,
                nearest_class: rng.random_range(0..4),
                known_score: (-d).exp(),
            }
        })
        .collect();
    for tau in [0.0, 0.5, 1.25, 2.0, 4.875, 10.0] {
        let unknown = samples
            .iter()
            .filter(|s| predict_open(s, tau) == OpenLabel::Unknown)
            .count();
        let recount = samples.iter().filter(|s| !(s.min_distance <= tau)).count();
        assert_eq!(unknown, recount);
    }
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 5], &[0.3; 7]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.1], &[0.9]).unwrap(), 0.0);
    assert!(matches!(auroc(&[], &[1.0]), Err(Error::Usage(_))));
    assert!(matches!(auroc(&[1.0], &[]), Err(Error::Usage(_))));
    assert_eq!(auroc(&[0.0], &[-0.0]).unwrap(), 0.5);
}

#[test]
fn auroc_matches_pair_count_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let k: Vec<f64> = (0..50).map(|_| rng.random()).collect();
    let u: Vec<f64> = (0..50).map(|_| rng.random()).collect();
    assert_eq!(auroc(&k, &u).unwrap(), auroc_pairs(&k, &u));
}

#[test]
fn closed_accuracy_examples() {
    assert_eq!(closed_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(closed_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    let p = [0, 1, 2, 3, 4, 5, 6, 0, 0, 0];
    let l = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    assert_eq!(closed_accuracy(&p, &l).unwrap(), 0.7);
    assert!(matches!(closed_accuracy(&[0], &[0, 1]), Err(Error::Usage(_))));
}

#[test]
fn macro_f1_examples() {
    let perfect: Vec<OpenLabel> = (0..=3).map(|i| open(i, 3)).collect();
    assert_eq!(macro_f1(&perfect, &perfect, 3).unwrap().macro_f1, 1.0);

    // class 0: P = 1, R = 0.5; unknown perfect
    let truth = [OpenLabel::Known(0), OpenLabel::Known(0), OpenLabel::Unknown];
    let pred = [OpenLabel::Known(0), OpenLabel::Unknown, OpenLabel::Unknown];
    let r = macro_f1(&pred, &truth, 1).unwrap();
    // unknown: TP 1, FP 1 -> P = 0.5, R = 1 -> 2/3 as well
    assert!((r.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
    let truth = [OpenLabel::Known(0), OpenLabel::Known(0), OpenLabel::Unknown];
    let pred = [OpenLabel::Known(0), OpenLabel::Known(1), OpenLabel::Unknown];
    let r = macro_f1(&pred, &truth, 2).unwrap();
    assert_eq!(r.per_class[1], 0.0);

    // hand example with N + 1 = 2: one class P=1, R=0.5, the other perfect
    // is only realisable up to spillover; check the formula directly
    let hand = (1.0 + 2.0 * 0.5 / 1.5) / 2.0;
    assert!((hand - (f1_from_counts(1, 0, 0) + f1_from_counts(1, 0, 1)) / 2.0).abs() < 1e-15);
    assert!((hand - 0.8333).abs() < 1e-4);
}

#[test]
fn macro_f1_all_unknown() {
    let truth: Vec<OpenLabel> = (0..20).map(|i| open(i % 5, 4)).collect();
    let pred = vec![OpenLabel::Unknown; 20];
    let r = macro_f1(&pred, &truth, 4).unwrap();
    let t: Vec<usize> = truth.iter().map(|l| l.index(4).unwrap()).collect();
    assert_eq!(r.macro_f1, macro_f1_confusion(&[4; 20], &t, 5));
    assert!(macro_f1(&[OpenLabel::Known(9)], &[OpenLabel::Unknown], 4).is_err());
}

#[test]
fn openness_examples() {
    assert_eq!(openness(6, 6, 6).unwrap(), 0.0);
    assert!((openness(15, 30, 15).unwrap() - 0.1835).abs() < 5e-4);
    assert!((openness(15, 100, 15).unwrap() - 0.4892).abs() < 5e-4);
    assert!(openness(20, 10, 10).is_err());
    assert!(openness(0, 10, 10).is_err());
}

#[test]
fn histograms_degenerate_and_separated() {
    let c = [1.0, 1.0];
    let h = distance_histograms(&t([3, 2], &[1.0; 6]), &t([2, 2], &[1.0; 4]), &c, 50).unwrap();
    assert_eq!(h.known.counts[0], 3);
    assert_eq!(h.unknown.counts[0], 2);
    assert_eq!(h.known.counts.iter().sum::<usize>(), 3);

    let c = [0.0, 0.0];
    let known = t([2, 2], &[2.0, 0.0, 0.0, -2.0]);
    let unknown = t([2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let h = distance_histograms(&known, &unknown, &c, 10).unwrap();
    let last_unknown = h.unknown.counts.iter().rposition(|&n| n > 0).unwrap();
    let first_known = h.known.counts.iter().position(|&n| n > 0).unwrap();
    assert!(last_unknown < first_known);
    assert_eq!(h.edges_check(), 11);
    assert!(h.unknown_median < h.known_median);
    assert!(matches!(
        distance_histograms(&Tensor::<f64>::zeros([0, 2]), &unknown, &c, 10),
        Err(Error::Usage(_))
    ));
}

impl DistanceHistograms {
    fn edges_check(&self) -> usize {
        assert_eq!(self.known.edges, self.unknown.edges);
        self.known.edges.len()
    }
}

#[test]
fn median_and_mean_std() {
    assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!((m, s), (2.0, 1.0));
}

fn tied_scores(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_equals_pair_oracle_with_ties(seed in any::<u64>(), n1 in 1usize..300, n2 in 1usize..300, levels in 1u32..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = tied_scores(&mut rng, n1, levels);
        let u = tied_scores(&mut rng, n2, levels);
        prop_assert_eq!(auroc(&k, &u).unwrap(), auroc_pairs(&k, &u));
    }

    #[test]
    fn auroc_is_antisymmetric(seed in any::<u64>(), n1 in 1usize..200, n2 in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = tied_scores(&mut rng, n1, 7);
        let u = tied_scores(&mut rng, n2, 7);
        prop_assert_eq!(auroc(&k, &u).unwrap() + auroc(&u, &k).unwrap(), 1.0);
    }

    #[test]
    fn auroc_invariant_under_monotone_maps(seed in any::<u64>(), n1 in 1usize..200, n2 in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = tied_scores(&mut rng, n1, 11);
        let u = tied_scores(&mut rng, n2, 11);
        let base = auroc(&k, &u).unwrap();
        let ex = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        let af = |v: &[f64]| v.iter().map(|x| 3.0 * x - 7.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&ex(&k), &ex(&u)).unwrap(), base);
        prop_assert_eq!(auroc(&af(&k), &af(&u)).unwrap(), base);
    }

    #[test]
    fn macro_f1_equals_confusion_oracle(seed in any::<u64>(), n_known in 1usize..=10, n in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n_known + 1;
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..k) })
            .collect();
        let tl: Vec<OpenLabel> = truth.iter().map(|&i| open(i, n_known)).collect();
        let pl: Vec<OpenLabel> = pred.iter().map(|&i| open(i, n_known)).collect();
        let r = macro_f1(&pl, &tl, n_known).unwrap();
        prop_assert_eq!(r.macro_f1, macro_f1_confusion(&pred, &truth, k));
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
    }

    #[test]
    fn infinite_threshold_gives_nearest_class(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..40 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        for s in score(&t([40, 3], &f), &t([4, 3], &p)).unwrap() {
            prop_assert_eq!(predict_open(&s, f64::INFINITY), OpenLabel::Known(s.nearest_class));
        }
    }

    #[test]
    fn openness_increases_with_test_classes(n_train in 1usize..50, extra in 0usize..100, n_target in 1usize..50) {
        let n_test = (2 * n_train).saturating_sub(n_target).max(1) + extra;
        prop_assume!(2 * n_train <= n_test + n_target);
        let a = openness(n_train, n_test, n_target).unwrap();
        let b = openness(n_train, n_test + 1, n_target).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn histogram_counts_sum_to_samples(seed in any::<u64>(), nk in 1usize..100, nu in 1usize..100, bins in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..nk * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u: Vec<f64> = (0..nu * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h = distance_histograms(&t([nk, 2], &k), &t([nu, 2], &u), &[0.5, -0.5], bins).unwrap();
        prop_assert_eq!(h.known.counts.iter().sum::<usize>(), nk);
        prop_assert_eq!(h.unknown.counts.iter().sum::<usize>(), nu);
        prop_assert_eq!(h.known.edges.len(), bins + 1);
    }
}
