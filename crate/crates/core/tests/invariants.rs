use csl_core::csl::{
    compute_csl, flag_percentile, flag_threshold, frames_to_segments, percentile_count, quantile, smooth_csl,
    trajectory_curvature, LossTrajectory,
};
use csl_core::metrics::{auc_bruteforce, eda, micro_auc, EdaPool, EvalVideo};
use ndarray::Array2;
use proptest::prelude::*;

fn traj(e: usize, t: usize, data: Vec<f64>) -> LossTrajectory {
    LossTrajectory {
        video_id: "p".into(),
        epochs: (1..=e).collect(),
        losses: Array2::from_shape_vec((e, t), data).unwrap(),
    }
}

fn trajectory() -> impl Strategy<Value = LossTrajectory> {
    (1usize..40, 1usize..60).prop_flat_map(|(e, t)| {
        prop::collection::vec(0.0f64..20.0, e * t).prop_map(move |d| traj(e, t, d))
    })
}

fn scores_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..500).prop_flat_map(|n| {
        (
            prop_oneof![
                prop::collection::vec(-5.0f64..5.0, n),
                // coarse grid to force ties
                prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.5), n),
            ],
            prop::collection::vec(any::<bool>(), n),
        )
    })
    .prop_filter("needs both classes", |(_, m)| m.iter().any(|&b| b) && m.iter().any(|&b| !b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn csl_is_exact_column_mean(tr in trajectory()) {
        let csl = compute_csl(&tr);
        prop_assert_eq!(csl.len(), tr.num_frames());
        for (t, &c) in csl.iter().enumerate() {
            let mut sum = 0.0;
            for e in 0..tr.num_epochs() {
                sum += tr.losses[[e, t]];
            }
            prop_assert!((c - sum / tr.num_epochs() as f64).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn smoothing_stays_inside_window(x in prop::collection::vec(-1e3f64..1e3, 1..200), w in 0usize..12) {
        let s = smooth_csl(&x, w);
        prop_assert_eq!(s.len(), x.len());
        for t in 0..x.len() {
            let win = &x[t.saturating_sub(w)..(t + w + 1).min(x.len())];
            let lo = win.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= s[t] && s[t] <= hi);
        }
        prop_assert_eq!(smooth_csl(&x, 0), x);
    }

    #[test]
    fn threshold_is_monotone_and_strict(x in prop::collection::vec(0.0f64..10.0, 1..100), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (t1, t2) = if a <= b { (a, b) } else { (b, a) };
        let f1 = flag_threshold(&x, t1);
        let f2 = flag_threshold(&x, t2);
        for i in 0..x.len() {
            prop_assert!(!f2[i] || f1[i]);
            prop_assert_eq!(f1[i], x[i] > t1);
        }
        let at = flag_threshold(&x, x[0]);
        prop_assert!(!at[0]);
    }

    #[test]
    fn percentile_count_is_exact(x in prop::collection::vec(-10.0f64..10.0, 1..300), k in 0.01f64..100.0) {
        let f = flag_percentile(&x, k);
        let m = f.iter().filter(|&&b| b).count();
        prop_assert_eq!(m, percentile_count(x.len(), k));
        let exact = (k / 100.0 * x.len() as f64).ceil() as usize;
        prop_assert!(m == exact || (m as f64 - k / 100.0 * x.len() as f64).abs() < 1e-6);
        // every flagged value dominates every unflagged one
        let min_in = x.iter().zip(&f).filter(|p| *p.1).map(|p| *p.0).fold(f64::INFINITY, f64::min);
        let max_out = x.iter().zip(&f).filter(|p| !*p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }

    #[test]
    fn percentile_ignores_increasing_transforms(x in prop::collection::vec((0i32..20).prop_map(f64::from), 1..150), k in 1.0f64..100.0) {
        let y: Vec<f64> = x.iter().map(|v| (v * 0.3).exp() * 7.0 - 2.0).collect();
        prop_assert_eq!(flag_percentile(&x, k), flag_percentile(&y, k));
    }

    #[test]
    fn segments_partition_flags(f in prop::collection::vec(any::<bool>(), 0..200)) {
        let segs = frames_to_segments(&f, 1);
        let mut cover = vec![false; f.len()];
        let mut prev_end = None;
        for &(s, e) in &segs {
            prop_assert!(s < e);
            if let Some(p) = prev_end {
                prop_assert!(s > p, "segments must be disjoint and non-adjacent");
            }
            prev_end = Some(e);
            for c in &mut cover[s..e] {
                *c = true;
            }
        }
        prop_assert_eq!(cover, f);
    }

    #[test]
    fn min_segment_len_only_drops_runs(f in prop::collection::vec(any::<bool>(), 0..200), m in 1usize..6) {
        let all = frames_to_segments(&f, 1);
        let kept = frames_to_segments(&f, m);
        let expected: Vec<_> = all.into_iter().filter(|(s, e)| e - s >= m).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn affine_trajectories_have_zero_curvature(e in 3usize..30, coef in prop::collection::vec((-64i32..64, -64i32..64), 1..30)) {
        let t = coef.len();
        let mut data = vec![0.0; e * t];
        for ep in 0..e {
            for (f, &(a, b)) in coef.iter().enumerate() {
                data[ep * t + f] = a as f64 / 8.0 + b as f64 / 8.0 * ep as f64;
            }
        }
        let c = trajectory_curvature(&traj(e, t, data)).unwrap();
        prop_assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantile_within_pool(x in prop::collection::vec(-100.0f64..100.0, 1..200), q in 0.001f64..0.999) {
        let v = quantile(&x, q).unwrap();
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= v && v <= hi);
    }

    #[test]
    fn fast_auc_matches_bruteforce((s, m) in scores_and_mask()) {
        let fast = micro_auc(&s, &m).unwrap();
        let slow = auc_bruteforce(&s, &m).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&fast));
    }

    #[test]
    fn auc_rank_invariance((s, m) in scores_and_mask()) {
        let a = micro_auc(&s, &m).unwrap();
        let t: Vec<f64> = s.iter().map(|v| v.powi(3) + 4.0 * v).collect();
        prop_assert!((micro_auc(&t, &m).unwrap() - a).abs() <= 1e-12);
        let rev_s: Vec<f64> = s.iter().rev().copied().collect();
        let rev_m: Vec<bool> = m.iter().rev().copied().collect();
        prop_assert!((micro_auc(&rev_s, &rev_m).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn negated_scores_flip_auc(m in prop::collection::vec(any::<bool>(), 2..300)) {
        prop_assume!(m.iter().any(|&b| b) && m.iter().any(|&b| !b));
        // distinct scores, so no ties
        let s: Vec<f64> = (0..m.len()).map(|i| ((i * 7919) % 1009) as f64 + i as f64 * 1e-3).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = micro_auc(&s, &m).unwrap();
        prop_assert!((micro_auc(&neg, &m).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn eda_is_monotone_in_k(
        vids in prop::collection::vec(
            (5usize..60).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(prop::bool::weighted(0.3), n))),
            1..6,
        ),
        ks in prop::collection::vec(0.5f64..100.0, 2..6),
    ) {
        let videos: Vec<EvalVideo> = vids
            .into_iter()
            .enumerate()
            .map(|(i, (scores, gt_mask))| EvalVideo { id: i.to_string(), scores, gt_mask })
            .collect();
        prop_assume!(videos.iter().any(|v| v.gt_mask.iter().any(|&b| b)));
        let mut ks = ks;
        ks.sort_by(f64::total_cmp);
        for pool in [EdaPool::PerVideo, EdaPool::Global] {
            let vals: Vec<f64> = ks.iter().map(|&k| eda(&videos, k, pool).unwrap()).collect();
            prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{:?}", vals);
            prop_assert_eq!(eda(&videos, 100.0, pool).unwrap(), 1.0);
        }
    }
}
