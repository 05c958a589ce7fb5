use faultdiag::eval;
use faultdiag::ingest;
use faultdiag::mrmr::{self, DiscretizedColumn};
use ndarray::Array2;
use proptest::prelude::*;

fn codes(max_bins: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize, usize)> {
    (2..=max_bins, 2..=max_bins, 1usize..60).prop_flat_map(|(ba, bb, n)| {
        (
            proptest::collection::vec(0..ba, n),
            proptest::collection::vec(0..bb, n),
            Just(ba),
            Just(bb),
        )
    })
}

proptest! {
    #[test]
    fn mutual_information_is_bounded_and_symmetric((a, b, ba, bb) in codes(6)) {
        let a = DiscretizedColumn::from_codes(a, ba).unwrap();
        let b = DiscretizedColumn::from_codes(b, bb).unwrap();
        let ab = mrmr::mutual_info(&a, &b).unwrap();
        let ba_ = mrmr::mutual_info(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba_).abs() < 1e-12);
        let bound = mrmr::entropy(&a).min(mrmr::entropy(&b));
        prop_assert!(ab <= bound + 1e-12);
    }

    #[test]
    fn self_information_is_entropy((a, _b, ba, _bb) in codes(8)) {
        let a = DiscretizedColumn::from_codes(a, ba).unwrap();
        let i = mrmr::mutual_info(&a, &a).unwrap();
        prop_assert!((i - mrmr::entropy(&a)).abs() < 1e-12);
    }

    #[test]
    fn normalized_training_rows_stay_in_unit_interval(
        rows in 2usize..20, cols in 1usize..8, seed in any::<u64>()
    ) {
        use rand::Rng;
        let mut r = faultdiag::rng::seeded(seed);
        let m = Array2::from_shape_fn((rows, cols), |_| r.gen_range(-50.0..50.0));
        let params = ingest::fit_normalizer_matrix(&m);
        let z = params.apply_matrix(&m).unwrap();
        prop_assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn folds_partition_every_row(per_class in 2usize..15, classes in 2usize..5, k in 2usize..5, seed in any::<u64>()) {
        prop_assume!(per_class >= k);
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes + 1).collect();
        let plan = ingest::kfold_split(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.len()];
        for f in 0..k {
            for i in plan.test_indices(f) {
                seen[i] += 1;
            }
            let train = plan.train_indices(f);
            let test = plan.test_indices(f);
            prop_assert_eq!(train.len() + test.len(), labels.len());
            prop_assert!(test.iter().all(|i| !train.contains(i)));
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn confusion_counts_every_pair(pairs in proptest::collection::vec((1usize..=4, 1usize..=4), 1..80)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = eval::confusion(&t, &p, 4).unwrap();
        prop_assert_eq!(cm.total(), t.len() as u64);
        let hits = t.iter().zip(&p).filter(|(a, b)| a == b).count();
        prop_assert_eq!(cm.trace(), hits as u64);
        let rows = cm.row_sums();
        for c in 0..4 {
            prop_assert_eq!(rows[c], t.iter().filter(|&&x| x == c + 1).count() as u64);
        }
    }
}
