use gwa_core::controller::{select_scratch, warmup_epochs};
use gwa_core::moments::{EpochSummary, GwaSeries};
use proptest::prelude::*;

fn series(gwa: &[f64]) -> GwaSeries {
    GwaSeries::from_epochs(
        gwa.iter()
            .enumerate()
            .map(|(i, &g)| EpochSummary {
                epoch: i as u32,
                count: 100,
                excluded: 0,
                m1: g,
                m2: 0.1,
                m3: 0.0,
                m4: 0.03,
                excess_kurtosis: Some(0.0),
                gwa: Some(g),
                beta: 1.2,
                flags: vec![],
            })
            .collect(),
    )
}

proptest! {
    #[test]
    fn scratch_invariant_under_monotone_transforms(
        gwa in prop::collection::vec(-1.0f64..1.0, 1..60),
        warmup in 0.0f64..0.9,
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let base = select_scratch(&series(&gwa), warmup);
        let transformed: Vec<f64> = gwa.iter().map(|g| (scale * g + shift).exp()).collect();
        let other = select_scratch(&series(&transformed), warmup);
        match (base, other) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.selected_epoch, b.selected_epoch);
                prop_assert!(a.selected_epoch >= a.warmup_epochs);
                prop_assert!((a.selected_epoch as usize) < gwa.len());
            }
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            _ => prop_assert!(false, "one transform errored"),
        }
    }

    #[test]
    fn deterministic(gwa in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        prop_assert_eq!(select_scratch(&series(&gwa), 0.1), select_scratch(&series(&gwa), 0.1));
    }

    #[test]
    fn zero_warmup_finds_global_maximum(gwa in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let max = gwa.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(gwa.iter().filter(|&&g| g == max).count() == 1);
        let pos = gwa.iter().position(|&g| g == max).unwrap();
        prop_assert_eq!(select_scratch(&series(&gwa), 0.0).unwrap().selected_epoch as usize, pos);
    }

    #[test]
    fn warmup_never_exceeds_run(f in 0.0f64..1.0, n in 1usize..500) {
        prop_assert!((warmup_epochs(f, n) as usize) <= n);
    }
}
