use asa_core::analysis::aggregate;
use asa_core::rng::SplitMix64;
use proptest::prelude::*;

/// Two-pass reference: mean first, then squared deviations.
fn reference(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.len() > 1).then(|| xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0));
    (mean, var.map(f64::sqrt))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn seeded_random_inputs_match_reference() {
    let mut rng = SplitMix64::new(99);
    for _ in 0..500 {
        let n = 1 + rng.below(300) as usize;
        let offset = (rng.next_f64() - 0.5) * 1e4;
        let scale = 10f64.powi(rng.below(6) as i32 - 2);
        let xs: Vec<f64> = (0..n).map(|_| offset + (rng.next_f64() - 0.5) * scale).collect();
        let s = aggregate(&xs.iter().copied().map(Some).collect::<Vec<_>>());
        let (mean, std) = reference(&xs);
        assert!(close(s.mean.unwrap(), mean), "{:?} vs {mean}", s.mean);
        match (s.std, std) {
            (Some(a), Some(b)) => assert!(close(a, b), "{a} vs {b}"),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(s.min.unwrap(), xs.iter().copied().fold(f64::INFINITY, f64::min));
    }
}

proptest! {
    #[test]
    fn undefined_values_are_counted_not_averaged(xs in prop::collection::vec(prop::option::of(-1e6f64..1e6), 0..100)) {
        let s = aggregate(&xs);
        let defined: Vec<f64> = xs.iter().flatten().copied().collect();
        prop_assert_eq!(s.n as usize, defined.len());
        prop_assert_eq!(s.undefined as usize, xs.len() - defined.len());
        if !defined.is_empty() {
            let (mean, _) = reference(&defined);
            prop_assert!((s.mean.unwrap() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        }
    }
}
