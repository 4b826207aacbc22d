mod common;

use proptest::prelude::*;
use sa2sr::autodiff::{Array, Tape};
use sa2sr::objectives::{ccc_value, ctc_loss, ctc_min_frames, global_loss, CccStats};
use sa2sr::Error;

fn normalized(logits: &[f64], t: usize, v: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(v)
        .take(t)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            r.iter().map(|x| x - lse).collect()
        })
        .collect()
}

fn ctc_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<bool>, usize)> {
    (1usize..=6, 2usize..=3).prop_flat_map(|(t, v)| {
        (
            prop::collection::vec(-4.0f64..4.0, t * v),
            prop::collection::vec(0..v - 1, 0..=3),
            prop::collection::vec(prop::bool::weighted(0.85), t),
        )
            .prop_map(move |(logits, target, mask)| (normalized(&logits, t, v), target, mask, v - 1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ctc_matches_enumeration((lp, target, mask, blank) in ctc_case()) {
        let valid = mask.iter().filter(|&&m| m).count();
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_rows(&lp).unwrap(), true);
        let result = ctc_loss(&mut tape, x, &target, &mask, blank);
        if valid == 0 || valid < ctc_min_frames(&target) {
            let unalignable = matches!(result, Err(Error::TargetUnalignable { .. }));
            prop_assert!(unalignable);
            return Ok(());
        }
        let loss = result.unwrap();
        tape.backward(loss).unwrap();
        let (want, want_grad) = common::ctc_by_enumeration(&lp, &target, &mask, blank);
        prop_assert!((tape.scalar(loss) - want).abs() <= 1e-10);
        let grad = tape.grad(x).unwrap();
        for (t, row) in want_grad.iter().enumerate() {
            for (k, g) in row.iter().enumerate() {
                prop_assert!((grad.get(t, k) - g).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn ctc_passes_finite_differences() {
    let logits = common::random_array(&mut common::rng(3), &[7, 5], 2.0);
    let target = [1, 1, 3];
    let mask = [true, true, true, true, true, true, false];
    let loss_of = |data: &[f64]| {
        let mut t = Tape::new();
        let x = t.leaf(Array::matrix(7, 5, data.to_vec()).unwrap(), true);
        let lp = t.log_softmax(x, 1).unwrap();
        let l = ctc_loss(&mut t, lp, &target, &mask, 4).unwrap();
        (t, x, l)
    };
    let (mut t, x, l) = loss_of(logits.data());
    t.backward(l).unwrap();
    let analytic = t.grad(x).unwrap().into_data();
    let numeric = common::numeric_grad(logits.data(), common::FD_STEP, |d| {
        let (t, _, l) = loss_of(d);
        t.scalar(l)
    });
    assert!(common::relative_error(&analytic, &numeric) <= 1e-4);
    assert!(analytic[30..].iter().all(|&g| g == 0.0), "masked frame has gradient");
}

fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

proptest! {
    #[test]
    fn ccc_symmetric_and_bounded((y, yhat) in series()) {
        let ab = ccc_value(&y, &yhat).unwrap();
        let ba = ccc_value(&yhat, &y).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        let stats = CccStats::compute(&y, &yhat).unwrap().ccc();
        prop_assert!((stats - ab).abs() <= 1e-9);
    }

    #[test]
    fn scaling_the_prediction_is_penalized(
        y in prop::collection::vec(-10.0f64..10.0, 3..15),
        c in 1.01f64..5.0,
    ) {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        prop_assume!(y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 1e-6);
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        prop_assert!(ccc_value(&y, &scaled).unwrap() < ccc_value(&y, &y).unwrap());
    }

    #[test]
    fn global_loss_is_linear(asr in 0.0f64..50.0, sentiment in 0.0f64..5.0, lambda in 0.0f64..500.0) {
        let eval = |s: f64| {
            let mut t = Tape::new();
            let a = t.constant(Array::scalar(asr));
            let b = t.constant(Array::scalar(s));
            let l = global_loss(&mut t, a, b, lambda).unwrap();
            t.scalar(l.total)
        };
        let once = eval(sentiment) - asr;
        let twice = eval(2.0 * sentiment) - asr;
        prop_assert!((twice - 2.0 * once).abs() <= 1e-9 * (1.0 + twice.abs()));
    }
}
