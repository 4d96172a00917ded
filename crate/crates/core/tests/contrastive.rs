//! Memory bank and view-contrast losses.

mod common;

use common::checks::{ema_closed_form, empty_negatives_cost_nothing, low_temperature_is_stable};
use gcl::contrastive::{cosine_sim, loss_vi, loss_vi_wogan, MemoryBank};
use proptest::prelude::*;

#[test]
fn ema_matches_closed_form_and_touches_one_row() {
    println!("{}", ema_closed_form().unwrap());
}

#[test]
fn no_negatives_means_zero_loss() {
    println!("{}", empty_negatives_cost_nothing().unwrap());
}

#[test]
fn low_temperature_extremes_are_finite() {
    println!("{}", low_temperature_is_stable().unwrap());
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_vector_scale(
        f in vector(6), p in vector(6), g in vector(6),
        negs in prop::collection::vec(vector(6), 1..8),
        s in 0.01f64..50.0, tau in 0.04f64..1.0,
    ) {
        let scale = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let a = loss_vi(&f, &p, &g, &negs, tau).unwrap();
        let scaled: Vec<Vec<f64>> = negs.iter().map(|n| scale(n)).collect();
        let b = loss_vi(&scale(&f), &scale(&p), &scale(&g), &scaled, tau).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn loss_is_nonnegative_and_grows_with_negatives(
        f in vector(5), p in vector(5),
        negs in prop::collection::vec(vector(5), 1..10),
        extra in vector(5), tau in 0.04f64..1.0,
    ) {
        let base = loss_vi_wogan(&f, &p, &negs, tau).unwrap();
        let mut more = negs.clone();
        more.push(extra);
        prop_assert!(base >= 0.0);
        prop_assert!(loss_vi_wogan(&f, &p, &more, tau).unwrap() >= base);
    }

    #[test]
    fn closer_positive_lowers_the_loss(f in vector(4), p in vector(4), negs in prop::collection::vec(vector(4), 1..6)) {
        let tau = 0.04;
        let unit: Vec<f64> = {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.iter().map(|x| x / n).collect()
        };
        let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Halfway towards f on the sphere is at least as similar as p.
        let mid: Vec<f64> = unit.iter().zip(&p).map(|(a, b)| a + b / pn).collect();
        prop_assume!(mid.iter().any(|x| x.abs() > 1e-6));
        prop_assert!(cosine_sim(&f, &mid).unwrap() >= cosine_sim(&f, &p).unwrap() - 1e-12);
        prop_assert!(loss_vi_wogan(&f, &mid, &negs, tau).unwrap() <= loss_vi_wogan(&f, &p, &negs, tau).unwrap() + 1e-9);
    }

    #[test]
    fn normalized_bank_rows_stay_unit(rows in prop::collection::vec(vector(3), 2..6), f in vector(3), alpha in 0.0f64..0.99) {
        let n = rows.len();
        let unit = |v: &[f64]| {
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let mut bank = MemoryBank::from_rows(rows.iter().map(|r| unit(r)).collect(), alpha).unwrap();
        bank.update(n - 1, &unit(&f)).unwrap();
        let norm = bank.row(n - 1).iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 0.0);
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }
}
