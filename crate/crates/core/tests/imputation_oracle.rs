mod common;

use common::{brute_fill, random_dataset, rng};
use flowcast::dataset::FlowDataset;
use flowcast::imputation::{fit, inject_missing, Method, Scope};
use proptest::prelude::*;
use rand::Rng;

fn check_against_oracle(ds: &FlowDataset, train_days: usize, method: Method) {
    let model = fit(method, ds, 0..train_days).unwrap();
    let filled = model.impute(ds).unwrap();
    for s in 0..ds.num_stations() {
        for t in 0..ds.len() {
            match ds.get(s, t) {
                Some(v) => assert_eq!(filled.get(s, t), Some(v)),
                None => {
                    let want = brute_fill(ds, train_days, method.name(), s, t);
                    let got = filled.get(s, t).unwrap();
                    assert_eq!(
                        got.to_bits(),
                        want.to_bits(),
                        "{method} ({s},{t}): {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn random_incomplete_datasets_match_brute_force() {
    for seed in 0..12 {
        let mut r = rng(seed);
        let p = r.random_range(1..=10);
        let days = r.random_range(1..=30);
        let train = r.random_range(1..=days);
        let missing = [0.05, 0.3, 0.6][seed as usize % 3];
        let ds = random_dataset(p, days, missing, &mut r);
        for method in Method::ALL {
            check_against_oracle(&ds, train, method);
        }
    }
}

#[test]
fn complete_data_is_unchanged() {
    let ds = random_dataset(4, 5, 0.0, &mut rng(7));
    for method in Method::ALL {
        let model = fit(method, &ds, 0..3).unwrap();
        assert_eq!(model.impute(&ds).unwrap(), ds);
    }
}

#[test]
fn station_without_training_data_is_an_error() {
    let mut ds = random_dataset(2, 3, 0.0, &mut rng(8));
    for t in 0..288 {
        ds.set(1, t, None);
    }
    assert!(fit(Method::Mean, &ds, 0..1).is_err());
}

#[test]
fn injection_counts_and_scope() {
    let ds = random_dataset(3, 10, 0.1, &mut rng(9));
    let (out, pattern) = inject_missing(&ds, 0.2, 5, &Scope::Days(8..10)).unwrap();
    assert_eq!(pattern.cell_count, (0.2f64 * 3.0 * 576.0).round() as usize);
    assert_eq!(out.missing_count(), ds.missing_count() + pattern.cell_count);
    assert!(pattern
        .cells
        .iter()
        .all(|&(s, t)| (8 * 288..10 * 288).contains(&t) && ds.observed(s, t)));
    assert_eq!(
        inject_missing(&ds, 0.2, 5, &Scope::Days(8..10)).unwrap().1,
        pattern
    );
    assert!(pattern.to_json().unwrap().contains("\"test-only\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_property(seed in any::<u64>(), p in 1usize..6, days in 1usize..9, missing in 0.0f64..0.7) {
        let mut r = rng(seed);
        let ds = random_dataset(p, days, missing, &mut r);
        let observed_everywhere = (0..p).all(|s| (0..288).any(|t| ds.observed(s, t)));
        prop_assume!(observed_everywhere);
        for method in Method::ALL {
            check_against_oracle(&ds, 1.max(days / 2), method);
        }
    }
}
