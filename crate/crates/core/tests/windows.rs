mod common;

use common::{random_dataset, rng, same_rows, slice_window, tensor_rows};
use flowcast::dataset::{day_positions, extract_windows, WindowConfig, POINTS_PER_DAY};
use rand::Rng;

#[test]
fn default_geometry_gives_253_windows_per_day() {
    let cfg = WindowConfig::default();
    assert_eq!(cfg.windows_per_day().unwrap(), 253);
    assert_eq!(288 - 21 - 9 - 6 + 1, 253);
    let ds = random_dataset(3, 9, 0.1, &mut rng(1));
    assert_eq!(extract_windows(&ds, &cfg, 8..9).unwrap().len(), 253);
    assert_eq!(extract_windows(&ds, &cfg, 7..9).unwrap().len(), 506);
}

#[test]
fn positions_are_consecutive_inside_the_day() {
    let cfg = WindowConfig::default();
    let pos = day_positions(&cfg, 10).unwrap();
    let first = 10 * POINTS_PER_DAY + 21;
    assert_eq!(pos.first(), Some(&first));
    assert_eq!(pos.last(), Some(&(11 * POINTS_PER_DAY - 6 - 9)));
    assert!(pos.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn early_days_are_rejected() {
    let ds = random_dataset(2, 9, 0.0, &mut rng(2));
    assert!(extract_windows(&ds, &WindowConfig::default(), 6..8).is_err());
    assert!(extract_windows(&ds, &WindowConfig::default(), 8..10).is_err());
}

#[test]
fn matches_hand_slicer_on_random_samples() {
    let mut r = rng(3);
    let ds = random_dataset(5, 12, 0.2, &mut r);
    let cfg = WindowConfig::default();
    let windows = extract_windows(&ds, &cfg, 7..12).unwrap();
    for _ in 0..1000 {
        let w = &windows[r.random_range(0..windows.len())];
        let [near, daily, weekly, target] = slice_window(&ds, &cfg, w.t);
        assert!(
            same_rows(&tensor_rows(&w.near.values), &near),
            "near at {}",
            w.t
        );
        assert!(
            same_rows(&tensor_rows(&w.daily.values), &daily),
            "daily at {}",
            w.t
        );
        assert!(
            same_rows(&tensor_rows(&w.weekly.values), &weekly),
            "weekly at {}",
            w.t
        );
        assert!(
            same_rows(&tensor_rows(&w.target.values), &target),
            "target at {}",
            w.t
        );
        assert_eq!(w.daily.values.cols(), w.near.values.cols());
    }
}

#[test]
fn other_geometries_keep_the_count_formula() {
    let ds = random_dataset(2, 9, 0.0, &mut rng(4));
    for (n, h, nd) in [(7, 1, 3), (13, 3, 5), (5, 5, 0)] {
        let cfg = WindowConfig {
            n,
            h,
            n_d: nd,
            n_w: nd,
        };
        let expected = POINTS_PER_DAY - n.max(nd) - nd - h + 1;
        assert_eq!(
            extract_windows(&ds, &cfg, 8..9).unwrap().len(),
            expected,
            "{cfg:?}"
        );
    }
}
