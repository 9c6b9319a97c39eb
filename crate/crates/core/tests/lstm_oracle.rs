mod common;

use common::{lstm_reference, random_tensor, rng};
use flowcast::layers::{lstm_sequence, LstmParams};
use rand::Rng;

/// Random weights and biases, including the forget gate bias.
pub fn random_lstm(p: usize, r: &mut impl Rng) -> LstmParams {
    let mut params = LstmParams::init(p, p, r);
    for b in params.b.iter_mut() {
        *b = random_tensor(&[p], r);
    }
    params
}

#[test]
fn graph_lstm_matches_scalar_loop() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let p = r.random_range(1..9);
        let n = r.random_range(1..12);
        let params = random_lstm(p, &mut r);
        let seq = random_tensor(&[p, n], &mut r);
        let got = lstm_sequence(&params, &seq).unwrap();
        let want = lstm_reference(&params, &seq);
        for (s, row) in want.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                assert!((got.at(s, t) - v).abs() <= 1e-12, "seed {seed} ({s},{t})");
            }
        }
    }
}

#[test]
fn zero_weights_give_closed_form() {
    // with all-zero weights every gate is 1/2 and the candidate is 0
    let params = LstmParams::zeros(3, 3);
    let seq = random_tensor(&[3, 4], &mut rng(9));
    let out = lstm_sequence(&params, &seq).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}
