//! Metric oracles: acc/bwt against brute-force loop implementations, CSV
//! round-trips, and parameter accounting.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use replaycl::continual::{grow_private, init_learner};
use replaycl::metrics::{count_params, AccMatrix};
use replaycl::nn::{Conv2d, ParamBundle};

fn random_matrix(rng: &mut ChaCha8Rng, t: usize) -> AccMatrix {
    let mut m = AccMatrix::new(t);
    for j in 1..=t {
        for i in 1..=j {
            m.set(j, i, rng.gen_range(0.0..=100.0)).unwrap();
        }
    }
    m
}

/// Brute-force re-implementations, deliberately written as plain loops.
fn acc_oracle(m: &AccMatrix) -> f64 {
    let t = m.num_tasks();
    let mut s = 0.0;
    for k in 1..=t {
        s += m.get(k, k).unwrap();
    }
    s / t as f64
}

fn bwt_oracle(m: &AccMatrix) -> f64 {
    let t = m.num_tasks();
    let mut s = 0.0;
    for k in 1..t {
        s += m.get(t, k).unwrap() - m.get(k, k).unwrap();
    }
    s / (t - 1) as f64
}

#[test]
fn acc_two_task_mean() {
    let mut m = AccMatrix::new(2);
    m.set(1, 1, 90.0).unwrap();
    m.set(2, 1, 85.0).unwrap();
    m.set(2, 2, 80.0).unwrap();
    assert_eq!(m.acc().unwrap(), 85.0);
    assert_eq!(m.acc_final().unwrap(), 82.5);
}

#[test]
fn acc_perfect_diagonal_is_100() {
    let mut m = AccMatrix::new(5);
    for j in 1..=5 {
        for i in 1..=j {
            m.set(j, i, 100.0).unwrap();
        }
    }
    assert_eq!(m.acc().unwrap(), 100.0);
    assert_eq!(m.bwt().unwrap(), 0.0);
}

#[test]
fn bwt_single_difference() {
    let mut m = AccMatrix::new(2);
    m.set(1, 1, 100.0).unwrap();
    m.set(2, 1, 90.0).unwrap();
    m.set(2, 2, 95.0).unwrap();
    assert_eq!(m.bwt().unwrap(), -10.0);
}

#[test]
fn bwt_zero_when_no_drift() {
    let mut m = AccMatrix::new(4);
    for j in 1..=4 {
        for i in 1..=j {
            m.set(j, i, 70.0 + i as f64).unwrap();
        }
    }
    assert_eq!(m.bwt().unwrap(), 0.0);
}

#[test]
fn thousand_random_matrices_match_loop_oracles_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let t = rng.gen_range(2..=9);
        let m = random_matrix(&mut rng, t);
        assert_eq!(m.acc().unwrap(), acc_oracle(&m));
        assert_eq!(m.acc_final().unwrap(), bwt_final_row_mean(&m));
        assert_eq!(m.bwt().unwrap(), bwt_oracle(&m));
    }
}

fn bwt_final_row_mean(m: &AccMatrix) -> f64 {
    let t = m.num_tasks();
    let mut s = 0.0;
    for i in 1..=t {
        s += m.get(t, i).unwrap();
    }
    s / t as f64
}

proptest! {
    #[test]
    fn acc_bwt_equal_oracles(seed in any::<u64>(), t in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, t);
        prop_assert_eq!(m.acc().unwrap(), acc_oracle(&m));
        prop_assert_eq!(m.bwt().unwrap(), bwt_oracle(&m));
    }
}

#[test]
fn undefined_cells_are_errors() {
    let mut m = AccMatrix::new(3);
    m.set(1, 1, 50.0).unwrap();
    assert!(m.acc().is_err());
    assert!(m.bwt().is_err());
    assert!(AccMatrix::new(1).bwt().is_err());
    // Upper triangle and out-of-range values are rejected.
    assert!(m.set(1, 2, 10.0).is_err());
    assert!(m.set(2, 2, 101.0).is_err());
    assert!(m.set(2, 2, -0.5).is_err());
}

#[test]
fn csv_round_trips_partial_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = AccMatrix::new(5);
    // Only the first three rows evaluated, as in an interrupted run.
    for j in 1..=3 {
        for i in 1..=j {
            m.set(j, i, rng.gen_range(0.0..=100.0)).unwrap();
        }
    }
    let text = m.to_csv();
    let back = AccMatrix::from_csv(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_csv(), text);
    assert_eq!(back.get(4, 1), None);
}

#[test]
fn lone_conv_stage_has_80_params() {
    // 8 filters of 3x3x1 plus 8 biases.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::<f32>::new(&mut rng, 1, 8, 3, 1, 0);
    assert_eq!(conv.param_count(), 80);
}

#[test]
fn growth_deltas_are_constant_and_mb_matches() {
    let mut state = init_learner::<f32>("mnist", (1.0, 1.0, 1.0), 1e-4, 4, 7).unwrap();
    let mut totals = vec![count_params(&state).total];
    for t in 1..=3 {
        grow_private(&mut state, t).unwrap();
        totals.push(count_params(&state).total);
    }
    let d1 = totals[1] - totals[0];
    assert_eq!(totals[2] - totals[1], d1);
    assert_eq!(totals[3] - totals[2], d1);
    let b = count_params(&state);
    assert_eq!(
        b.total,
        b.shared + b.private_vaes.iter().sum::<usize>() + b.heads.iter().sum::<usize>()
    );
    assert!((b.mb - b.total as f64 * 4.0 / 1048576.0).abs() < 1e-12);
}
