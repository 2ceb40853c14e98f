use super::*;
use crate::gradcheck;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Uniform values kept away from zero so relu gradients are finite-difference
/// safe.
fn rand_vec_off_kink(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u = rng.random::<f64>() * 2.0 - 1.0;
            if u >= 0.0 {
                u + 0.05
            } else {
                u - 0.05
            }
        })
        .collect()
}

fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> TensorId {
    tape.leaf_from(shape.to_vec(), data.to_vec(), true).unwrap()
}

/// Quadruple-loop direct-summation convolution used as an oracle.
fn conv_ref(
    input: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let oh = h + 2 * ph - kh + 1;
    let ow = w + 2 * pw - kw + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for nn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy + ky) as isize - ph as isize;
                                let ix = (ox + kx) as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += kernel[((co * cin + ci) * kh + ky) * kw + kx]
                                        * input[((nn * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[((nn * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

// ── conv2d ──────────────────────────────────────────────────────────

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 1, 1], &[2.0]);
    let k = leaf(&mut tape, &[1, 1, 1, 1], &[1.0]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
    assert_eq!(tape.data(y), &[2.0]);
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let data = rand_vec(&mut rng, 2 * 3 * 4 * 4);
    let x = leaf(&mut tape, &[2, 3, 4, 4], &data);
    let k = leaf(&mut tape, &[2, 3, 3, 3], &vec![0.0; 2 * 3 * 9]);
    let b = leaf(&mut tape, &[2], &[0.0, 0.5]);
    let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
    let out = tape.data(y);
    assert!(out[..16].iter().all(|&v| v == 0.0));
    assert!(out[16..32].iter().all(|&v| v == 0.5));
}

#[test]
fn conv_all_ones_border_counts() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 3, 3], &[1.0; 9]);
    let k = leaf(&mut tape, &[1, 1, 3, 3], &[1.0; 9]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
    let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
    assert_eq!(tape.data(y), &expect);
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(padding, ph) in &[(Padding::Same, 1), (Padding::Valid, 0)] {
        let (n, cin, cout, h, w) = (2, 3, 4, 5, 5);
        let xd = rand_vec(&mut rng, n * cin * h * w);
        let kd = rand_vec(&mut rng, cout * cin * 9);
        let bd = rand_vec(&mut rng, cout);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[n, cin, h, w], &xd);
        let k = leaf(&mut tape, &[cout, cin, 3, 3], &kd);
        let b = leaf(&mut tape, &[cout], &bd);
        let y = tape.conv2d(x, k, b, padding).unwrap();
        let expect = conv_ref(&xd, (n, cin, h, w), &kd, (cout, 3, 3), &bd, (ph, ph));
        assert_eq!(tape.data(y).len(), expect.len());
        for (a, e) in tape.data(y).iter().zip(&expect) {
            assert_relative_eq!(a, e, max_relative = 1e-12, epsilon = 1e-12);
        }
    }
}

#[test]
fn conv_valid_shrinks() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 5, 7], &vec![0.0; 35]);
    let k = leaf(&mut tape, &[1, 1, 3, 3], &vec![0.0; 9]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    let y = tape.conv2d(x, k, b, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 5]);
}

#[test]
fn conv_shape_errors() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 2, 4, 4], &vec![0.0; 32]);
    let k_badc = leaf(&mut tape, &[1, 3, 3, 3], &vec![0.0; 27]);
    let k_even = leaf(&mut tape, &[1, 2, 2, 2], &vec![0.0; 8]);
    let k_big = leaf(&mut tape, &[1, 2, 5, 5], &vec![0.0; 50]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    assert!(tape.conv2d(x, k_badc, b, Padding::Same).is_err());
    assert!(tape.conv2d(x, k_even, b, Padding::Same).is_err());
    assert!(tape.conv2d(x, k_big, b, Padding::Valid).is_err());
}

proptest! {
    #[test]
    fn conv_same_preserves_spatial_shape(
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 5usize..10,
        w in 5usize..10,
        cin in 1usize..3,
        cout in 1usize..3,
    ) {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, cin, h, w], &vec![0.5; cin * h * w]);
        let kk = leaf(&mut tape, &[cout, cin, k, k], &vec![0.1; cout * cin * k * k]);
        let b = leaf(&mut tape, &[cout], &vec![0.0; cout]);
        let y = tape.conv2d(x, kk, b, Padding::Same).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, cout, h, w]);
    }
}

// ── max_pool2 ───────────────────────────────────────────────────────

#[test]
fn pool_single_window() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.data(y), &[4.0]);
}

#[test]
fn pool_constant_stays_constant() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 2, 4, 4], &[0.7; 32]);
    let y = tape.max_pool2(x).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.7));
}

#[test]
fn pool_ascending_windows() {
    let data: Vec<f64> = (1..=16).map(|v| v as f64).collect();
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 4, 4], &data);
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.data(y), &[6.0, 8.0, 14.0, 16.0]);
}

#[test]
fn pool_tie_routes_gradient_to_first() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 2, 2], &[5.0; 4]);
    let y = tape.max_pool2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_odd_extent_rejected() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 3, 4], &vec![0.0; 12]);
    assert!(tape.max_pool2(x).is_err());
}

// ── up_conv2 ────────────────────────────────────────────────────────

#[test]
fn up_conv_single_pixel_tile() {
    // Second input channel is zero, so the output is v times the first
    // channel's kernel plane.
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 2, 1, 1], &[3.0, 0.0]);
    let k = leaf(&mut tape, &[2, 1, 2, 2], &[0.5, -1.0, 2.0, 0.25, 9.0, 9.0, 9.0, 9.0]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    let y = tape.up_conv2(x, k, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.data(y), &[1.5, -3.0, 6.0, 0.75]);
}

#[test]
fn up_conv_zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 4, 2, 2], &vec![0.0; 16]);
    let k = leaf(&mut tape, &[4, 2, 2, 2], &vec![1.0; 32]);
    let b = leaf(&mut tape, &[2], &[0.25, -0.5]);
    let y = tape.up_conv2(x, k, b).unwrap();
    let out = tape.data(y);
    assert!(out[..16].iter().all(|&v| v == 0.25));
    assert!(out[16..].iter().all(|&v| v == -0.5));
}

#[test]
fn up_conv_disjoint_tiles() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    let k = leaf(&mut tape, &[2, 1, 2, 2], &[1.0; 8]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    let y = tape.up_conv2(x, k, b).unwrap();
    let expect = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.data(y), &expect);
}

#[test]
fn up_conv_odd_channels_rejected() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 3, 2, 2], &vec![0.0; 12]);
    let k = leaf(&mut tape, &[2, 1, 2, 2], &vec![0.0; 8]);
    let b = leaf(&mut tape, &[1], &[0.0]);
    assert!(tape.up_conv2(x, k, b).is_err());
}

// ── batch_norm ──────────────────────────────────────────────────────

#[test]
fn bn_constant_channel_maps_to_beta() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2, 1, 2, 2], &[3.0; 8]);
    let gamma = leaf(&mut tape, &[1], &[2.0]);
    let beta = leaf(&mut tape, &[1], &[0.7]);
    let mut state = BnState::new(1);
    let y = tape.batch_norm(x, gamma, beta, Mode::Train, &mut state).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.7));
}

#[test]
fn bn_hand_statistics() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 1, 2], &[0.0, 2.0]);
    let gamma = leaf(&mut tape, &[1], &[1.0]);
    let beta = leaf(&mut tape, &[1], &[0.0]);
    let mut state = BnState::new(1);
    let y = tape.batch_norm(x, gamma, beta, Mode::Train, &mut state).unwrap();
    let out = tape.data(y);
    assert_relative_eq!(out[0], -1.0, epsilon = 1e-4);
    assert_relative_eq!(out[1], 1.0, epsilon = 1e-4);
}

#[test]
fn bn_identity_on_normalized_input() {
    // {-1, +1} already has zero mean and unit biased variance.
    let data = [-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2, 1, 2, 2], &data);
    let gamma = leaf(&mut tape, &[1], &[1.0]);
    let beta = leaf(&mut tape, &[1], &[0.0]);
    let mut state = BnState::new(1);
    let y = tape.batch_norm(x, gamma, beta, Mode::Train, &mut state).unwrap();
    for (o, i) in tape.data(y).iter().zip(&data) {
        assert_relative_eq!(o, i, epsilon = 1e-4);
    }
}

#[test]
fn bn_running_stats_seed_then_blend() {
    let mut state = BnState::new(1);
    let mut tape = Tape::new();
    let gamma = leaf(&mut tape, &[1], &[1.0]);
    let beta = leaf(&mut tape, &[1], &[0.0]);

    // First batch {0,2}: mean 1, biased var 1, unbiased var 2. The first call
    // seeds the running stats directly.
    let x1 = leaf(&mut tape, &[1, 1, 1, 2], &[0.0, 2.0]);
    tape.batch_norm(x1, gamma, beta, Mode::Train, &mut state).unwrap();
    assert_relative_eq!(state.mean()[0], 1.0, epsilon = 1e-12);
    assert_relative_eq!(state.var()[0], 2.0, epsilon = 1e-12);

    // Second batch {4,8}: mean 6, unbiased var 8. Blend with momentum 0.9.
    let x2 = leaf(&mut tape, &[1, 1, 1, 2], &[4.0, 8.0]);
    tape.batch_norm(x2, gamma, beta, Mode::Train, &mut state).unwrap();
    assert_relative_eq!(state.mean()[0], 0.9 * 1.0 + 0.1 * 6.0, epsilon = 1e-12);
    assert_relative_eq!(state.var()[0], 0.9 * 2.0 + 0.1 * 8.0, epsilon = 1e-12);
}

#[test]
fn bn_eval_uses_running_stats() {
    let mut state = BnState::from_parts(vec![1.0], vec![4.0], true).unwrap();
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 1, 2], &[3.0, -1.0]);
    let gamma = leaf(&mut tape, &[1], &[2.0]);
    let beta = leaf(&mut tape, &[1], &[0.5]);
    let y = tape.batch_norm(x, gamma, beta, Mode::Eval, &mut state).unwrap();
    let inv = 1.0 / (4.0f64 + BN_EPS).sqrt();
    let out = tape.data(y);
    assert_relative_eq!(out[0], 2.0 * (3.0 - 1.0) * inv + 0.5, epsilon = 1e-12);
    assert_relative_eq!(out[1], 2.0 * (-1.0 - 1.0) * inv + 0.5, epsilon = 1e-12);
}

#[test]
fn bn_eval_uninitialized_rejected() {
    let mut state = BnState::new(1);
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 1, 2], &[0.0, 2.0]);
    let gamma = leaf(&mut tape, &[1], &[1.0]);
    let beta = leaf(&mut tape, &[1], &[0.0]);
    assert!(tape.batch_norm(x, gamma, beta, Mode::Eval, &mut state).is_err());
}

// ── relu, dropout, concat ───────────────────────────────────────────

#[test]
fn relu_forward_and_subgradient_at_zero() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
    let y = tape.relu(x);
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let data = rand_vec(&mut rng, 16);
    let x = leaf(&mut tape, &[1, 1, 4, 4], &data);
    let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.data(y), data.as_slice());
}

#[test]
fn dropout_eval_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap();
    assert_eq!(y, x);
}

#[test]
fn dropout_rate_one_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 1, 2, 2], &[0.0; 4]);
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_preserves_mean() {
    // Inverted dropout on an all-ones tensor: each element is 1/(1-rate)
    // with probability 1-rate, else 0, so the expectation is 1. Element
    // variance is rate/(1-rate); a 3-sigma band around the grand mean over
    // all seeds bounds the Monte-Carlo estimate.
    let rate = 0.25;
    let numel = 1000;
    let seeds = 12;
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 20, 50], &vec![1.0; numel]);
        let y = tape.dropout(x, rate, Mode::Train, &mut rng).unwrap();
        total += tape.data(y).iter().sum::<f64>();
    }
    let mean = total / (numel * seeds as usize) as f64;
    let sigma = (rate / (1.0 - rate) / (numel * seeds as usize) as f64).sqrt();
    assert!(
        (mean - 1.0).abs() < 3.0 * sigma,
        "dropout mean {mean} outside 3 sigma ({sigma})"
    );
}

#[test]
fn concat_orders_channels_and_splits_gradient() {
    let xd = [1.0, 2.0, 3.0, 4.0];
    let yd = [5.0, 6.0, 7.0, 8.0];
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[1, 1, 2, 2], &xd);
    let b = leaf(&mut tape, &[1, 1, 2, 2], &yd);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 2, 2, 2]);
    assert_eq!(&tape.data(c)[..4], &xd);
    assert_eq!(&tape.data(c)[4..], &yd);
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0; 4]);
}

#[test]
fn concat_batch_interleaving() {
    // With N=2 the per-sample channel blocks must interleave, not append.
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 1, 1, 1], &[1.0, 2.0]);
    let b = leaf(&mut tape, &[2, 1, 1, 1], &[3.0, 4.0]);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.data(c), &[1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn concat_spatial_mismatch_rejected() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[1, 1, 2, 2], &[0.0; 4]);
    let b = leaf(&mut tape, &[1, 1, 4, 4], &[0.0; 16]);
    assert!(tape.concat_channels(a, b).is_err());
}

// ── softmax, gather, weighted nll ───────────────────────────────────

#[test]
fn softmax_equal_logits_uniform() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 4, 1, 1], &[0.3; 4]);
    let y = tape.softmax_channels(x).unwrap();
    for &v in tape.data(y) {
        assert_relative_eq!(v, 0.25, epsilon = 1e-12);
    }
}

#[test]
fn softmax_log_odds() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1, 2, 1, 1], &[0.0, 3.0f64.ln()]);
    let y = tape.softmax_channels(x).unwrap();
    let out = tape.data(y);
    assert_relative_eq!(out[0], 0.25, epsilon = 1e-12);
    assert_relative_eq!(out[1], 0.75, epsilon = 1e-12);
}

#[test]
fn softmax_shift_invariant() {
    let logits = [0.1, -2.0, 1.3];
    let shifted: Vec<f64> = logits.iter().map(|v| v + 1000.0).collect();
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[1, 3, 1, 1], &logits);
    let b = leaf(&mut tape, &[1, 3, 1, 1], &shifted);
    let ya = tape.softmax_channels(a).unwrap();
    let yb = tape.softmax_channels(b).unwrap();
    for (u, v) in tape.data(ya).iter().zip(tape.data(yb)) {
        assert!((u - v).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_channels_sum_to_one(
        logits in prop::collection::vec(-20.0f64..20.0, 3 * 4),
    ) {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 2, 2], &logits);
        let y = tape.softmax_channels(x).unwrap();
        let out = tape.data(y);
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| out[c * 4 + p]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn gather_picks_labeled_channel() {
    let mut tape = Tape::new();
    // Two channels over a 1x2 image: channel 0 = {0.1, 0.2}, channel 1 =
    // {0.9, 0.8}.
    let p = leaf(&mut tape, &[1, 2, 1, 2], &[0.1, 0.2, 0.9, 0.8]);
    let g = tape.gather_channels(p, &[1, 0]).unwrap();
    assert_eq!(tape.shape(g), &[1, 1, 2]);
    assert_eq!(tape.data(g), &[0.9, 0.2]);
}

#[test]
fn gather_label_out_of_range() {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[1, 2, 1, 2], &[0.5; 4]);
    let err = tape.gather_channels(p, &[0, 2]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('2'), "error should name the bad label: {msg}");
}

#[test]
fn weighted_nll_hand_value() {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[1, 1, 2], &[0.5, 0.25]);
    let e = tape.weighted_nll(p, &[1.0, 2.0]).unwrap();
    let expect = -(1.0 * 0.5f64.ln() + 2.0 * 0.25f64.ln()) / 2.0;
    assert_relative_eq!(tape.data(e)[0], expect, epsilon = 1e-15);
}

#[test]
fn weighted_nll_clamps_zero_probability() {
    let mut tape = Tape::new();
    let p = leaf(&mut tape, &[1, 1, 2], &[0.0, 0.5]);
    let e = tape.weighted_nll(p, &[1.0, 1.0]).unwrap();
    let loss = tape.data(e)[0];
    assert!(loss.is_finite());
    let expect = -(LOG_CLAMP.ln() + 0.5f64.ln()) / 2.0;
    assert_relative_eq!(loss, expect, epsilon = 1e-12);
    // No gradient flows through the clamped element.
    tape.backward(e).unwrap();
    assert_eq!(tape.grad(p).unwrap()[0], 0.0);
    assert!(tape.grad(p).unwrap()[1] != 0.0);
}

// ── backward plumbing ───────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1], &[3.0]);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_accumulates_until_reset() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1], &[3.0]);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_nonscalar() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
    assert!(tape.backward(x).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[1], &[3.0]);
    let orphan = leaf(&mut tape, &[2], &[1.0, 1.0]);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(orphan).unwrap(), &[0.0, 0.0]);
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 4, 4], &rand_vec(&mut rng, 32));
        let k = leaf(&mut tape, &[2, 2, 3, 3], &rand_vec(&mut rng, 36));
        let b = leaf(&mut tape, &[2], &rand_vec(&mut rng, 2));
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        (
            tape.grad(x).unwrap().to_vec(),
            tape.grad(k).unwrap().to_vec(),
            tape.grad(b).unwrap().to_vec(),
        )
    };
    assert_eq!(run(), run());
}

// ── finite-difference gradient checks ───────────────────────────────

/// Runs a finite-difference check of `build` (which must append a scalar)
/// against the tape gradients for every input, and asserts the worst
/// relative error stays under 1e-4.
fn assert_fd(shapes: &[&[usize]], data: &[Vec<f64>], build: impl Fn(&mut Tape, &[TensorId]) -> TensorId) {
    let report = gradcheck::check(data, |xs| {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(xs)
            .map(|(s, d)| tape.leaf_from(s.to_vec(), d.clone(), true).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        assert_eq!(tape.tensor(out).numel(), 1);
        tape.backward(out).unwrap();
        let loss = tape.data(out)[0];
        let grads = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();
        (loss, grads)
    });
    assert!(
        report.max_rel_err < 1e-4,
        "gradient check failed: {report:?}"
    );
}

/// Probe reduction: elementwise-weighted sum with fixed coefficients, so
/// cancelling sign errors cannot hide from the check.
fn probe_sum(tape: &mut Tape, x: TensorId, rng: &mut ChaCha8Rng) -> TensorId {
    let n = tape.tensor(x).numel();
    let shape = tape.shape(x).to_vec();
    let coeffs = rand_vec(rng, n);
    let c = tape.leaf_from(shape, coeffs, false).unwrap();
    let m = tape.mul(x, c).unwrap();
    tape.sum(m)
}

#[test]
fn fd_conv2d_same_and_valid() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let xd = rand_vec(&mut rng, 2 * 3 * 6 * 6);
        let kd = rand_vec(&mut rng, 2 * 3 * 9);
        let bd = rand_vec(&mut rng, 2);
        let padding = if seed % 2 == 0 { Padding::Same } else { Padding::Valid };
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(
            &[&[2, 3, 6, 6], &[2, 3, 3, 3], &[2]],
            &[xd, kd, bd],
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], padding).unwrap();
                probe_sum(tape, y, &mut prng.clone())
            },
        );
    }
}

#[test]
fn fd_up_conv2() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let xd = rand_vec(&mut rng, 2 * 4 * 3 * 3);
        let kd = rand_vec(&mut rng, 4 * 2 * 4);
        let bd = rand_vec(&mut rng, 2);
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(
            &[&[2, 4, 3, 3], &[4, 2, 2, 2], &[2]],
            &[xd, kd, bd],
            move |tape, ids| {
                let y = tape.up_conv2(ids[0], ids[1], ids[2]).unwrap();
                probe_sum(tape, y, &mut prng.clone())
            },
        );
    }
}

#[test]
fn fd_batch_norm_train() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let xd = rand_vec(&mut rng, 2 * 3 * 4 * 4);
        let gd = rand_vec(&mut rng, 3);
        let bd = rand_vec(&mut rng, 3);
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(
            &[&[2, 3, 4, 4], &[3], &[3]],
            &[xd, gd, bd],
            move |tape, ids| {
                let mut state = BnState::new(3);
                let y = tape
                    .batch_norm(ids[0], ids[1], ids[2], Mode::Train, &mut state)
                    .unwrap();
                probe_sum(tape, y, &mut prng.clone())
            },
        );
    }
}

#[test]
fn fd_batch_norm_eval() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(3500 + seed);
        let xd = rand_vec(&mut rng, 2 * 2 * 3 * 3);
        let gd = rand_vec(&mut rng, 2);
        let bd = rand_vec(&mut rng, 2);
        let mean = rand_vec(&mut rng, 2);
        let var: Vec<f64> = rand_vec(&mut rng, 2).iter().map(|v| v.abs() + 0.5).collect();
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(
            &[&[2, 2, 3, 3], &[2], &[2]],
            &[xd, gd, bd],
            move |tape, ids| {
                let mut state = BnState::from_parts(mean.clone(), var.clone(), true).unwrap();
                let y = tape
                    .batch_norm(ids[0], ids[1], ids[2], Mode::Eval, &mut state)
                    .unwrap();
                probe_sum(tape, y, &mut prng.clone())
            },
        );
    }
}

#[test]
fn fd_relu_off_kink() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let xd = rand_vec_off_kink(&mut rng, 2 * 3 * 6 * 6);
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(&[&[2, 3, 6, 6]], &[xd], move |tape, ids| {
            let y = tape.relu(ids[0]);
            probe_sum(tape, y, &mut prng.clone())
        });
    }
}

#[test]
fn fd_max_pool2_off_ties() {
    for seed in 0..10 {
        // Re-roll until every pooling window has a clear margin between its
        // two largest values, keeping the finite differences off the
        // tie discontinuity.
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let xd = loop {
            let cand = rand_vec(&mut rng, 2 * 2 * 4 * 4);
            let mut ok = true;
            for plane in 0..4 {
                for wy in 0..2 {
                    for wx in 0..2 {
                        let base = plane * 16 + wy * 2 * 4 + wx * 2;
                        let mut vals = [cand[base], cand[base + 1], cand[base + 4], cand[base + 5]];
                        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        if vals[0] - vals[1] < 1e-3 {
                            ok = false;
                        }
                    }
                }
            }
            if ok {
                break cand;
            }
        };
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(&[&[2, 2, 4, 4]], &[xd], move |tape, ids| {
            let y = tape.max_pool2(ids[0]).unwrap();
            probe_sum(tape, y, &mut prng.clone())
        });
    }
}

#[test]
fn fd_softmax_gather_nll_composite() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let xd = rand_vec(&mut rng, 2 * 3 * 4 * 4);
        let labels: Vec<usize> = (0..2 * 16).map(|_| (rng.random::<f64>() * 3.0) as usize).collect();
        let weights: Vec<f64> = (0..2 * 16).map(|_| 0.5 + rng.random::<f64>()).collect();
        assert_fd(&[&[2, 3, 4, 4]], &[xd], move |tape, ids| {
            let p = tape.softmax_channels(ids[0]).unwrap();
            let t = tape.gather_channels(p, &labels).unwrap();
            tape.weighted_nll(t, &weights).unwrap()
        });
    }
}

#[test]
fn fd_dropout_fixed_mask() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let xd = rand_vec(&mut rng, 2 * 2 * 4 * 4);
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(&[&[2, 2, 4, 4]], &[xd], move |tape, ids| {
            // The same mask seed every call keeps the sampled network fixed,
            // so finite differences see a deterministic function.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(42 + seed);
            let y = tape.dropout(ids[0], 0.25, Mode::Train, &mut mask_rng).unwrap();
            probe_sum(tape, y, &mut prng.clone())
        });
    }
}

#[test]
fn fd_concat_and_add() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let a = rand_vec(&mut rng, 1 * 2 * 3 * 3);
        let b = rand_vec(&mut rng, 1 * 2 * 3 * 3);
        let prng = ChaCha8Rng::seed_from_u64(seed);
        assert_fd(
            &[&[1, 2, 3, 3], &[1, 2, 3, 3]],
            &[a, b],
            move |tape, ids| {
                let s = tape.add(ids[0], ids[1]).unwrap();
                let c = tape.concat_channels(s, ids[1]).unwrap();
                probe_sum(tape, c, &mut prng.clone())
            },
        );
    }
}

#[test]
fn fd_layer_composite() {
    // A miniature of the real network: conv, relu, pool, up-conv, skip
    // concat, 1x1 conv head, softmax, weighted loss.
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let xd = rand_vec(&mut rng, 1 * 2 * 4 * 4);
        let k1 = rand_vec(&mut rng, 4 * 2 * 9);
        let b1 = rand_vec(&mut rng, 4);
        let ku = rand_vec(&mut rng, 4 * 2 * 4);
        let bu = rand_vec(&mut rng, 2);
        let kh = rand_vec(&mut rng, 3 * 6 * 1);
        let bh = rand_vec(&mut rng, 3);
        let labels: Vec<usize> = (0..16).map(|_| (rng.random::<f64>() * 3.0) as usize).collect();
        let weights: Vec<f64> = (0..16).map(|_| 0.5 + rng.random::<f64>()).collect();
        assert_fd(
            &[
                &[1, 2, 4, 4],
                &[4, 2, 3, 3],
                &[4],
                &[4, 2, 2, 2],
                &[2],
                &[3, 6, 1, 1],
                &[3],
            ],
            &[xd, k1, b1, ku, bu, kh, bh],
            move |tape, ids| {
                let c1 = tape.conv2d(ids[0], ids[1], ids[2], Padding::Same).unwrap();
                let r1 = tape.relu(c1);
                let p = tape.max_pool2(r1).unwrap();
                let u = tape.up_conv2(p, ids[3], ids[4]).unwrap();
                let cat = tape.concat_channels(u, r1).unwrap();
                let logits = tape.conv2d(cat, ids[5], ids[6], Padding::Same).unwrap();
                let probs = tape.softmax_channels(logits).unwrap();
                let t = tape.gather_channels(probs, &labels).unwrap();
                tape.weighted_nll(t, &weights).unwrap()
            },
        );
    }
}
