use super::gradcheck::{check_tape_fn, max_rel_error};
use super::tape::{BnMode, Tape, TensorId};
use super::{adam_step, AdamParams, AdamState};
use super::{BoundParams, ParamKind, ParamStore, TensorError};
use crate::rng::SeedStream;

const F64_H: f64 = 1e-5;
const F64_TOL: f64 = 1e-7;

fn seq(n: usize) -> Vec<f64> {
    (1..=n).map(|v| v as f64).collect()
}

fn noise(n: usize, tag: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = SeedStream::new(0x5eed).child(tag);
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "index {i}: got {g}, want {w} (tol {tol})"
        );
    }
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 1, 3, 3], seq(9), false).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = t.leaf(vec![1, 1, 3, 3], k, false).unwrap();
    let b = t.leaf(vec![1], vec![0.0], false).unwrap();
    let y = t.conv2d(x, w, b, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert_close(t.value(y), &seq(9), 1e-12);
}

#[test]
fn conv_ones_kernel_counts_neighbors() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let w = t.leaf(vec![1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let b = t.leaf(vec![1], vec![0.0], false).unwrap();
    let y = t.conv2d(x, w, b, 1).unwrap();
    assert_close(
        t.value(y),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0],
        1e-12,
    );
}

#[test]
fn conv_stride2_halves_extent() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 1, 5, 5], vec![1.0; 25], false).unwrap();
    let w = t.leaf(vec![1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let b = t.leaf(vec![1], vec![0.0], false).unwrap();
    let y = t.conv2d(x, w, b, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert_close(
        t.value(y),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0],
        1e-12,
    );
}

#[test]
fn conv_bias_and_multi_channel() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 2, 2, 2], seq(8), false).unwrap();
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0;
    k[9 + 4] = 1.0;
    k[18 + 4] = 2.0;
    let w = t.leaf(vec![2, 2, 3, 3], k, false).unwrap();
    let b = t.leaf(vec![2], vec![0.5, -0.5], false).unwrap();
    let y = t.conv2d(x, w, b, 1).unwrap();
    assert_close(
        t.value(y),
        &[6.5, 8.5, 10.5, 12.5, 1.5, 3.5, 5.5, 7.5],
        1e-12,
    );
}

#[test]
fn fully_connected_matches_hand_product() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 3], vec![1.0, 2.0, 3.0], false).unwrap();
    let w = t
        .leaf(vec![2, 3], vec![0.5, 0.5, 0.5, 1.0, 0.0, -1.0], false)
        .unwrap();
    let b = t.leaf(vec![2], vec![0.5, 0.0], false).unwrap();
    let y = t.fully_connected(x, w, b).unwrap();
    assert_close(t.value(y), &[3.5, -2.0], 1e-12);
}

#[test]
fn sigmoid_reference_values_and_guard() {
    let mut t: Tape<f32> = Tape::new();
    let x = t
        .leaf(vec![4], vec![0.0, 1.0, 100.0, -100.0], false)
        .unwrap();
    let y = t.sigmoid(x).unwrap();
    let v = t.value(y);
    assert!((v[0] - 0.5).abs() < 1e-6);
    assert!((v[1] - 0.731_058_6).abs() < 1e-6);
    assert!(v[2] < 1.0 && v[2] > 0.999_999);
    assert!(v[3] > 0.0 && v[3] < 1e-6);
}

#[test]
fn global_avg_pool_means_each_plane() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![2, 1, 2, 2], seq(8), false).unwrap();
    let y = t.global_avg_pool(x).unwrap();
    assert_close(t.value(y), &[2.5, 6.5], 1e-12);
}

#[test]
fn concat_keeps_order_per_example() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.leaf(vec![1, 1, 2, 2], seq(4), false).unwrap();
    let b = t.leaf(
        vec![1, 2, 2, 2],
        (5..=12).map(|v| v as f64).collect(),
        false,
    )
    .unwrap();
    let y = t.concat_channels(&[a, b]).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 2, 2]);
    assert_close(t.value(y), &seq(12), 1e-12);
}

#[test]
fn broadcast_channel_and_plane_mul() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 2, 1, 2], seq(4), false).unwrap();
    let s = t.leaf(vec![1, 2], vec![10.0, 100.0], false).unwrap();
    let y = t.mul(x, s).unwrap();
    assert_close(t.value(y), &[10.0, 20.0, 300.0, 400.0], 1e-12);

    let p = t.leaf(vec![1, 1, 1, 2], vec![10.0, 100.0], false).unwrap();
    let z = t.mul(x, p).unwrap();
    assert_close(t.value(z), &[10.0, 200.0, 30.0, 400.0], 1e-12);
}

#[test]
fn blur_preserves_constant_images() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 1, 12, 11], vec![1.0; 132], false).unwrap();
    let y = t.gauss_blur_valid(x).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 1]);
    assert_close(t.value(y), &[1.0, 1.0], 1e-12);
}

#[test]
fn reductions_and_per_example_sums() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![2, 1, 1, 2], seq(4), false).unwrap();
    let s = t.sum_all(x).unwrap();
    let m = t.mean_all(x).unwrap();
    let p = t.sum_per_example(x).unwrap();
    assert_close(t.value(s), &[10.0], 1e-12);
    assert_close(t.value(m), &[2.5], 1e-12);
    assert_close(t.value(p), &[3.0, 7.0], 1e-12);
}

#[test]
fn batch_norm_train_normalizes_and_tracks_running() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 1, 2, 2], seq(4), false).unwrap();
    let g = t.leaf(vec![1], vec![1.0], false).unwrap();
    let b = t.leaf(vec![1], vec![0.0], false).unwrap();
    let mut running = vec![0.0, 1.0];
    let y = t
        .batch_norm(x, g, b, &mut running, BnMode::Train, 0.1, 1e-5)
        .unwrap();
    let istd = 1.0 / (1.25f64 + 1e-5).sqrt();
    let want: Vec<f64> = [-1.5, -0.5, 0.5, 1.5].iter().map(|d| d * istd).collect();
    assert_close(t.value(y), &want, 1e-9);
    assert_close(&running, &[0.25, 0.9 + 0.1 * (1.25 * 4.0 / 3.0)], 1e-9);

    let mut t2: Tape<f64> = Tape::new();
    let x2 = t2.leaf(vec![1, 1, 1, 1], vec![3.0], false).unwrap();
    let g2 = t2.leaf(vec![1], vec![2.0], false).unwrap();
    let b2 = t2.leaf(vec![1], vec![1.0], false).unwrap();
    let mut run2 = vec![1.0, 4.0];
    let y2 = t2
        .batch_norm(x2, g2, b2, &mut run2, BnMode::Eval, 0.1, 0.0)
        .unwrap();
    assert_close(t2.value(y2), &[3.0], 1e-9);
    assert_close(&run2, &[1.0, 4.0], 0.0);
}

#[test]
fn batch_norm_rejects_single_sample_training() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 2, 1, 1], vec![1.0, 2.0], false).unwrap();
    let g = t.leaf(vec![2], vec![1.0, 1.0], false).unwrap();
    let b = t.leaf(vec![2], vec![0.0, 0.0], false).unwrap();
    let mut running = vec![0.0; 4];
    let err = t
        .batch_norm(x, g, b, &mut running, BnMode::Train, 0.1, 1e-5)
        .unwrap_err();
    assert!(matches!(err, TensorError::DegenerateBatch));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![2], vec![1.0, -2.0], true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq).unwrap();
    t.backward(loss).unwrap();
    assert_close(t.grad(x).unwrap(), &[2.0, -4.0], 1e-12);
    t.backward(loss).unwrap();
    assert_close(t.grad(x).unwrap(), &[4.0, -8.0], 1e-12);
}

#[test]
fn backward_requires_scalar_and_known_ids() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(
        t.backward(x),
        Err(TensorError::NotScalar { numel: 2 })
    ));
    let y = t.sum_all(x).unwrap();
    assert!(t.grad(y).is_none());
    t.backward(y).unwrap();
    assert!(t.grad(y).is_none());
    assert!(t.grad(x).is_some());
}

#[test]
fn shape_mismatches_are_reported() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.leaf(vec![2], vec![1.0, 2.0], false).unwrap();
    let b = t.leaf(vec![3], vec![1.0, 2.0, 3.0], false).unwrap();
    assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(t.sub(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(t.leaf(vec![2], vec![1.0], false).is_err());
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store: ParamStore<f64> = ParamStore::new();
    store
        .insert("p", vec![2], vec![1.0, -3.0], ParamKind::Trainable)
        .unwrap();
    store.get_mut("p").unwrap().grad = vec![0.5, -0.25];
    let mut state = AdamState::for_store(&store);
    adam_step(&mut store, &mut state, AdamParams::with_lr(1e-3));
    let p = &store.get("p").unwrap().data;
    assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-7);
    assert!((p[1] - (-3.0 + 1e-3)).abs() < 1e-7);
    assert_eq!(state.step, 1);
}

#[test]
fn bound_params_round_trip_gradients() {
    let mut store: ParamStore<f64> = ParamStore::new();
    store
        .insert("w", vec![2], vec![2.0, 3.0], ParamKind::Trainable)
        .unwrap();
    store
        .insert("frozen", vec![1], vec![5.0], ParamKind::Fixed)
        .unwrap();
    store
        .insert("stats", vec![2], vec![0.0, 1.0], ParamKind::Stat)
        .unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let bound = BoundParams::bind(&mut tape, &store, true).unwrap();
    let w = bound.id(store.index_of("w").unwrap());
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    tape.backward(loss).unwrap();
    bound.harvest(&tape, &mut store);
    assert_close(&store.get("w").unwrap().grad, &[4.0, 6.0], 1e-12);
    assert_close(&store.get("frozen").unwrap().grad, &[0.0], 0.0);
}

fn gc(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
) {
    let outcome = check_tape_fn(inputs, F64_H, build).unwrap();
    assert!(
        outcome.max_rel < F64_TOL,
        "max rel error {} over {} probes",
        outcome.max_rel,
        outcome.probes
    );
}

#[test]
fn gradcheck_conv_both_strides() {
    for stride in [1usize, 2] {
        let inputs = vec![
            (vec![2, 2, 5, 4], noise(80, 1, -1.0, 1.0)),
            (vec![3, 2, 3, 3], noise(54, 2, -0.5, 0.5)),
            (vec![3], noise(3, 3, -0.5, 0.5)),
        ];
        gc(&inputs, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], stride)?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        });
    }
}

#[test]
fn conv1x1_is_a_per_pixel_channel_map() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1, 2, 1, 2], seq(4), false).unwrap();
    let w = t.leaf(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], false).unwrap();
    let b = t.leaf(vec![3], vec![0.0, 0.0, 10.0], false).unwrap();
    let y = t.conv1x1(x, w, b).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 1, 2]);
    assert_close(t.value(y), &[1.0, 2.0, 3.0, 4.0, 14.0, 16.0], 1e-12);
}

#[test]
fn gradcheck_conv1x1() {
    let inputs = vec![
        (vec![2, 3, 2, 3], noise(36, 24, -1.0, 1.0)),
        (vec![2, 3], noise(6, 25, -0.6, 0.6)),
        (vec![2], noise(2, 26, -0.3, 0.3)),
    ];
    gc(&inputs, |t, ids| {
        let y = t.conv1x1(ids[0], ids[1], ids[2])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    let inputs = vec![
        (vec![2, 3, 2, 2], noise(24, 4, -2.0, 2.0)),
        (vec![3], noise(3, 5, 0.5, 1.5)),
        (vec![3], noise(3, 6, -0.5, 0.5)),
    ];
    for mode in [BnMode::Train, BnMode::Eval] {
        gc(&inputs, move |t, ids| {
            let mut running = vec![0.1, -0.2, 0.3, 1.0, 0.5, 2.0];
            let y = t.batch_norm(ids[0], ids[1], ids[2], &mut running, mode, 0.1, 1e-5)?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        });
    }
}

#[test]
fn gradcheck_pointwise_ops() {
    let inputs = vec![(vec![2, 7], noise(14, 7, -2.0, 2.0))];
    gc(&inputs, |t, ids| {
        let y = t.leaky_relu(ids[0], 0.2)?;
        let z = t.sigmoid(y)?;
        let w = t.mul_scalar(z, 3.0)?;
        let v = t.add_scalar(w, -1.0)?;
        t.sum_all(v)
    });
}

#[test]
fn gradcheck_abs_sqrt_clamp_away_from_kinks() {
    let mut vals = noise(12, 8, 0.2, 0.9);
    vals.extend(noise(4, 9, -0.9, -0.2));
    let inputs = vec![(vec![16], vals)];
    gc(&inputs, |t, ids| {
        let a = t.abs(ids[0])?;
        let s = t.sqrt(a)?;
        let c = t.clamp01(s)?;
        t.sum_all(c)
    });
}

#[test]
fn clamp01_blocks_gradient_outside_interval() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![3], vec![-0.5, 0.5, 1.5], true).unwrap();
    let y = t.clamp01(x).unwrap();
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    assert_close(t.grad(x).unwrap(), &[0.0, 1.0, 0.0], 1e-12);
}

#[test]
fn gradcheck_fully_connected_and_pool() {
    let inputs = vec![
        (vec![2, 2, 3, 3], noise(36, 10, -1.0, 1.0)),
        (vec![3, 2], noise(6, 11, -0.7, 0.7)),
        (vec![3], noise(3, 12, -0.3, 0.3)),
    ];
    gc(&inputs, |t, ids| {
        let p = t.global_avg_pool(ids[0])?;
        let y = t.fully_connected(p, ids[1], ids[2])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn gradcheck_binary_broadcasts_and_div() {
    let inputs = vec![
        (vec![2, 3, 2, 2], noise(24, 13, -1.0, 1.0)),
        (vec![2, 3], noise(6, 14, 0.5, 1.5)),
        (vec![2, 1, 2, 2], noise(8, 15, 0.5, 1.5)),
        (vec![2, 3, 2, 2], noise(24, 16, 1.0, 2.0)),
    ];
    gc(&inputs, |t, ids| {
        let a = t.mul(ids[0], ids[1])?;
        let b = t.add(a, ids[2])?;
        let c = t.add(ids[1], b)?;
        let d = t.mul(c, ids[2])?;
        let e = t.div(d, ids[3])?;
        let f = t.sub(e, ids[0])?;
        t.mean_all(f)
    });
}

#[test]
fn gradcheck_concat_and_per_example() {
    let inputs = vec![
        (vec![2, 2, 2, 2], noise(16, 17, -1.0, 1.0)),
        (vec![2, 1, 2, 2], noise(8, 18, -1.0, 1.0)),
    ];
    gc(&inputs, |t, ids| {
        let y = t.concat_channels(&[ids[0], ids[1]])?;
        let sq = t.mul(y, y)?;
        let p = t.sum_per_example(sq)?;
        let r = t.sqrt(p)?;
        t.mean_all(r)
    });
}

#[test]
fn gradcheck_gauss_blur() {
    let inputs = vec![(vec![1, 2, 12, 13], noise(312, 19, -1.0, 1.0))];
    gc(&inputs, |t, ids| {
        let y = t.gauss_blur_valid(ids[0])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn gradcheck_detects_corrupted_gradients() {
    let inputs = vec![(vec![4], noise(4, 20, -1.0, 1.0))];
    let mut tape: Tape<f64> = Tape::new();
    let x = tape
        .leaf(inputs[0].0.clone(), inputs[0].1.clone(), true)
        .unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic = vec![tape.grad(x).unwrap().to_vec()];
    analytic[0][2] += 0.5;
    let outcome = max_rel_error(&inputs, &analytic, F64_H, |probe| {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(probe[0].0.clone(), probe[0].1.clone(), false)?;
        let sq = t.mul(x, x)?;
        let loss = t.sum_all(sq)?;
        Ok(t.value(loss)[0])
    })
    .unwrap();
    assert!(outcome.max_rel > 0.1);
}

#[test]
fn f32_forward_matches_f64_loosely() {
    let shape = vec![1, 2, 4, 4];
    let vals = noise(32, 21, -1.0, 1.0);
    let w = noise(2 * 2 * 9, 22, -0.3, 0.3);
    let b = noise(2, 23, -0.1, 0.1);

    let mut t64: Tape<f64> = Tape::new();
    let x = t64.leaf(shape.clone(), vals.clone(), false).unwrap();
    let wid = t64.leaf(vec![2, 2, 3, 3], w.clone(), false).unwrap();
    let bid = t64.leaf(vec![2], b.clone(), false).unwrap();
    let y = t64.conv2d(x, wid, bid, 1).unwrap();
    let s = t64.leaky_relu(y, 0.2).unwrap();
    let m64 = t64.mean_all(s).unwrap();

    let mut t32: Tape<f32> = Tape::new();
    let x = t32
        .leaf(shape, vals.iter().map(|&v| v as f32).collect(), false)
        .unwrap();
    let wid = t32
        .leaf(vec![2, 2, 3, 3], w.iter().map(|&v| v as f32).collect(), false)
        .unwrap();
    let bid = t32
        .leaf(vec![2], b.iter().map(|&v| v as f32).collect(), false)
        .unwrap();
    let y = t32.conv2d(x, wid, bid, 1).unwrap();
    let s = t32.leaky_relu(y, 0.2).unwrap();
    let m32 = t32.mean_all(s).unwrap();

    let d = (t64.value(m64)[0] - t32.value(m32)[0] as f64).abs();
    assert!(d < 1e-5, "f32/f64 drift {d}");
}
