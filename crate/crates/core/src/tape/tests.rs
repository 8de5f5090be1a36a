use super::*;
use approx::assert_relative_eq;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_identity_kernel_passes_through() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let w = tape.input(t(&[1, 1, 1, 1], &[1.0]), true);
    let b = tape.input(t(&[1], &[0.0]), true);
    let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv_ones_kernel_sums_window() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::filled(&[1, 1, 3, 3], 1.0f32), true);
    let w = tape.input(Tensor::filled(&[1, 1, 3, 3], 1.0f32), true);
    let b = tape.input(t(&[1], &[0.0]), true);
    let y = tape.conv2d(x, w, b, 1, Padding::Valid).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_relative_eq!(tape.value(y).data()[0], 9.0);
}

#[test]
fn conv_same_stride2_halves_spatial_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::filled(&[2, 3, 4, 4], 0.5f32), false);
    let w = tape.input(Tensor::filled(&[5, 3, 3, 3], 0.1f32), true);
    let b = tape.input(Tensor::zeros(&[5]), true);
    let y = tape.conv2d(x, w, b, 2, Padding::Same).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 5, 2, 2]);
}

#[test]
fn conv_bias_reaches_every_position() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]), false);
    let w = tape.input(t(&[2, 1, 1, 1], &[1.0, 1.0]), true);
    let b = tape.input(t(&[2], &[0.5, -1.5]), true);
    let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]
    );
}

#[test]
fn conv_grad_accumulates_across_batch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::filled(&[2, 1, 2, 2], 1.0f32), false);
    let w = tape.input(t(&[1, 1, 1, 1], &[2.0]), true);
    let b = tape.input(t(&[1], &[0.0]), true);
    let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    // d/dw sums over 8 positions each seeing x = 1
    assert_relative_eq!(tape.grad(w).unwrap().data()[0], 8.0);
    assert_relative_eq!(tape.grad(b).unwrap().data()[0], 8.0);
}

#[test]
fn upsample_repeats_and_backward_sums() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = tape.upsample_nearest2x(x).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn relu_zeroes_negatives_and_their_grads() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 4], &[-1.0, 0.0, 0.5, 2.0]), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.5, 2.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn sigmoid_at_zero_has_quarter_slope() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1], &[0.0]), true);
    let y = tape.sigmoid(x);
    assert_relative_eq!(tape.value(y).data()[0], 0.5);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_relative_eq!(tape.grad(x).unwrap().data()[0], 0.25);
}

#[test]
fn max_pool_picks_max_and_routes_grad_there() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = tape.max_pool2x2(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_relative_eq!(tape.value(y).data()[0], 4.0);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn max_pool_tie_routes_to_first_position() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::filled(&[1, 1, 2, 2], 7.0f32), true);
    let y = tape.max_pool2x2(x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_rejects_odd_spatial_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::zeros(&[1, 1, 3, 3]), false);
    assert!(matches!(tape.max_pool2x2(x), Err(Error::Dimension(_))));
}

#[test]
fn global_avg_pool_means_each_plane() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]), true);
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 1, 1]);
    assert_eq!(tape.value(y).data(), &[2.5, 10.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 8]);
}

#[test]
fn dense_matches_hand_product() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    let w = tape.input(t(&[2, 1], &[1.0, 1.0]), true);
    let b = tape.input(t(&[1], &[0.0]), true);
    let y = tape.dense(x, w, b).unwrap();
    assert_relative_eq!(tape.value(y).data()[0], 3.0);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);
}

#[test]
fn add_fans_gradient_to_both_inputs() {
    let mut tape = Tape::<f32>::new();
    let a = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    let b = tape.input(t(&[1, 2], &[10.0, 20.0]), true);
    let y = tape.add(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 22.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 100.0, 100.0, 100.0]), false);
    let y = tape.softmax(x).unwrap();
    let d = tape.value(y).data();
    assert_relative_eq!(d[0] + d[1] + d[2], 1.0, epsilon = 1e-6);
    for &v in &d[3..6] {
        assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-6);
    }
}

#[test]
fn mse_value_and_grad() {
    let mut tape = Tape::<f32>::new();
    let p = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    let y = tape.input(t(&[1, 2], &[0.0, 0.0]), false);
    let loss = tape.mse(p, y).unwrap();
    assert_relative_eq!(tape.value(loss).data()[0], 2.5);
    tape.backward(loss).unwrap();
    // 2 * (p - t) / numel
    assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
    assert!(tape.grad(y).is_none());
}

#[test]
fn identical_pred_and_target_give_zero_mse() {
    let mut tape = Tape::<f32>::new();
    let p = tape.input(t(&[2, 2], &[0.3, -0.7, 1.5, 0.0]), true);
    let y = tape.input(t(&[2, 2], &[0.3, -0.7, 1.5, 0.0]), false);
    let loss = tape.mse(p, y).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn cross_entropy_on_uniform_logits_is_ln_classes() {
    let mut tape = Tape::<f32>::new();
    let logits = tape.input(Tensor::zeros(&[4, 10]), true);
    let loss = tape.softmax_cross_entropy(logits, &[0, 3, 7, 9]).unwrap();
    assert_relative_eq!(tape.value(loss).data()[0], 10.0f32.ln(), epsilon = 1e-6);
    tape.backward(loss).unwrap();
    let g = tape.grad(logits).unwrap().data();
    // (p - onehot) / batch, p uniform
    assert_relative_eq!(g[0], (0.1 - 1.0) / 4.0, epsilon = 1e-6);
    assert_relative_eq!(g[1], 0.1 / 4.0, epsilon = 1e-6);
}

#[test]
fn cross_entropy_is_shift_invariant() {
    let rows = [[2.0f32, -1.0, 0.5], [0.0, 0.0, 3.0]];
    let mut shifted = Vec::new();
    let mut plain = Vec::new();
    for row in rows {
        plain.extend_from_slice(&row);
        shifted.extend(row.iter().map(|v| v + 1000.0));
    }
    let mut t1 = Tape::<f32>::new();
    let l1 = t1.input(t(&[2, 3], &plain), false);
    let a = t1.softmax_cross_entropy(l1, &[0, 2]).unwrap();
    let mut t2 = Tape::<f32>::new();
    let l2 = t2.input(t(&[2, 3], &shifted), false);
    let b = t2.softmax_cross_entropy(l2, &[0, 2]).unwrap();
    assert_relative_eq!(t1.value(a).data()[0], t2.value(b).data()[0], epsilon = 1e-5);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut tape = Tape::<f32>::new();
    let logits = tape.input(Tensor::zeros(&[2, 3]), false);
    assert!(tape.softmax_cross_entropy(logits, &[0, 3]).is_err());
    assert!(tape.softmax_cross_entropy(logits, &[0]).is_err());
    assert!(tape.softmax_cross_entropy(logits, &[]).is_err());
}

#[test]
fn batchnorm_train_normalizes_batch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let gamma = tape.input(Tensor::filled(&[1], 1.0f32), true);
    let beta = tape.input(Tensor::zeros(&[1]), true);
    let mut rm = vec![0.0f32];
    let mut rv = vec![1.0f32];
    let y = tape
        .batchnorm_train(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5)
        .unwrap();
    let d = tape.value(y).data();
    let mean: f32 = d.iter().sum::<f32>() / 4.0;
    let var: f32 = d.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
    assert_relative_eq!(mean, 0.0, epsilon = 1e-5);
    assert_relative_eq!(var, 1.0, epsilon = 1e-3);
    // running mean moves 10% of the way towards the batch mean of 2.5
    assert_relative_eq!(rm[0], 0.25, epsilon = 1e-6);
    // unbiased batch var = 5/3; 0.9 * 1 + 0.1 * 5/3
    assert_relative_eq!(rv[0], 0.9 + 0.1 * 5.0 / 3.0, epsilon = 1e-5);
}

#[test]
fn batchnorm_eval_uses_frozen_stats() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1, 1, 2], &[3.0, 5.0]), true);
    let gamma = tape.input(Tensor::filled(&[1], 2.0f32), true);
    let beta = tape.input(Tensor::filled(&[1], 1.0f32), true);
    let rm = vec![3.0f32];
    let rv = vec![4.0f32];
    let y = tape.batchnorm_eval(x, gamma, beta, &rm, &rv, 0.0).unwrap();
    // (x - 3) / 2 * 2 + 1
    assert_relative_eq!(tape.value(y).data()[0], 1.0, epsilon = 1e-6);
    assert_relative_eq!(tape.value(y).data()[1], 3.0, epsilon = 1e-6);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    // dx = gamma / sqrt(var)
    assert_relative_eq!(tape.grad(x).unwrap().data()[0], 1.0, epsilon = 1e-6);
    assert_relative_eq!(tape.grad(beta).unwrap().data()[0], 2.0, epsilon = 1e-6);
}

#[test]
fn batchnorm_train_rejects_single_value_channels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::zeros(&[1, 3, 1, 1]), true);
    let gamma = tape.input(Tensor::filled(&[3], 1.0f32), true);
    let beta = tape.input(Tensor::zeros(&[3]), true);
    let mut rm = vec![0.0f32; 3];
    let mut rv = vec![1.0f32; 3];
    assert!(matches!(
        tape.batchnorm_train(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn flatten_round_trips_gradients() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = tape.flatten(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().shape(), &[1, 2, 1, 2]);
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn sum_backward_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[2, 2], &[1.0, -2.0, 3.0, -4.0]), true);
    let loss = tape.sum(x);
    assert_relative_eq!(tape.value(loss).data()[0], -2.0);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn disconnected_leaf_keeps_no_grad() {
    let mut tape = Tape::<f32>::new();
    let a = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    let other = tape.input(t(&[1, 2], &[5.0, 5.0]), true);
    let loss = tape.sum(a);
    tape.backward(loss).unwrap();
    assert!(tape.grad(other).is_none());
    assert_eq!(tape.grad_or_zeros(other).data(), &[0.0, 0.0]);
}

#[test]
fn second_backward_is_a_state_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 1], &[2.0]), true);
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::State(_))));
}

#[test]
fn backward_from_nonscalar_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
}

#[test]
fn no_grad_graph_records_no_steps() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::filled(&[1, 1, 4, 4], 1.0f32));
    let y = tape.max_pool2x2(x).unwrap();
    let _ = tape.sum(y);
    assert_eq!(tape.num_steps(), 0);
}

#[test]
fn chained_ops_compose_gradients() {
    // loss = sum(relu(a + b)) with a = [1, -3], b = [1, 1]
    let mut tape = Tape::<f32>::new();
    let a = tape.input(t(&[1, 2], &[1.0, -3.0]), true);
    let b = tape.input(t(&[1, 2], &[1.0, 1.0]), true);
    let s = tape.add(a, b).unwrap();
    let r = tape.relu(s);
    let loss = tape.sum(r);
    assert_relative_eq!(tape.value(loss).data()[0], 2.0);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 0.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn reused_node_accumulates_both_paths() {
    // loss = sum(x + x) so dx = 2
    let mut tape = Tape::<f32>::new();
    let x = tape.input(t(&[1, 2], &[1.0, 2.0]), true);
    let y = tape.add(x, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
}
