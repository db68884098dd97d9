use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rover_suspension::approx::{Adam, ApproxError, Mlp};

fn net(seed: u64) -> Mlp {
    Mlp::new(&[4, 16, 16, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Scalar-loop forward pass, keeping every layer's pre-activation.
fn hand_forward(net: &Mlp, x: &[f64]) -> Vec<Vec<f64>> {
    let mut layers = vec![x.to_vec()];
    for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        let h = layers.last().unwrap();
        let mut z = vec![0.0; w.ncols()];
        for j in 0..w.ncols() {
            z[j] = b[j];
            for i in 0..w.nrows() {
                let a = if l == 0 { h[i] } else { h[i].max(0.0) };
                z[j] += a * w[(i, j)];
            }
        }
        layers.push(z);
    }
    layers
}

/// Gradients of `0.5 * out^2` by the chain rule written out per unit.
fn hand_backward(net: &Mlp, x: &[f64]) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
    let layers = hand_forward(net, x);
    let n = net.weights.len();
    let mut gw: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
    let mut gb: Vec<Array1<f64>> = net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
    let mut delta = layers[n].clone();
    for l in (0..n).rev() {
        let input: Vec<f64> = if l == 0 { layers[0].clone() } else { layers[l].iter().map(|v| v.max(0.0)).collect() };
        for j in 0..delta.len() {
            gb[l][j] = delta[j];
            for i in 0..input.len() {
                gw[l][(i, j)] = input[i] * delta[j];
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; input.len()];
            for (i, p) in prev.iter_mut().enumerate() {
                let mut s = 0.0;
                for (j, d) in delta.iter().enumerate() {
                    s += net.weights[l][(i, j)] * d;
                }
                *p = if layers[l][i] > 0.0 { s } else { 0.0 };
            }
            delta = prev;
        }
    }
    (gw, gb)
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 0..5 {
        let m = net(seed);
        for k in 0..10 {
            let x = [0.3 * k as f64 - 1.0, 0.7, -0.2 * k as f64, 1.5];
            let want = hand_forward(&m, &x).last().unwrap()[0];
            let got = m.forward(&x).unwrap()[0];
            assert!((want - got).abs() < 1e-12, "{want} vs {got}");
        }
    }
}

#[test]
fn backward_matches_scalar_oracle() {
    let m = net(3);
    let x = [0.4, -1.2, 0.9, 0.05];
    let input = Array2::from_shape_vec((1, 4), x.to_vec()).unwrap();
    let (out, tape) = m.forward_batch(input.view());
    let (grads, _) = m.backward(&tape, out.view());
    let (gw, gb) = hand_backward(&m, &x);
    for l in 0..3 {
        assert!((&grads.weights[l] - &gw[l]).iter().all(|d| d.abs() < 1e-12));
        assert!((&grads.biases[l] - &gb[l]).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn batch_gradient_is_the_sum_of_row_gradients() {
    let m = net(8);
    let rows = [[0.1, 0.2, 0.3, 0.4], [-1.0, 0.5, 2.0, -0.3], [0.7, -0.7, 0.0, 1.1]];
    let x = Array2::from_shape_fn((3, 4), |(i, j)| rows[i][j]);
    let (out, tape) = m.forward_batch(x.view());
    let (batch, _) = m.backward(&tape, out.view());
    let mut total = vec![0.0; m.param_count()];
    for r in rows {
        let (gw, gb) = hand_backward(&m, &r);
        let mut flat: Vec<f64> = Vec::new();
        for (w, b) in gw.iter().zip(&gb) {
            flat.extend(w.iter().copied());
            flat.extend(b.iter().copied());
        }
        for (t, g) in total.iter_mut().zip(flat) {
            *t += g;
        }
    }
    for (a, b) in batch.flat().iter().zip(&total) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn input_gradient_by_central_difference() {
    let m = net(11);
    let x = [0.2, -0.4, 0.6, -0.8];
    let input = Array2::from_shape_vec((1, 4), x.to_vec()).unwrap();
    let (_, tape) = m.forward_batch(input.view());
    let (_, gx) = m.backward(&tape, Array2::ones((1, 1)).view());
    for i in 0..4 {
        let h = 1e-6;
        let mut a = x;
        let mut b = x;
        a[i] += h;
        b[i] -= h;
        let fd = (m.forward(&a).unwrap()[0] - m.forward(&b).unwrap()[0]) / (2.0 * h);
        assert!((fd - gx[(0, i)]).abs() < 1e-7);
    }
}

#[test]
fn adam_first_steps_by_hand() {
    let mut opt = Adam::new(0.1, 2);
    let mut p = vec![1.0, -2.0];
    let grads = [[0.5, -1.0], [0.25, 3.0]];
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    let mut want = p.clone();
    for (t, g) in grads.iter().enumerate() {
        opt.step_slice(&mut p, g).unwrap();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            want[i] -= 0.1 * mh / (vh.sqrt() + eps);
        }
    }
    for i in 0..2 {
        assert!((p[i] - want[i]).abs() < 1e-12);
    }
    assert_eq!(opt.t, 2);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut opt = Adam::new(0.1, 2);
    let mut p = vec![1.0, 2.0];
    assert!(opt.step_slice(&mut p, &[f64::NAN, 0.0]).is_err());
    assert_eq!(p, vec![1.0, 2.0]);
}

#[test]
fn serialization_round_trips() {
    let m = net(21);
    let mut bytes = Vec::new();
    m.write_to(&mut bytes).unwrap();
    let back = Mlp::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(m.sizes(), back.sizes());
    assert_eq!(m.flat(), back.flat());
    let truncated = &bytes[..bytes.len() - 3];
    assert!(Mlp::read_from(&mut &truncated[..]).is_err());
}

#[test]
fn dimension_checks() {
    let m = net(0);
    assert!(matches!(m.forward(&[1.0, 2.0]), Err(ApproxError::DimensionMismatch { expected: 4, got: 2 })));
    assert!(Mlp::new(&[4], 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(m.clone().set_flat(&[0.0; 3]).is_err());
}

#[test]
fn polyak_moves_by_tau() {
    let src = net(1);
    let mut dst = net(2);
    let before = dst.flat();
    dst.polyak_from(&src, 0.25);
    for ((d, b), s) in dst.flat().iter().zip(&before).zip(src.flat()) {
        assert!((d - (0.75 * b + 0.25 * s)).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn flat_round_trips(seed in 0u64..1000) {
        let m = net(seed);
        let mut other = net(seed + 1);
        other.set_flat(&m.flat()).unwrap();
        prop_assert_eq!(other.flat(), m.flat());
    }

    #[test]
    fn relu_net_is_positively_homogeneous_without_biases(seed in 0u64..200, k in 0.1f64..10.0) {
        let m = net(seed);
        let zero_b: Vec<Array1<f64>> = m.biases.iter().map(|b| Array1::zeros(b.len())).collect();
        let m = Mlp::from_parts(m.weights.clone(), zero_b).unwrap();
        let x = [0.3, -0.1, 0.8, 0.5];
        let xk = x.map(|v| v * k);
        let a = m.forward(&x).unwrap()[0] * k;
        let b = m.forward(&xk).unwrap()[0];
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }
}
