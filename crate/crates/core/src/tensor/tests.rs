use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{}: {} vs {} (diff {})",
        what,
        a,
        b,
        (a - b).abs()
    );
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], requires_grad: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, requires_grad).unwrap()
}

/// Direct six-loop convolution, independent of the implementation under test.
fn naive_conv2d(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    kernel: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += input[ci * h * w + ih as usize * w + iw as usize]
                                * kernel[co * cin * kh * kw + ci * kh * kw + ki * kw + kj];
                        }
                    }
                }
                out[co * ho * wo + oh * wo + ow] = acc;
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv2d_scalar_product() {
    let input = Tensor::from_vec(vec![2.0], &[1, 1, 1], false).unwrap();
    let kernel = Tensor::from_vec(vec![3.0], &[1, 1, 1, 1], false).unwrap();
    let out = input.conv2d(&kernel, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[6.0]);
}

#[test]
fn conv2d_box_sum_counts() {
    let input = Tensor::from_vec(vec![1.0; 9], &[1, 3, 3], false).unwrap();
    let kernel = Tensor::from_vec(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
    let out = input.conv2d(&kernel, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 3, 3]);
    assert_eq!(out.data()[4], 9.0); // center
    assert_eq!(out.data()[0], 4.0); // corner
    assert_eq!(out.data()[1], 6.0); // edge
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random_tensor(&mut rng, &[2, 5, 5], false);
    let kernel = random_tensor(&mut rng, &[3, 2, 3, 3], false);
    let out = input.conv2d(&kernel, 1, 0).unwrap();
    let (expected, ho, wo) = naive_conv2d(input.data(), (2, 5, 5), kernel.data(), (3, 3, 3), 1, 0);
    assert_eq!(out.shape(), &[3, ho, wo]);
    for (a, b) in out.data().iter().zip(&expected) {
        assert_close(*a, *b, 1e-12, "conv vs naive oracle");
    }
}

#[test]
fn conv2d_matches_naive_oracle_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let cin = rng.gen_range(1..=16);
        let cout = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=8usize);
        let w = rng.gen_range(1..=8usize);
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=(k / 2 + 1));
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let input = random_tensor(&mut rng, &[cin, h, w], false);
        let kernel = random_tensor(&mut rng, &[cout, cin, k, k], false);
        let out = input.conv2d(&kernel, stride, pad).unwrap();
        let (expected, ho, wo) =
            naive_conv2d(input.data(), (cin, h, w), kernel.data(), (cout, k, k), stride, pad);
        assert_eq!(out.shape(), &[cout, ho, wo]);
        for (a, b) in out.data().iter().zip(&expected) {
            assert_close(*a, *b, 1e-12, "conv vs naive oracle (random shapes)");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let input = Tensor::zeros(&[2, 4, 4]);
    let kernel = Tensor::zeros(&[1, 3, 3, 3]);
    let err = input.conv2d(&kernel, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2") && msg.contains("3"), "diagnostic: {}", msg);
}

#[test]
fn conv2d_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input = random_tensor(&mut rng, &[4, 12, 10], false);
    let kernel = random_tensor(&mut rng, &[6, 4, 3, 3], false);
    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let single = pool1.install(|| input.conv2d(&kernel, 1, 1).unwrap());
    let multi = input.conv2d(&kernel, 1, 1).unwrap();
    assert_eq!(single.data(), multi.data());
}

#[test]
fn l2_normalize_345_triangle() {
    let map = Tensor::from_vec(vec![3.0, 4.0], &[2, 1, 1], false).unwrap();
    let out = map.channel_l2_normalize(1e-12).unwrap();
    assert_close(out.data()[0], 0.6, 1e-15, "3-4-5 x");
    assert_close(out.data()[1], 0.8, 1e-15, "3-4-5 y");
}

#[test]
fn l2_normalize_zero_stays_zero() {
    let map = Tensor::from_vec(vec![0.0, 0.0], &[2, 1, 1], false).unwrap();
    let out = map.channel_l2_normalize(1e-12).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0]);
}

#[test]
fn l2_normalize_norms_and_idempotence() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let map = random_tensor(&mut rng, &[7, 6, 5], false);
    let out = map.channel_l2_normalize(1e-12).unwrap();
    let (c, h, w) = (7, 6, 5);
    for p in 0..h * w {
        let norm: f64 = (0..c)
            .map(|ch| out.data()[ch * h * w + p].powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            norm == 0.0 || (norm - 1.0).abs() <= 1e-5,
            "pixel norm {}",
            norm
        );
    }
    let twice = out.channel_l2_normalize(1e-12).unwrap();
    for (a, b) in twice.data().iter().zip(out.data()) {
        assert_close(*a, *b, 1e-6, "idempotence");
    }
}

#[test]
fn log_softmax_uniform_is_minus_log_n() {
    for n in [2usize, 4, 10, 100] {
        let t = Tensor::from_vec(vec![0.7; n], &[n], false).unwrap();
        let out = t.log_softmax_at(n / 2).unwrap();
        assert_close(out.item(), -(n as f64).ln(), 1e-12, "uniform log softmax");
    }
}

#[test]
fn log_softmax_is_stable_under_large_values() {
    let t = Tensor::from_vec(vec![1000.0, 0.0], &[2], false).unwrap();
    let out = t.log_softmax_at(0).unwrap();
    assert!(out.item().is_finite());
    assert!(out.item() <= 0.0 && out.item() > -1e-300, "got {}", out.item());
}

#[test]
fn log_softmax_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let t = Tensor::from_vec(data.clone(), &[10], false).unwrap();
    for idx in 0..10 {
        // naive two-pass formula
        let sum_exp: f64 = data.iter().map(|&v| v.exp()).sum();
        let expected = data[idx] - sum_exp.ln();
        assert_close(
            t.log_softmax_at(idx).unwrap().item(),
            expected,
            1e-12,
            "log softmax vs naive",
        );
    }
}

#[test]
fn log_softmax_rejects_out_of_range_index() {
    let t = Tensor::from_vec(vec![1.0, 2.0], &[2], false).unwrap();
    assert!(matches!(
        t.log_softmax_at(2),
        Err(crate::error::Error::OutOfBounds(_))
    ));
}

#[test]
fn elementwise_examples() {
    let x = Tensor::from_vec(vec![-2.0], &[1], false).unwrap();
    assert_eq!(x.leaky_relu(0.0).data(), &[0.0]);
    assert_close(x.leaky_relu(0.1).data()[0], -0.2, 1e-15, "slope 0.1");
    let a = Tensor::from_vec(vec![1.0, 2.0], &[2], false).unwrap();
    let b = Tensor::from_vec(vec![3.0, 4.0], &[2], false).unwrap();
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
    assert_eq!(a.scalar_mul(2.5).data(), &[2.5, 5.0]);
    let c = Tensor::zeros(&[3]);
    assert!(a.add(&c).is_err());
    assert!(a.mul(&c).is_err());
}

#[test]
fn pool_and_upsample_examples() {
    let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2], false).unwrap();
    let pooled = m.avg_pool2().unwrap();
    assert_eq!(pooled.shape(), &[1, 1, 1]);
    assert_eq!(pooled.data(), &[2.5]);

    let s = Tensor::from_vec(vec![5.0], &[1, 1, 1], false).unwrap();
    let up = s.upsample2_nearest().unwrap();
    assert_eq!(up.shape(), &[1, 2, 2]);
    assert_eq!(up.data(), &[5.0, 5.0, 5.0, 5.0]);

    let constant = Tensor::from_vec(vec![3.25; 16], &[1, 4, 4], false).unwrap();
    let roundtrip = constant.avg_pool2().unwrap().upsample2_nearest().unwrap();
    assert_eq!(roundtrip.data(), constant.data());

    let odd = Tensor::zeros(&[1, 3, 4]);
    assert!(odd.avg_pool2().is_err());
}

#[test]
fn concat_examples() {
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2], false).unwrap();
    let b = Tensor::from_vec((0..8).map(|v| v as f64).collect(), &[2, 2, 2], false).unwrap();
    let cat = a.concat_channels(&b).unwrap();
    assert_eq!(cat.shape(), &[3, 2, 2]);
    assert_eq!(&cat.data()[..4], a.data());
    assert_eq!(&cat.data()[4..], b.data());
    let c = Tensor::zeros(&[1, 3, 2]);
    assert!(a.concat_channels(&c).is_err());
}

#[test]
fn concat_gradient_splits_upstream() {
    let a = Tensor::from_vec(vec![1.0, -0.5], &[1, 1, 2], true).unwrap();
    let b = Tensor::from_vec(vec![0.3, 0.9], &[1, 1, 2], true).unwrap();
    // loss = sum((concat(a,b) * weights))
    let weights = Tensor::from_vec(vec![2.0, 3.0, 4.0, 5.0], &[2, 1, 2], false).unwrap();
    let loss = a.concat_channels(&b).unwrap().mul(&weights).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2.0, 3.0]);
    assert_eq!(b.grad().unwrap(), vec![4.0, 5.0]);

    // and against finite differences on the a-slice
    let b_fixed = b.clone();
    let fd = finite_diff_grad(
        |x| {
            Ok(x.concat_channels(&b_fixed)
                .unwrap()
                .mul(&weights)
                .unwrap()
                .sum_all())
        },
        &a,
        1e-5,
    )
    .unwrap();
    for (g, f) in a.grad().unwrap().iter().zip(fd.data()) {
        assert_close(*g, *f, 1e-6, "concat grad vs fd");
    }
}

#[test]
fn backward_square_sum() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
    let loss = x.mul(&x).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_constant_loss_gives_zero_grads() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
    let loss = x.sum_all().scalar_mul(0.0);
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
    let y = x.scalar_mul(2.0);
    assert!(y.backward().is_err());
}

#[test]
fn backward_accumulates_until_cleared() {
    let x = Tensor::from_vec(vec![3.0], &[1], true).unwrap();
    let loss = x.scalar_mul(2.0);
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0]);
    x.clear_grad();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn backward_handles_reused_inputs() {
    // loss = sum(x*x) + sum(x), gradient 2x + 1
    let x = Tensor::from_vec(vec![0.5, -1.5], &[2], true).unwrap();
    let loss = sum_scalars(&[x.mul(&x).unwrap().sum_all(), x.sum_all()]).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -2.0]);
}

#[test]
fn finite_diff_basics() {
    let x = Tensor::from_vec(vec![2.0, 3.0], &[2], false).unwrap();
    let ones = finite_diff_grad(|t| Ok(t.sum_all()), &x, 1e-5).unwrap();
    for v in ones.data() {
        assert_close(*v, 1.0, 1e-9, "d sum/dx");
    }
    let prod = finite_diff_grad(
        |t| {
            let d = t.data();
            Ok(Tensor::scalar(d[0] * d[1]))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_close(prod.data()[0], 3.0, 1e-8, "d(x0*x1)/dx0");
    assert_close(prod.data()[1], 2.0, 1e-8, "d(x0*x1)/dx1");
}

#[test]
fn backward_matches_finite_diff_on_composite_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random_tensor(&mut rng, &[2, 4, 4], true);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3], false);
    let graph = |t: &Tensor| -> crate::error::Result<Tensor> {
        let c = t.conv2d(&k, 1, 1)?;
        let a = c.leaky_relu(0.1);
        let n = a.instance_norm(1e-5)?;
        let f = n.reshape(&[3 * 16])?;
        f.log_softmax_at(5).map(|l| l.scalar_mul(-1.0))
    };
    let loss = graph(&x).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad().unwrap();
    let numeric = finite_diff_grad(graph, &x, 1e-5).unwrap();
    for (a, n) in analytic.iter().zip(numeric.data()) {
        if a.abs() + n.abs() < 1e-8 {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        assert!(rel <= 1e-4, "composite graph grad rel err {}", rel);
    }
}

#[test]
fn gather_stack_slice_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let map = random_tensor(&mut rng, &[3, 4, 5], true);
    let v = map.gather_pixel(2, 3).unwrap();
    assert_eq!(v.shape(), &[3]);
    for ch in 0..3 {
        assert_eq!(v.data()[ch], map.data()[ch * 20 + 2 * 5 + 3]);
    }
    assert!(map.gather_pixel(4, 0).is_err());

    let rows = stack_rows(&[v.clone(), v.scalar_mul(2.0)]).unwrap();
    assert_eq!(rows.shape(), &[2, 3]);

    let planes = random_tensor(&mut rng, &[4, 2, 3], true);
    let p2 = planes.slice_channel(2).unwrap();
    assert_eq!(p2.shape(), &[2, 3]);
    assert_eq!(p2.data(), &planes.data()[12..18]);
    assert!(planes.slice_channel(4).is_err());

    // gradient of slice equals upstream slice
    let loss = p2.sum_all();
    loss.backward().unwrap();
    let g = planes.grad().unwrap();
    assert_eq!(&g[12..18], &[1.0; 6]);
    assert_eq!(&g[..12], &[0.0; 12]);
}

#[test]
fn softmax_scaled_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let t = random_tensor(&mut rng, &[5, 3], false);
    let p = t.softmax_scaled(20.0);
    let sum: f64 = p.data().iter().sum();
    assert_close(sum, 1.0, 1e-12, "softmax sum");
    assert!(p.data().iter().all(|&v| v >= 0.0));
}
