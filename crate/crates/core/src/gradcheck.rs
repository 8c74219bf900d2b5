//! Finite-difference validation of every analytic gradient: each check
//! builds a small random graph, runs backward, and compares against central
//! differences. Shared by the test suite and the `gradcheck` CLI command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_network, BackboneConfig};
use crate::error::Result;
use crate::loss::{
    combined_rr_softargmax, pair_loss, relative_response_loss, softargmax_loss, softmax_bce_loss,
    LossConfig, LossKind,
};
use crate::matching::{Heatmap, PixelLoc};
use crate::tensor::{finite_diff_grad, stack_rows, Tensor};

pub const REL_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
const NEGLIGIBLE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub passed: bool,
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() + n.abs() < NEGLIGIBLE {
            continue;
        }
        checked += 1;
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
    }
    (worst, checked)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Compare backward against central differences for a graph `f` of one
/// variable tensor.
fn check<F>(name: &str, x: Tensor, f: F) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let loss = f(&x)?;
    x.clear_grad();
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = finite_diff_grad(&f, &x, FD_STEP)?;
    let (max_rel_err, checked_elements) = rel_err(&analytic, numeric.data());
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err,
        checked_elements,
        passed: max_rel_err <= REL_TOLERANCE && analytic.iter().all(|v| v.is_finite()),
    })
}

/// Run the whole suite. Deterministic per seed.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // conv2d w.r.t. input, stride 1 with resolution-preserving padding
    let kernel = Tensor::from_vec(random_vec(&mut rng, 3 * 2 * 9, -0.5, 0.5), &[3, 2, 3, 3], false)?;
    let weights = Tensor::from_vec(random_vec(&mut rng, 3 * 25, -1.0, 1.0), &[3, 5, 5], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 2 * 25, -1.0, 1.0), &[2, 5, 5], true)?;
    let k = kernel.clone();
    let w = weights.clone();
    results.push(check("conv2d input (stride 1, pad 1)", x, move |t| {
        Ok(t.conv2d(&k, 1, 1)?.mul(&w)?.sum_all())
    })?);

    // conv2d w.r.t. kernel
    let input = Tensor::from_vec(random_vec(&mut rng, 2 * 25, -1.0, 1.0), &[2, 5, 5], false)?;
    let weights = Tensor::from_vec(random_vec(&mut rng, 3 * 25, -1.0, 1.0), &[3, 5, 5], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 3 * 2 * 9, -0.5, 0.5), &[3, 2, 3, 3], true)?;
    let (inp, w) = (input.clone(), weights.clone());
    results.push(check("conv2d kernel (stride 1, pad 1)", x, move |t| {
        Ok(inp.conv2d(t, 1, 1)?.mul(&w)?.sum_all())
    })?);

    // conv2d with stride 2
    let kernel = Tensor::from_vec(random_vec(&mut rng, 2 * 2 * 9, -0.5, 0.5), &[2, 2, 3, 3], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 2 * 36, -1.0, 1.0), &[2, 6, 6], true)?;
    let k = kernel.clone();
    results.push(check("conv2d input (stride 2)", x, move |t| {
        Ok(t.conv2d(&k, 2, 1)?.sum_all())
    })?);

    // channel L2 normalization
    let weights = Tensor::from_vec(random_vec(&mut rng, 4 * 9, -1.0, 1.0), &[4, 3, 3], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 4 * 9, 0.2, 1.0), &[4, 3, 3], true)?;
    let w = weights.clone();
    results.push(check("channel_l2_normalize", x, move |t| {
        Ok(t.channel_l2_normalize(1e-12)?.mul(&w)?.sum_all())
    })?);

    // log softmax at an index
    let x = Tensor::from_vec(random_vec(&mut rng, 12, -2.0, 2.0), &[12], true)?;
    results.push(check("log_softmax_at", x, |t| {
        Ok(t.log_softmax_at(4)?.scalar_mul(-1.0))
    })?);

    // elementwise: add, mul, scalar_mul, rectifier (inputs away from 0)
    let other = Tensor::from_vec(random_vec(&mut rng, 10, -1.0, 1.0), &[10], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 10, -1.0, 1.0), &[10], true)?;
    let o = other.clone();
    results.push(check("add + mul + scalar_mul", x, move |t| {
        Ok(t.add(&o)?.mul(t)?.scalar_mul(0.7).sum_all())
    })?);

    let data: Vec<f64> = random_vec(&mut rng, 12, 0.1, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
        .collect();
    let x = Tensor::from_vec(data, &[12], true)?;
    results.push(check("leaky_relu (slope 0.1)", x, |t| {
        Ok(t.leaky_relu(0.1).mul(t)?.sum_all())
    })?);

    // pooling and upsampling
    let weights = Tensor::from_vec(random_vec(&mut rng, 2 * 4, -1.0, 1.0), &[2, 2, 2], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4], true)?;
    let w = weights.clone();
    results.push(check("avg_pool2", x, move |t| {
        Ok(t.avg_pool2()?.mul(&w)?.sum_all())
    })?);

    let weights = Tensor::from_vec(random_vec(&mut rng, 2 * 36, -1.0, 1.0), &[2, 6, 6], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 2 * 9, -1.0, 1.0), &[2, 3, 3], true)?;
    let w = weights.clone();
    results.push(check("upsample2_nearest", x, move |t| {
        Ok(t.upsample2_nearest()?.mul(&w)?.sum_all())
    })?);

    // concatenation (gradient splits back onto both operands)
    let other = Tensor::from_vec(random_vec(&mut rng, 2 * 9, -1.0, 1.0), &[2, 3, 3], false)?;
    let weights = Tensor::from_vec(random_vec(&mut rng, 3 * 9, -1.0, 1.0), &[3, 3, 3], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 9, -1.0, 1.0), &[1, 3, 3], true)?;
    let (o, w) = (other.clone(), weights.clone());
    results.push(check("concat_channels", x, move |t| {
        Ok(t.concat_channels(&o)?.mul(&w)?.sum_all())
    })?);

    // per-channel spatial standardization
    let weights = Tensor::from_vec(random_vec(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4], true)?;
    let w = weights.clone();
    results.push(check("instance_norm", x, move |t| {
        Ok(t.instance_norm(1e-5)?.mul(&w)?.sum_all())
    })?);

    // scaled softmax over all elements
    let weights = Tensor::from_vec(random_vec(&mut rng, 15, -1.0, 1.0), &[15], false)?;
    let x = Tensor::from_vec(random_vec(&mut rng, 15, -1.0, 1.0), &[15], true)?;
    let w = weights.clone();
    results.push(check("softmax_scaled", x, move |t| {
        Ok(t.softmax_scaled(5.0).mul(&w)?.sum_all())
    })?);

    // gather + stack + slice path used by the batched similarity conv
    let x = Tensor::from_vec(random_vec(&mut rng, 3 * 16, -1.0, 1.0), &[3, 4, 4], true)?;
    results.push(check("gather_pixel + stack_rows + slice_channel", x, |t| {
        let a = t.gather_pixel(1, 2)?;
        let b = t.gather_pixel(3, 0)?;
        let bank = stack_rows(&[a, b])?.reshape(&[2, 1, 3])?;
        let row = bank.slice_channel(1)?.reshape(&[3])?;
        Ok(row.mul(&row)?.sum_all())
    })?);

    // The four loss heads on a random heatmap. Values are drawn from a
    // band narrow enough that, under the default scale of 20, every
    // non-exempt softmax probability stays far above the f64 resolution
    // of central differences at h = 1e-5; wide-range behavior is covered
    // by the closed-form and gradient-sign tests in the loss module.
    let (hh, ww) = (6usize, 7usize);
    let gt = PixelLoc::new(2, 3);
    let config = LossConfig::default();
    let (band_lo, band_hi) = (0.35, 0.9);

    let x = Tensor::from_vec(random_vec(&mut rng, hh * ww, band_lo, band_hi), &[hh, ww], true)?;
    results.push(check("relative_response_loss", x, move |t| {
        relative_response_loss(&Heatmap::new(t.clone())?, gt, 20.0)
    })?);

    let x = Tensor::from_vec(random_vec(&mut rng, hh * ww, band_lo, band_hi), &[hh, ww], true)?;
    results.push(check("softargmax_loss", x, move |t| {
        softargmax_loss(&Heatmap::new(t.clone())?, gt, 20.0)
    })?);

    let x = Tensor::from_vec(random_vec(&mut rng, hh * ww, band_lo, band_hi), &[hh, ww], true)?;
    results.push(check("softmax_bce_loss", x, move |t| {
        softmax_bce_loss(&Heatmap::new(t.clone())?, gt, 20.0, 2.0)
    })?);

    let x = Tensor::from_vec(random_vec(&mut rng, hh * ww, band_lo, band_hi), &[hh, ww], true)?;
    let cfg = config.clone();
    results.push(check("combined_rr_softargmax", x, move |t| {
        combined_rr_softargmax(&Heatmap::new(t.clone())?, gt, &cfg)
    })?);

    // end-to-end: every parameter of a tiny network through the pair loss
    results.push(end_to_end_check(&mut rng)?);

    Ok(results)
}

/// Finite differences over every parameter of a tiny network driving the
/// full forward + similarity + relative-response pipeline.
fn end_to_end_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let config = BackboneConfig {
        input_channels: 3,
        descriptor_length: 3,
        layers_per_block: vec![1, 1],
        growth_rate: 2,
        downsample_levels: 1,
        activation_slope: 0.1,
        seed: 123,
    };
    let net = build_network(&config)?;
    let source = Tensor::from_vec(random_vec(rng, 3 * 64, 0.0, 1.0), &[3, 8, 8], false)?;
    let target = Tensor::from_vec(random_vec(rng, 3 * 64, 0.0, 1.0), &[3, 8, 8], false)?;
    let corr = vec![
        (PixelLoc::new(2, 2), PixelLoc::new(3, 3)),
        (PixelLoc::new(6, 1), PixelLoc::new(5, 2)),
    ];
    let loss_config = LossConfig::default();

    let loss = pair_loss(&net, &source, &target, &corr, &loss_config, LossKind::Rr)?;
    net.clear_grads();
    loss.backward()?;

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut all_finite = true;
    for (idx, param) in net.parameters().iter().enumerate() {
        let analytic = param.tensor.grad().unwrap_or_else(|| vec![0.0; param.tensor.numel()]);
        all_finite &= analytic.iter().all(|v| v.is_finite());
        let base = param.tensor.data().to_vec();
        let shape = param.tensor.shape().to_vec();
        let eval = |element: usize, value: f64| -> Result<f64> {
            let mut data = base.clone();
            data[element] = value;
            let mut probe = build_network(&config)?;
            let tensors: Vec<Tensor> = net
                .parameters()
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    if j == idx {
                        Tensor::from_vec(data.clone(), &shape, true)
                    } else {
                        Ok(p.tensor.clone())
                    }
                })
                .collect::<Result<_>>()?;
            probe.replace_parameters(tensors)?;
            Ok(pair_loss(&probe, &source, &target, &corr, &loss_config, LossKind::Rr)?.item())
        };
        for element in 0..base.len() {
            let plus = eval(element, base[element] + FD_STEP)?;
            let minus = eval(element, base[element] - FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[element];
            if a.abs() + numeric.abs() < NEGLIGIBLE {
                continue;
            }
            checked += 1;
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        }
    }
    Ok(GradCheck {
        name: "end-to-end pair loss (tiny network, rr)".into(),
        max_rel_err: worst,
        checked_elements: checked,
        passed: worst <= REL_TOLERANCE && all_finite,
    })
}
