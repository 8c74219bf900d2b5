//! Training losses defined on a similarity heatmap plus a groundtruth
//! target location, and the per-pair loss that drives them through the
//! backbone and the 1x1 similarity convolution.

use serde::{Deserialize, Serialize};

use crate::backbone::DescriptorNetwork;
use crate::error::{Error, Result};
use crate::matching::{batched_poi_conv, DescriptorMap, Heatmap, PixelLoc};
use crate::tensor::{stack_rows, sum_scalars, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rr,
    Softargmax,
    SoftargmaxBceCombo,
    SoftmaxBce,
    RrSoftargmax,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "rr" => Ok(LossKind::Rr),
            "softargmax" => Ok(LossKind::Softargmax),
            "softargmax_bce_combo" => Ok(LossKind::SoftargmaxBceCombo),
            "softmax_bce" => Ok(LossKind::SoftmaxBce),
            "rr_softargmax" => Ok(LossKind::RrSoftargmax),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss kind {:?} (expected rr | softargmax | softargmax_bce_combo | \
                 softmax_bce | rr_softargmax)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Rr => "rr",
            LossKind::Softargmax => "softargmax",
            LossKind::SoftargmaxBceCombo => "softargmax_bce_combo",
            LossKind::SoftmaxBce => "softmax_bce",
            LossKind::RrSoftargmax => "rr_softargmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Scale applied to the heatmap before the spatial softmax.
    pub sigma: f64,
    /// Scale applied to the heatmap for the soft-argmax expectation.
    pub softargmax_temperature: f64,
    /// Standard deviation (pixels) of the groundtruth Gaussian for the
    /// cross-entropy loss.
    pub bce_gaussian_std_px: f64,
    /// Weights of the combined rr + softargmax loss.
    pub w_rr: f64,
    pub w_softargmax: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma: 20.0,
            softargmax_temperature: 20.0,
            bce_gaussian_std_px: 5.0,
            w_rr: 1.0,
            w_softargmax: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::InvalidConfig("loss sigma must be > 0".into()));
        }
        if self.softargmax_temperature <= 0.0 {
            return Err(Error::InvalidConfig("softargmax temperature must be > 0".into()));
        }
        if self.bce_gaussian_std_px <= 0.0 {
            return Err(Error::InvalidConfig("bce gaussian std must be > 0".into()));
        }
        if self.w_rr < 0.0 || self.w_softargmax < 0.0 || (self.w_rr == 0.0 && self.w_softargmax == 0.0) {
            return Err(Error::InvalidConfig(
                "combo weights must be nonnegative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

fn check_gt(heatmap: &Heatmap, gt: PixelLoc) -> Result<usize> {
    let (h, w) = (heatmap.height(), heatmap.width());
    if gt.row >= h || gt.col >= w {
        return Err(Error::OutOfBounds(format!(
            "groundtruth ({}, {}) outside {}x{} heatmap",
            gt.row, gt.col, h, w
        )));
    }
    Ok(gt.row * w + gt.col)
}

/// Negative log of the softmax probability mass at the groundtruth location
/// of the heatmap scaled by `sigma`: the loss is minimized by making the
/// response at the groundtruth dominate the summed response everywhere.
pub fn relative_response_loss(heatmap: &Heatmap, gt: PixelLoc, sigma: f64) -> Result<Tensor> {
    let index = check_gt(heatmap, gt)?;
    let flat = heatmap.tensor().reshape(&[heatmap.tensor().numel()])?;
    Ok(flat.scalar_mul(sigma).log_softmax_at(index)?.scalar_mul(-1.0))
}

/// Squared pixel distance between the softmax-expected coordinate of the
/// heatmap and the groundtruth location.
pub fn softargmax_loss(heatmap: &Heatmap, gt: PixelLoc, temperature: f64) -> Result<Tensor> {
    check_gt(heatmap, gt)?;
    let (h, w) = (heatmap.height(), heatmap.width());
    let n = h * w;
    let flat = heatmap.tensor().reshape(&[n])?;
    let probs = flat.softmax_scaled(temperature);

    let rows: Vec<f64> = (0..n).map(|i| (i / w) as f64).collect();
    let cols: Vec<f64> = (0..n).map(|i| (i % w) as f64).collect();
    let row_coord = Tensor::from_vec(rows, &[n], false)?;
    let col_coord = Tensor::from_vec(cols, &[n], false)?;

    let expected_row = probs.mul(&row_coord)?.sum_all();
    let expected_col = probs.mul(&col_coord)?.sum_all();
    let dr = expected_row.add(&Tensor::scalar(-(gt.row as f64)))?;
    let dc = expected_col.add(&Tensor::scalar(-(gt.col as f64)))?;
    dr.mul(&dr)?.add(&dc.mul(&dc)?)
}

/// Normalized Gaussian centered at `gt`, flattened row-major.
fn gaussian_target(h: usize, w: usize, gt: PixelLoc, std_px: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * std_px * std_px);
    let mut g: Vec<f64> = (0..h * w)
        .map(|i| {
            let dr = (i / w) as f64 - gt.row as f64;
            let dc = (i % w) as f64 - gt.col as f64;
            (-(dr * dr + dc * dc) * inv).exp()
        })
        .collect();
    let sum: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Mean binary cross-entropy between the spatial softmax of the scaled
/// heatmap and a normalized Gaussian centered at the groundtruth.
pub fn softmax_bce_loss(
    heatmap: &Heatmap,
    gt: PixelLoc,
    sigma: f64,
    std_px: f64,
) -> Result<Tensor> {
    check_gt(heatmap, gt)?;
    let (h, w) = (heatmap.height(), heatmap.width());
    let flat = heatmap.tensor().reshape(&[h * w])?;
    let probs = flat.softmax_scaled(sigma);
    probs.bce_mean(&gaussian_target(h, w, gt, std_px))
}

/// Weighted sum of the relative-response and soft-argmax losses.
pub fn combined_rr_softargmax(
    heatmap: &Heatmap,
    gt: PixelLoc,
    config: &LossConfig,
) -> Result<Tensor> {
    let rr = relative_response_loss(heatmap, gt, config.sigma)?;
    let sa = softargmax_loss(heatmap, gt, config.softargmax_temperature)?;
    rr.scalar_mul(config.w_rr).add(&sa.scalar_mul(config.w_softargmax))
}

/// Dispatch one per-correspondence loss.
pub fn point_loss(
    kind: LossKind,
    heatmap: &Heatmap,
    gt: PixelLoc,
    config: &LossConfig,
) -> Result<Tensor> {
    match kind {
        LossKind::Rr => relative_response_loss(heatmap, gt, config.sigma),
        LossKind::Softargmax => softargmax_loss(heatmap, gt, config.softargmax_temperature),
        LossKind::SoftargmaxBceCombo => {
            let sa = softargmax_loss(heatmap, gt, config.softargmax_temperature)?;
            let bce = softmax_bce_loss(heatmap, gt, config.sigma, config.bce_gaussian_std_px)?;
            sa.add(&bce)
        }
        LossKind::SoftmaxBce => {
            softmax_bce_loss(heatmap, gt, config.sigma, config.bce_gaussian_std_px)
        }
        LossKind::RrSoftargmax => combined_rr_softargmax(heatmap, gt, config),
    }
}

/// Mean per-correspondence loss for one image pair: forward both images
/// through the shared-weight network, convolve each sampled source
/// descriptor over the target map, and score every heatmap at its
/// groundtruth target location.
pub fn pair_loss(
    net: &DescriptorNetwork,
    source_image: &Tensor,
    target_image: &Tensor,
    correspondences: &[(PixelLoc, PixelLoc)],
    config: &LossConfig,
    kind: LossKind,
) -> Result<Tensor> {
    if correspondences.is_empty() {
        return Err(Error::InvalidArgument(
            "pair_loss: empty correspondence set".into(),
        ));
    }
    config.validate()?;
    let source_map = net.forward(source_image)?;
    let target_map = net.forward(target_image)?;
    pair_loss_on_maps(&source_map, &target_map, correspondences, config, kind)
}

/// Same as [`pair_loss`] but over already-computed descriptor maps.
pub fn pair_loss_on_maps(
    source_map: &DescriptorMap,
    target_map: &DescriptorMap,
    correspondences: &[(PixelLoc, PixelLoc)],
    config: &LossConfig,
    kind: LossKind,
) -> Result<Tensor> {
    if correspondences.is_empty() {
        return Err(Error::InvalidArgument(
            "pair_loss: empty correspondence set".into(),
        ));
    }
    let descriptors: Vec<Tensor> = correspondences
        .iter()
        .map(|(src, _)| source_map.tensor().gather_pixel(src.row, src.col))
        .collect::<Result<_>>()?;
    let bank = stack_rows(&descriptors)?;
    let heatmaps = batched_poi_conv(&bank, target_map)?;

    let (h, w) = (target_map.height(), target_map.width());
    let mut terms = Vec::with_capacity(correspondences.len());
    for (i, (_, gt)) in correspondences.iter().enumerate() {
        let heatmap = Heatmap::new(heatmaps.slice_channel(i)?)?;
        let _ = (h, w);
        terms.push(point_loss(kind, &heatmap, *gt, config)?);
    }
    Ok(sum_scalars(&terms)?.scalar_mul(1.0 / terms.len() as f64))
}
