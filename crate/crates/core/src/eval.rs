//! Matching metrics and checkpoint evaluation.
//!
//! PCK (percentage of correct keypoints) is computed per pair from the
//! unfiltered forward matches and averaged uniformly over pairs. The
//! putative/precision/matching-score triple is computed from counts pooled
//! over all pairs, which keeps `matching_score = putative * precision / 100`
//! exact: putative matches are those passing the cycle-consistency filter,
//! inliers those additionally within the inlier threshold of groundtruth.

use std::path::Path;
use std::time::Instant;

use crate::backbone::DescriptorNetwork;
use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::image_io::to_gray;
use crate::matching::{dense_match, MatchRecord, PixelLoc};
use crate::synth::{grid_groundtruth, Dataset, LoadedPair, Split};
use crate::tensor::Tensor;

pub const DEFAULT_GRID_STEP: usize = 8;
pub const DEFAULT_CYCLE_THRESHOLD_PX: f64 = 6.0;
pub const DEFAULT_INLIER_THRESHOLD_PX: f64 = 10.0;
pub const DEFAULT_PCK_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Where evaluation queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointSource {
    /// Regular grid over the valid region, groundtruth recomputed from the
    /// stored generator.
    Grid { step: usize },
    /// The correspondence set stored with each pair.
    Stored,
}

impl Default for KeypointSource {
    fn default() -> Self {
        KeypointSource::Grid {
            step: DEFAULT_GRID_STEP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (threshold_px, percent correct), ordered as requested.
    pub pck: Vec<(f64, f64)>,
    pub putative_match_ratio: f64,
    pub precision: f64,
    pub matching_score: f64,
    pub pair_count: usize,
    pub keypoint_count: usize,
    pub cycle_threshold_px: f64,
    pub inlier_threshold_px: f64,
    pub wall_time_s: f64,
}

/// Percentage of groundtruth correspondences whose estimated target lies
/// within each threshold. `matches[i]` answers `groundtruth[i]`.
pub fn pck(
    matches: &[MatchRecord],
    groundtruth: &[(PixelLoc, PixelLoc)],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if groundtruth.is_empty() {
        return Err(Error::InvalidArgument("pck: empty groundtruth".into()));
    }
    if matches.len() != groundtruth.len() {
        return Err(Error::InvalidArgument(format!(
            "pck: {} matches for {} groundtruth correspondences",
            matches.len(),
            groundtruth.len()
        )));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let correct = matches
            .iter()
            .zip(groundtruth)
            .filter(|(m, (_, gt))| m.target.distance(gt) <= threshold)
            .count();
        out.push(100.0 * correct as f64 / groundtruth.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MatchCounts {
    pub features: usize,
    pub putative: usize,
    pub inliers: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.features += other.features;
        self.putative += other.putative;
        self.inliers += other.inliers;
    }

    /// (putative ratio %, precision %, matching score %). Precision is 0
    /// when nothing survived the filter.
    pub fn ratios(&self) -> (f64, f64, f64) {
        if self.features == 0 {
            return (0.0, 0.0, 0.0);
        }
        let putative = 100.0 * self.putative as f64 / self.features as f64;
        let precision = if self.putative == 0 {
            0.0
        } else {
            100.0 * self.inliers as f64 / self.putative as f64
        };
        let score = 100.0 * self.inliers as f64 / self.features as f64;
        (putative, precision, score)
    }
}

pub fn match_counts(
    matches: &[MatchRecord],
    groundtruth: &[(PixelLoc, PixelLoc)],
    inlier_threshold_px: f64,
) -> MatchCounts {
    let mut counts = MatchCounts {
        features: matches.len(),
        ..MatchCounts::default()
    };
    for (m, (_, gt)) in matches.iter().zip(groundtruth) {
        if m.accepted {
            counts.putative += 1;
            if m.target.distance(gt) <= inlier_threshold_px {
                counts.inliers += 1;
            }
        }
    }
    counts
}

/// The three ratios for one match list.
pub fn match_metrics(
    matches: &[MatchRecord],
    groundtruth: &[(PixelLoc, PixelLoc)],
    inlier_threshold_px: f64,
) -> (f64, f64, f64) {
    match_counts(matches, groundtruth, inlier_threshold_px).ratios()
}

/// Gray-convert when the network expects one channel.
pub fn adapt_image(net: &DescriptorNetwork, image: &Tensor) -> Result<Tensor> {
    if net.config().input_channels == 1 {
        to_gray(image)
    } else {
        Ok(image.clone())
    }
}

pub struct EvalSettings {
    pub keypoints: KeypointSource,
    pub thresholds: Vec<f64>,
    pub cycle_threshold_px: f64,
    pub inlier_threshold_px: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            keypoints: KeypointSource::default(),
            thresholds: DEFAULT_PCK_THRESHOLDS.to_vec(),
            cycle_threshold_px: DEFAULT_CYCLE_THRESHOLD_PX,
            inlier_threshold_px: DEFAULT_INLIER_THRESHOLD_PX,
        }
    }
}

/// Evaluate a network over loaded pairs.
pub fn evaluate_pairs(
    net: &DescriptorNetwork,
    pairs: &[LoadedPair],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluate: no pairs".into()));
    }
    let start = Instant::now();
    let mut pck_sums = vec![0.0; settings.thresholds.len()];
    let mut counts = MatchCounts::default();
    let mut keypoint_count = 0usize;

    for pair in pairs {
        let (h, w) = (pair.source.shape()[1], pair.source.shape()[2]);
        let groundtruth = match settings.keypoints {
            KeypointSource::Grid { step } => grid_groundtruth(&pair.corr, h, w, step)?,
            KeypointSource::Stored => pair.corr.points.clone(),
        };
        if groundtruth.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pair {} has no usable groundtruth",
                pair.corr.pair_id
            )));
        }
        let source_map = net.forward(&adapt_image(net, &pair.source)?)?;
        let target_map = net.forward(&adapt_image(net, &pair.target)?)?;
        let keypoints: Vec<PixelLoc> = groundtruth.iter().map(|(s, _)| *s).collect();
        let records = dense_match(
            &source_map,
            &target_map,
            &keypoints,
            settings.cycle_threshold_px,
        )?;
        let pair_pck = pck(&records, &groundtruth, &settings.thresholds)?;
        for (sum, v) in pck_sums.iter_mut().zip(&pair_pck) {
            *sum += v;
        }
        counts.add(match_counts(&records, &groundtruth, settings.inlier_threshold_px));
        keypoint_count += keypoints.len();
    }

    let n = pairs.len() as f64;
    let (putative, precision, score) = counts.ratios();
    Ok(EvalReport {
        pck: settings
            .thresholds
            .iter()
            .zip(&pck_sums)
            .map(|(&t, &s)| (t, s / n))
            .collect(),
        putative_match_ratio: putative,
        precision,
        matching_score: score,
        pair_count: pairs.len(),
        keypoint_count,
        cycle_threshold_px: settings.cycle_threshold_px,
        inlier_threshold_px: settings.inlier_threshold_px,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn load_split(dataset: &Dataset, split: Split) -> Result<Vec<LoadedPair>> {
    dataset
        .split(split)
        .into_iter()
        .map(|meta| dataset.load_pair(meta))
        .collect()
}

/// Evaluate a checkpoint over one dataset split.
pub fn evaluate(
    checkpoint_path: &Path,
    dataset_path: &Path,
    split: Split,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let net = load_checkpoint(checkpoint_path)?;
    let dataset = Dataset::open(dataset_path)?;
    let pairs = load_split(&dataset, split)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {} is empty",
            split.name()
        )));
    }
    evaluate_pairs(&net, &pairs, settings)
}

/// Deterministic report text (wall time deliberately excluded).
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("# densedesc evaluation report\n");
    out.push_str(&format!("pair_count {}\n", report.pair_count));
    out.push_str(&format!("keypoint_count {}\n", report.keypoint_count));
    out.push_str(&format!("cycle_threshold_px {}\n", report.cycle_threshold_px));
    out.push_str(&format!("inlier_threshold_px {}\n", report.inlier_threshold_px));
    for (threshold, value) in &report.pck {
        out.push_str(&format!("pck_pct {} {}\n", threshold, value));
    }
    out.push_str(&format!(
        "putative_match_ratio_pct {}\n",
        report.putative_match_ratio
    ));
    out.push_str(&format!("precision_pct {}\n", report.precision));
    out.push_str(&format!("matching_score_pct {}\n", report.matching_score));
    out
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, format_report(report)).map_err(|e| Error::io(path, e))
}
