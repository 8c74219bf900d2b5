//! Similarity matching between descriptor maps.
//!
//! A descriptor sampled at one pixel acts as a 1x1 convolution kernel over a
//! whole target map, producing a heatmap of cosine similarities; the peak is
//! the match. A match survives when matching the peak's descriptor back into
//! the source lands within a pixel threshold of the original query (cycle
//! consistency). All operations are pure over read-only maps; batched
//! matching parallelizes inside the convolution.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{stack_rows, Tensor};

/// Integer pixel coordinates, origin at the top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelLoc {
    pub row: usize,
    pub col: usize,
}

impl PixelLoc {
    pub fn new(row: usize, col: usize) -> PixelLoc {
        PixelLoc { row, col }
    }

    pub fn distance(&self, other: &PixelLoc) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// A `[C,H,W]` feature field with unit-norm channel vectors per pixel.
#[derive(Debug, Clone)]
pub struct DescriptorMap {
    tensor: Tensor,
}

impl DescriptorMap {
    pub fn new(tensor: Tensor) -> Result<DescriptorMap> {
        if tensor.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "descriptor map must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(DescriptorMap { tensor })
    }

    /// Build from raw data, normalizing channel vectors to unit length.
    pub fn from_raw(data: Vec<f64>, c: usize, h: usize, w: usize) -> Result<DescriptorMap> {
        let t = Tensor::from_vec(data, &[c, h, w], false)?;
        DescriptorMap::new(t.channel_l2_normalize(crate::backbone::L2_EPS)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// An `[H,W]` similarity field; values lie in [-1, 1] for unit-norm maps.
#[derive(Debug, Clone)]
pub struct Heatmap {
    tensor: Tensor,
}

impl Heatmap {
    pub fn new(tensor: Tensor) -> Result<Heatmap> {
        if tensor.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "heatmap must be [H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Heatmap { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// One estimated match with its cycle-consistency verdict.
#[derive(Debug, Clone)]
pub struct MatchRecord {
    pub source: PixelLoc,
    pub target: PixelLoc,
    pub peak_response: f64,
    pub roundtrip_distance_px: f64,
    pub accepted: bool,
}

/// Channel vector at `loc`, shape `[C]` (nearest-neighbor sampling).
pub fn sample_descriptor(map: &DescriptorMap, loc: PixelLoc) -> Result<Tensor> {
    map.tensor().gather_pixel(loc.row, loc.col)
}

/// Inner product of one descriptor with every pixel of a target map,
/// realized as a 1x1 convolution; differentiable through both operands.
pub fn poi_conv(descriptor: &Tensor, target: &DescriptorMap) -> Result<Heatmap> {
    let c = target.channels();
    if descriptor.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "descriptor {:?} does not match map with {} channels",
            descriptor.shape(),
            c
        )));
    }
    let kernel = descriptor.reshape(&[1, c, 1, 1])?;
    let response = target.tensor().conv2d(&kernel, 1, 0)?;
    Heatmap::new(response.reshape(&[target.height(), target.width()])?)
}

/// All heatmaps for an `[N,C]` descriptor bank at once: the bank becomes an
/// `[N,C,1,1]` kernel and one convolution yields `[N,H,W]`.
pub fn batched_poi_conv(descriptors: &Tensor, target: &DescriptorMap) -> Result<Tensor> {
    let shape = descriptors.shape();
    if shape.len() != 2 || shape[1] != target.channels() {
        return Err(Error::ShapeMismatch(format!(
            "descriptor bank {:?} does not match map with {} channels",
            shape,
            target.channels()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let kernel = descriptors.reshape(&[n, c, 1, 1])?;
    target.tensor().conv2d(&kernel, 1, 0)
}

fn argmax_plane(values: &[f64], h: usize, w: usize) -> Result<(PixelLoc, f64)> {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numerical(format!(
                "NaN in heatmap at ({}, {})",
                i / w,
                i % w
            )));
        }
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    let _ = h;
    Ok((PixelLoc::new(best_idx / w, best_idx % w), best))
}

/// Location and value of the largest response; ties resolve to the first
/// maximum in row-major order.
pub fn argmax_location(heatmap: &Heatmap) -> Result<(PixelLoc, f64)> {
    if heatmap.tensor().numel() == 0 {
        return Err(Error::InvalidArgument("argmax over empty heatmap".into()));
    }
    argmax_plane(heatmap.tensor().data(), heatmap.height(), heatmap.width())
}

/// Match `keypoints` from the source map into the target map, then match
/// each found peak back and keep matches whose round trip lands within
/// `cycle_threshold_px` of the original query.
pub fn dense_match(
    source: &DescriptorMap,
    target: &DescriptorMap,
    keypoints: &[PixelLoc],
    cycle_threshold_px: f64,
) -> Result<Vec<MatchRecord>> {
    if keypoints.is_empty() {
        return Ok(Vec::new());
    }
    if source.channels() != target.channels() {
        return Err(Error::ShapeMismatch(format!(
            "source map has {} channels, target {}",
            source.channels(),
            target.channels()
        )));
    }

    let queries: Vec<Tensor> = keypoints
        .iter()
        .map(|kp| sample_descriptor(source, *kp))
        .collect::<Result<_>>()?;
    let bank = stack_rows(&queries)?;
    let forward = batched_poi_conv(&bank, target)?;

    let (th, tw) = (target.height(), target.width());
    let plane = th * tw;
    let mut peaks = Vec::with_capacity(keypoints.len());
    for i in 0..keypoints.len() {
        peaks.push(argmax_plane(&forward.data()[i * plane..(i + 1) * plane], th, tw)?);
    }

    let back_queries: Vec<Tensor> = peaks
        .iter()
        .map(|(loc, _)| sample_descriptor(target, *loc))
        .collect::<Result<_>>()?;
    let back_bank = stack_rows(&back_queries)?;
    let backward = batched_poi_conv(&back_bank, source)?;

    let (sh, sw) = (source.height(), source.width());
    let splane = sh * sw;
    let mut records = Vec::with_capacity(keypoints.len());
    for (i, kp) in keypoints.iter().enumerate() {
        let (recovered, _) = argmax_plane(&backward.data()[i * splane..(i + 1) * splane], sh, sw)?;
        let roundtrip = kp.distance(&recovered);
        records.push(MatchRecord {
            source: *kp,
            target: peaks[i].0,
            peak_response: peaks[i].1,
            roundtrip_distance_px: roundtrip,
            accepted: roundtrip <= cycle_threshold_px,
        });
    }
    Ok(records)
}

/// Spatial softmax of `sigma * heatmap` rescaled so the maximum is exactly
/// one. Display form for heatmap export.
pub fn display_normalize(heatmap: &Heatmap, sigma: f64) -> Result<Heatmap> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "display_normalize: sigma must be > 0, got {}",
            sigma
        )));
    }
    let soft = heatmap.tensor().softmax_scaled(sigma);
    let max = soft.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data: Vec<f64> = soft.data().iter().map(|&v| v / max).collect();
    Heatmap::new(Tensor::from_vec(
        data,
        &[heatmap.height(), heatmap.width()],
        false,
    )?)
}

/// One line per record: source row/col, target row/col, peak response,
/// round-trip distance, accepted flag.
pub fn write_match_file(
    path: &Path,
    source_name: &str,
    target_name: &str,
    cycle_threshold_px: f64,
    records: &[MatchRecord],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("# match file v1\n");
    out.push_str(&format!("# source {}\n", source_name));
    out.push_str(&format!("# target {}\n", target_name));
    out.push_str(&format!("# cycle_threshold_px {}\n", cycle_threshold_px));
    out.push_str("# src_row src_col tgt_row tgt_col peak_response roundtrip_px accepted\n");
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            r.source.row,
            r.source.col,
            r.target.row,
            r.target.col,
            r.peak_response,
            r.roundtrip_distance_px,
            u8::from(r.accepted)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale portable graymap of a display-normalized heatmap.
pub fn write_heatmap_pgm(path: &Path, heatmap: &Heatmap) -> Result<()> {
    let (h, w) = (heatmap.height(), heatmap.width());
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    for &v in heatmap.tensor().data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit_map(seed: u64, c: usize, h: usize, w: usize) -> DescriptorMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DescriptorMap::from_raw(data, c, h, w).unwrap()
    }

    /// Naive matcher: per-pixel dot products and a linear scan, no shared
    /// code with the implementation under test.
    fn naive_best_match(map: &DescriptorMap, desc: &[f64]) -> (PixelLoc, f64) {
        let (c, h, w) = (map.channels(), map.height(), map.width());
        let plane = h * w;
        let data = map.tensor().data();
        let mut best = f64::NEG_INFINITY;
        let mut best_loc = PixelLoc::new(0, 0);
        for r in 0..h {
            for col in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += desc[ch] * data[ch * plane + r * w + col];
                }
                if dot > best {
                    best = dot;
                    best_loc = PixelLoc::new(r, col);
                }
            }
        }
        (best_loc, best)
    }

    #[test]
    fn sample_descriptor_examples() {
        let map = random_unit_map(1, 4, 1, 1);
        let v = sample_descriptor(&map, PixelLoc::new(0, 0)).unwrap();
        assert_eq!(v.data(), map.tensor().data());

        let map = random_unit_map(2, 4, 3, 5);
        let v = sample_descriptor(&map, PixelLoc::new(0, 0)).unwrap();
        let plane = 15;
        for ch in 0..4 {
            assert_eq!(v.data()[ch], map.tensor().data()[ch * plane]);
        }
        let norm: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);

        assert!(sample_descriptor(&map, PixelLoc::new(3, 0)).is_err());
    }

    #[test]
    fn poi_conv_self_similarity_is_one() {
        let map = random_unit_map(3, 8, 6, 7);
        let loc = PixelLoc::new(4, 2);
        let desc = sample_descriptor(&map, loc).unwrap();
        let heat = poi_conv(&desc, &map).unwrap();
        let v = heat.tensor().data()[loc.row * 7 + loc.col];
        assert!((v - 1.0).abs() <= 1e-5, "self similarity {}", v);
    }

    #[test]
    fn poi_conv_orthogonal_gives_zero() {
        let map = DescriptorMap::from_raw(vec![1.0, 0.0], 2, 1, 1).unwrap();
        let desc = Tensor::from_vec(vec![0.0, 1.0], &[2], false).unwrap();
        let heat = poi_conv(&desc, &map).unwrap();
        assert_eq!(heat.tensor().data(), &[0.0]);
    }

    #[test]
    fn poi_conv_matches_dot_product_oracle() {
        let map = random_unit_map(4, 8, 5, 9);
        let query = random_unit_map(5, 8, 1, 1);
        let desc = sample_descriptor(&query, PixelLoc::new(0, 0)).unwrap();
        let heat = poi_conv(&desc, &map).unwrap();
        let (c, h, w) = (8, 5, 9);
        let plane = h * w;
        for r in 0..h {
            for col in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += desc.data()[ch] * map.tensor().data()[ch * plane + r * w + col];
                }
                assert!(
                    (heat.tensor().data()[r * w + col] - dot).abs() <= 1e-12,
                    "poi vs loop oracle at ({}, {})",
                    r,
                    col
                );
            }
        }
        // channel mismatch rejected
        let bad = Tensor::from_vec(vec![1.0; 7], &[7], false).unwrap();
        assert!(poi_conv(&bad, &map).is_err());
    }

    #[test]
    fn batched_poi_conv_equals_looped() {
        let map = random_unit_map(6, 8, 32, 40);
        let queries = random_unit_map(7, 8, 8, 8);
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let locs: Vec<PixelLoc> = (0..64)
            .map(|_| PixelLoc::new(rng.gen_range(0..8), rng.gen_range(0..8)))
            .collect();
        for loc in &locs {
            rows.push(sample_descriptor(&queries, *loc).unwrap());
        }
        let bank = stack_rows(&rows).unwrap();
        let batched = batched_poi_conv(&bank, &map).unwrap();
        assert_eq!(batched.shape(), &[64, 32, 40]);
        let plane = 32 * 40;
        for (i, row) in rows.iter().enumerate() {
            let single = poi_conv(row, &map).unwrap();
            for (a, b) in batched.data()[i * plane..(i + 1) * plane]
                .iter()
                .zip(single.tensor().data())
            {
                assert!((a - b).abs() <= 1e-12);
            }
        }

        // N = 1 identical to single; permuting rows permutes outputs
        let one = batched_poi_conv(&stack_rows(&rows[..1]).unwrap(), &map).unwrap();
        let single = poi_conv(&rows[0], &map).unwrap();
        assert_eq!(one.data(), single.tensor().data());

        let swapped = stack_rows(&[rows[1].clone(), rows[0].clone()]).unwrap();
        let out = batched_poi_conv(&swapped, &map).unwrap();
        assert_eq!(&out.data()[..plane], &batched.data()[plane..2 * plane]);
        assert_eq!(&out.data()[plane..2 * plane], &batched.data()[..plane]);
    }

    #[test]
    fn argmax_examples() {
        let mut data = vec![0.0; 12];
        data[7] = 1.0;
        let heat = Heatmap::new(Tensor::from_vec(data, &[3, 4], false).unwrap()).unwrap();
        let (loc, peak) = argmax_location(&heat).unwrap();
        assert_eq!(loc, PixelLoc::new(1, 3));
        assert_eq!(peak, 1.0);

        let flat = Heatmap::new(Tensor::from_vec(vec![0.5; 12], &[3, 4], false).unwrap()).unwrap();
        let (loc, _) = argmax_location(&flat).unwrap();
        assert_eq!(loc, PixelLoc::new(0, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let heat = Heatmap::new(Tensor::from_vec(vals.clone(), &[5, 6], false).unwrap()).unwrap();
        let (loc, peak) = argmax_location(&heat).unwrap();
        let (mut bi, mut bv) = (0usize, f64::NEG_INFINITY);
        for (i, &v) in vals.iter().enumerate() {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        assert_eq!((loc.row, loc.col), (bi / 6, bi % 6));
        assert_eq!(peak, bv);

        let mut with_nan = vals;
        with_nan[3] = f64::NAN;
        let heat = Heatmap::new(Tensor::from_vec(with_nan, &[5, 6], false).unwrap()).unwrap();
        assert!(argmax_location(&heat).is_err());
    }

    #[test]
    fn dense_match_self_identity() {
        let map = random_unit_map(10, 8, 10, 12);
        let keypoints: Vec<PixelLoc> = (0..10)
            .flat_map(|r| (0..12).map(move |c| PixelLoc::new(r, c)))
            .collect();
        let records = dense_match(&map, &map, &keypoints, 0.0).unwrap();
        assert_eq!(records.len(), keypoints.len());
        for (r, kp) in records.iter().zip(&keypoints) {
            assert!(r.accepted);
            assert_eq!(r.target, *kp);
            assert_eq!(r.roundtrip_distance_px, 0.0);
            assert!((r.peak_response - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn dense_match_zero_threshold_accepts_exact_roundtrips_only() {
        let a = random_unit_map(11, 6, 9, 9);
        let b = random_unit_map(12, 6, 9, 9);
        let keypoints: Vec<PixelLoc> = (0..9).map(|i| PixelLoc::new(i, (i * 2) % 9)).collect();
        let records = dense_match(&a, &b, &keypoints, -0.0).unwrap();
        for r in &records {
            assert_eq!(r.accepted, r.roundtrip_distance_px == 0.0);
        }
        assert!(dense_match(&a, &b, &[], 1.0).unwrap().is_empty());
    }

    #[test]
    fn dense_match_threshold_monotonicity() {
        let a = random_unit_map(13, 6, 12, 14);
        let b = random_unit_map(14, 6, 12, 14);
        let keypoints: Vec<PixelLoc> = (0..12).map(|i| PixelLoc::new(i, i)).collect();
        let mut prev_accepted = 0usize;
        for threshold in [0.0, 1.0, 3.0, 8.0, 100.0] {
            let records = dense_match(&a, &b, &keypoints, threshold).unwrap();
            let accepted = records.iter().filter(|r| r.accepted).count();
            assert!(accepted >= prev_accepted, "threshold {}", threshold);
            prev_accepted = accepted;
        }
    }

    #[test]
    fn dense_match_is_deterministic_including_ties() {
        // constant maps make every heatmap flat: ties everywhere
        let a = DescriptorMap::from_raw(vec![1.0; 2 * 4 * 4], 2, 4, 4).unwrap();
        let keypoints = vec![PixelLoc::new(2, 3), PixelLoc::new(0, 1)];
        let first = dense_match(&a, &a, &keypoints, 10.0).unwrap();
        let second = dense_match(&a, &a, &keypoints, 10.0).unwrap();
        for (x, y) in first.iter().zip(&second) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.roundtrip_distance_px, y.roundtrip_distance_px);
        }
        // tie-break lands on (0,0)
        assert_eq!(first[0].target, PixelLoc::new(0, 0));
    }

    #[test]
    fn dense_match_agrees_with_naive_matcher() {
        let src = random_unit_map(15, 8, 12, 10);
        let tgt = random_unit_map(16, 8, 12, 10);
        let keypoints: Vec<PixelLoc> = (0..10).map(|i| PixelLoc::new(i, i % 10)).collect();
        let records = dense_match(&src, &tgt, &keypoints, 2.0).unwrap();
        for (kp, rec) in keypoints.iter().zip(&records) {
            let desc = sample_descriptor(&src, *kp).unwrap();
            let (loc, peak) = naive_best_match(&tgt, desc.data());
            assert_eq!(rec.target, loc);
            assert!((rec.peak_response - peak).abs() <= 1e-12);
            let back = sample_descriptor(&tgt, loc).unwrap();
            let (rec_loc, _) = naive_best_match(&src, back.data());
            assert_eq!(rec.roundtrip_distance_px, kp.distance(&rec_loc));
        }
    }

    #[test]
    fn heatmap_values_respect_cosine_bound() {
        let a = random_unit_map(17, 16, 10, 10);
        let b = random_unit_map(18, 16, 10, 10);
        for r in 0..10 {
            let desc = sample_descriptor(&a, PixelLoc::new(r, 9 - r)).unwrap();
            let heat = poi_conv(&desc, &b).unwrap();
            for &v in heat.tensor().data() {
                assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v), "value {}", v);
            }
        }
    }

    #[test]
    fn display_normalize_examples() {
        let flat = Heatmap::new(Tensor::from_vec(vec![0.3; 6], &[2, 3], false).unwrap()).unwrap();
        let out = display_normalize(&flat, 20.0).unwrap();
        for &v in out.tensor().data() {
            assert_eq!(v, 1.0);
        }

        let mut data = vec![-1.0; 9];
        data[4] = 1.0;
        let hot = Heatmap::new(Tensor::from_vec(data, &[3, 3], false).unwrap()).unwrap();
        let out = display_normalize(&hot, 50.0).unwrap();
        assert_eq!(out.tensor().data()[4], 1.0);
        for (i, &v) in out.tensor().data().iter().enumerate() {
            if i != 4 {
                assert!(v < 1e-20, "off-peak value {}", v);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let vals: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let heat = Heatmap::new(Tensor::from_vec(vals, &[4, 5], false).unwrap()).unwrap();
        let out = display_normalize(&heat, 7.5).unwrap();
        let max = out.tensor().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 1.0);
        assert!(out.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn match_file_roundtrip_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matches.txt");
        let records = vec![MatchRecord {
            source: PixelLoc::new(1, 2),
            target: PixelLoc::new(3, 4),
            peak_response: 0.5,
            roundtrip_distance_px: 0.0,
            accepted: true,
        }];
        write_match_file(&path, "a.ppm", "b.ppm", 6.0, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("# source a.ppm"));
        assert!(text.contains("# target b.ppm"));
        assert!(text.contains("# cycle_threshold_px 6"));
        assert!(text.lines().last().unwrap().starts_with("1 2 3 4"));
    }
}
