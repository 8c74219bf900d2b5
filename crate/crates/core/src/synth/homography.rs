//! Planar homographies: sampling, warping, and exact correspondence
//! generation. Homogeneous coordinates are (x=col, y=row, 1).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::PixelLoc;
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn invert(m: &Mat3) -> Result<Mat3> {
    let d = det(m);
    if d.abs() <= 1e-12 {
        return Err(Error::Numerical(format!(
            "singular homography (det {})",
            d
        )));
    }
    let inv_det = 1.0 / d;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
            let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
            // adjugate: cofactor of (i,j), transposed
            out[j][i] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) * inv_det;
        }
    }
    Ok(out)
}

/// Apply to a point in (x, y) pixel coordinates with perspective division.
pub fn apply(m: &Mat3, x: f64, y: f64) -> (f64, f64) {
    let xh = m[0][0] * x + m[0][1] * y + m[0][2];
    let yh = m[1][0] * x + m[1][1] * y + m[1][2];
    let wh = m[2][0] * x + m[2][1] * y + m[2][2];
    (xh / wh, yh / wh)
}

/// Jitter bounds for homography sampling. All zero draws the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyBounds {
    /// Rotation about the image center, degrees.
    pub max_rotation_deg: f64,
    /// Translation per axis, fraction of the corresponding image extent.
    pub max_translation_frac: f64,
    /// Perspective row coefficients on centered pixel coordinates.
    pub max_perspective: f64,
    /// Isotropic scale jitter: scale in [1 - s, 1 + s].
    pub max_scale_jitter: f64,
}

impl HomographyBounds {
    pub fn none() -> HomographyBounds {
        HomographyBounds {
            max_rotation_deg: 0.0,
            max_translation_frac: 0.0,
            max_perspective: 0.0,
            max_scale_jitter: 0.0,
        }
    }

    /// Desk-scale default: enough warp to matter, little enough that most
    /// of the frame stays visible.
    pub fn desk() -> HomographyBounds {
        HomographyBounds {
            max_rotation_deg: 12.0,
            max_translation_frac: 0.08,
            max_perspective: 4.0e-4,
            max_scale_jitter: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rotation_deg < 0.0
            || self.max_translation_frac < 0.0
            || self.max_perspective < 0.0
            || self.max_scale_jitter < 0.0
        {
            return Err(Error::InvalidConfig("homography bounds must be nonnegative".into()));
        }
        if self.max_scale_jitter >= 1.0 {
            return Err(Error::InvalidConfig("scale jitter must stay below 1".into()));
        }
        Ok(())
    }
}

/// Conservative bound on how far any image corner can move under a
/// homography drawn within `bounds` (triangle inequality over the
/// rotation, scale, perspective, and translation stages).
pub fn max_corner_displacement(bounds: &HomographyBounds, height: usize, width: usize) -> f64 {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    let radius = (hw * hw + hh * hh).sqrt();
    let rot = radius * bounds.max_rotation_deg.to_radians();
    let scale = bounds.max_scale_jitter * radius;
    let q = bounds.max_perspective * (hw + hh) * (1.0 + bounds.max_scale_jitter);
    assert!(q < 0.5, "perspective bound too large for this image size");
    let perspective = radius * (1.0 + bounds.max_scale_jitter) * q / (1.0 - q);
    let translation =
        bounds.max_translation_frac * ((width * width + height * height) as f64).sqrt();
    rot + scale + perspective + translation
}

/// Random invertible homography: rotation, scale, and perspective jitter
/// about the image center composed with a translation. Degenerate draws
/// (|det| <= 1e-6) are retried.
pub fn sample_homography(
    seed: u64,
    bounds: &HomographyBounds,
    height: usize,
    width: usize,
) -> Result<Mat3> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let sym = |rng: &mut ChaCha8Rng, b: f64| {
        if b == 0.0 {
            0.0
        } else {
            rng.gen_range(-b..=b)
        }
    };
    for _ in 0..100 {
        let theta = sym(&mut rng, bounds.max_rotation_deg).to_radians();
        let scale = 1.0 + sym(&mut rng, bounds.max_scale_jitter);
        let (px, py) = (
            sym(&mut rng, bounds.max_perspective),
            sym(&mut rng, bounds.max_perspective),
        );
        let (tx, ty) = (
            sym(&mut rng, bounds.max_translation_frac) * width as f64,
            sym(&mut rng, bounds.max_translation_frac) * height as f64,
        );

        let to_center: Mat3 = [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]];
        let rot_scale: Mat3 = [
            [scale * theta.cos(), -scale * theta.sin(), 0.0],
            [scale * theta.sin(), scale * theta.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let perspective: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]];
        let back: Mat3 = [[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty], [0.0, 0.0, 1.0]];

        let h = mat_mul(&back, &mat_mul(&perspective, &mat_mul(&rot_scale, &to_center)));
        if det(&h).abs() > 1e-6 {
            return Ok(h);
        }
    }
    Err(Error::Numerical(
        "failed to draw an invertible homography in 100 attempts".into(),
    ))
}

/// Inverse-warp an image: each target pixel samples the source bilinearly
/// at its preimage. The mask is false where the preimage leaves the frame.
pub fn warp_image(image: &Tensor, h: &Mat3) -> Result<(Tensor, Vec<bool>)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "warp_image expects [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, rows, cols) = (shape[0], shape[1], shape[2]);
    let inv = invert(h)?;
    let plane = rows * cols;
    let data = image.data();
    let mut out = vec![0.0; c * plane];
    let mut mask = vec![false; plane];
    for r in 0..rows {
        for col in 0..cols {
            let (sx, sy) = apply(&inv, col as f64, r as f64);
            if sx < 0.0 || sy < 0.0 || sx > (cols - 1) as f64 || sy > (rows - 1) as f64 {
                continue;
            }
            mask[r * cols + col] = true;
            let x0 = (sx.floor() as usize).min(cols - 1);
            let y0 = (sy.floor() as usize).min(rows - 1);
            let x1 = (x0 + 1).min(cols - 1);
            let y1 = (y0 + 1).min(rows - 1);
            let tx = sx - x0 as f64;
            let ty = sy - y0 as f64;
            for ch in 0..c {
                let base = ch * plane;
                let v = data[base + y0 * cols + x0] * (1.0 - ty) * (1.0 - tx)
                    + data[base + y0 * cols + x1] * (1.0 - ty) * tx
                    + data[base + y1 * cols + x0] * ty * (1.0 - tx)
                    + data[base + y1 * cols + x1] * ty * tx;
                out[base + r * cols + col] = v;
            }
        }
    }
    Ok((Tensor::from_vec(out, &[c, rows, cols], false)?, mask))
}

/// Map keypoints through a homography, rounding to integer pixels and
/// dropping entries whose target leaves the frame.
pub fn correspondences_from_homography(
    h: &Mat3,
    keypoints: &[PixelLoc],
    height: usize,
    width: usize,
) -> Vec<(PixelLoc, PixelLoc)> {
    let mut out = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        let (x, y) = apply(h, kp.col as f64, kp.row as f64);
        let col = x.round();
        let row = y.round();
        if row >= 0.0 && col >= 0.0 && (row as usize) < height && (col as usize) < width {
            out.push((*kp, PixelLoc::new(row as usize, col as usize)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::texture::generate_texture;

    #[test]
    fn zero_bounds_give_identity() {
        let h = sample_homography(5, &HomographyBounds::none(), 32, 40).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[i][j] - IDENTITY[i][j]).abs() <= 1e-12, "h[{}][{}]", i, j);
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        for seed in 0..20 {
            let h = sample_homography(seed, &HomographyBounds::desk(), 64, 80).unwrap();
            let prod = mat_mul(&h, &invert(&h).unwrap());
            for (i, row) in prod.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((v - IDENTITY[i][j]).abs() <= 1e-9, "seed {}: [{}][{}] = {}", seed, i, j, v);
                }
            }
        }
    }

    #[test]
    fn corner_displacement_stays_within_bound() {
        let (h_px, w_px) = (64usize, 80usize);
        let bounds = HomographyBounds::desk();
        let limit = max_corner_displacement(&bounds, h_px, w_px);
        for seed in 0..200 {
            let h = sample_homography(seed, &bounds, h_px, w_px).unwrap();
            for (x, y) in [
                (0.0, 0.0),
                (w_px as f64 - 1.0, 0.0),
                (0.0, h_px as f64 - 1.0),
                (w_px as f64 - 1.0, h_px as f64 - 1.0),
            ] {
                let (xm, ym) = apply(&h, x, y);
                let moved = ((xm - x).powi(2) + (ym - y).powi(2)).sqrt();
                assert!(
                    moved <= limit,
                    "seed {}: corner ({}, {}) moved {} > {}",
                    seed,
                    x,
                    y,
                    moved,
                    limit
                );
            }
        }
    }

    #[test]
    fn warp_identity_is_exact_with_full_mask() {
        let image = generate_texture(3, 24, 30, 4).unwrap();
        let (warped, mask) = warp_image(&image, &IDENTITY).unwrap();
        assert_eq!(warped.data(), image.data());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn warp_integer_translation_shifts_exactly() {
        let image = generate_texture(4, 24, 30, 4).unwrap();
        let t: Mat3 = [[1.0, 0.0, 3.0], [0.0, 1.0, 2.0], [0.0, 0.0, 1.0]];
        let (warped, mask) = warp_image(&image, &t).unwrap();
        let plane = 24 * 30;
        for r in 0..24 {
            for c in 0..30 {
                let valid = r >= 2 && c >= 3;
                assert_eq!(mask[r * 30 + c], valid);
                if valid {
                    for ch in 0..3 {
                        assert_eq!(
                            warped.data()[ch * plane + r * 30 + c],
                            image.data()[ch * plane + (r - 2) * 30 + (c - 3)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn warp_roundtrip_stays_close_on_interior() {
        let image = generate_texture(5, 48, 48, 4).unwrap();
        let h = sample_homography(9, &HomographyBounds::desk(), 48, 48).unwrap();
        let (warped, _) = warp_image(&image, &h).unwrap();
        let (back, mask) = warp_image(&warped, &invert(&h).unwrap()).unwrap();
        let plane = 48 * 48;
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 8..40 {
            for c in 8..40 {
                if !mask[r * 48 + c] {
                    continue;
                }
                for ch in 0..3 {
                    total += (back.data()[ch * plane + r * 48 + c]
                        - image.data()[ch * plane + r * 48 + c])
                        .abs();
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean <= 0.02, "mean roundtrip error {}", mean);
    }

    #[test]
    fn correspondences_match_homogeneous_multiply_oracle() {
        let keypoints: Vec<PixelLoc> = (0..16)
            .flat_map(|r| (0..20).map(move |c| PixelLoc::new(r * 4, c * 4)))
            .collect();

        // identity: target == source
        let same = correspondences_from_homography(&IDENTITY, &keypoints, 64, 80);
        assert_eq!(same.len(), keypoints.len());
        assert!(same.iter().all(|(s, t)| s == t));

        // pure translation by +3 columns
        let t: Mat3 = [[1.0, 0.0, 3.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (s, tgt) in correspondences_from_homography(&t, &keypoints, 64, 80) {
            assert_eq!(tgt.row, s.row);
            assert_eq!(tgt.col, s.col + 3);
        }

        // random homography vs an independent homogeneous multiply
        let h = sample_homography(77, &HomographyBounds::desk(), 64, 80).unwrap();
        for (s, tgt) in correspondences_from_homography(&h, &keypoints, 64, 80) {
            let x = s.col as f64;
            let y = s.row as f64;
            let xn = h[0][0] * x + h[0][1] * y + h[0][2];
            let yn = h[1][0] * x + h[1][1] * y + h[1][2];
            let wn = h[2][0] * x + h[2][1] * y + h[2][2];
            assert_eq!(tgt.col as f64, (xn / wn).round());
            assert_eq!(tgt.row as f64, (yn / wn).round());
        }
    }

    #[test]
    fn reprojecting_targets_lands_within_one_pixel() {
        let keypoints: Vec<PixelLoc> = (0..8)
            .flat_map(|r| (0..10).map(move |c| PixelLoc::new(r * 8, c * 8)))
            .collect();
        for seed in 0..20 {
            let h = sample_homography(seed, &HomographyBounds::desk(), 64, 80).unwrap();
            let inv = invert(&h).unwrap();
            for (s, t) in correspondences_from_homography(&h, &keypoints, 64, 80) {
                let (x, y) = apply(&inv, t.col as f64, t.row as f64);
                let dist = ((x - s.col as f64).powi(2) + (y - s.row as f64).powi(2)).sqrt();
                assert!(dist <= 1.0, "seed {}: reprojection error {}", seed, dist);
            }
        }
    }
}
