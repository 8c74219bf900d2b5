//! Synthetic image-pair datasets with exact groundtruth correspondences.
//!
//! Two generation modes share one layout. `homography`: the target image is
//! the source warped by a sampled planar homography, groundtruth is the
//! homography itself. `projective`: a textured plane at fixed depth is
//! viewed by two posed pinhole cameras; groundtruth comes from projecting
//! shared 3D plane points into both views, and the target image is rendered
//! through the pose-induced homography of the plane.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{read_ppm, write_ppm};
use crate::matching::PixelLoc;
use crate::synth::camera::{project_points, CameraModel, RigidPose};
use crate::synth::homography::{
    apply, correspondences_from_homography, invert, mat_mul, sample_homography, warp_image,
    HomographyBounds, Mat3,
};
use crate::synth::texture::generate_texture;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const SPLIT_SEED_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Homography,
    Projective,
}

impl GenMode {
    pub fn parse(s: &str) -> Result<GenMode> {
        match s {
            "homography" => Ok(GenMode::Homography),
            "projective" => Ok(GenMode::Projective),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset mode {:?} (expected homography | projective)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GenMode::Homography => "homography",
            GenMode::Projective => "projective",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {:?} (expected train | val | test)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn seed_offset(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => SPLIT_SEED_STRIDE,
            Split::Test => 2 * SPLIT_SEED_STRIDE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub mode: GenMode,
    pub height: usize,
    pub width: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Spacing of the groundtruth keypoint grid, pixels.
    pub grid_step: usize,
    pub octaves: usize,
    pub bounds: HomographyBounds,
    /// Brightness/contrast jitter on the target image (off by default).
    pub photometric_jitter: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: GenMode::Homography,
            height: 64,
            width: 80,
            train_pairs: 200,
            val_pairs: 40,
            test_pairs: 40,
            grid_step: 8,
            octaves: 5,
            bounds: HomographyBounds::desk(),
            photometric_jitter: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig("images must be at least 16x16".into()));
        }
        if self.grid_step == 0 || self.grid_step >= self.height.min(self.width) {
            return Err(Error::InvalidConfig("grid_step must fit inside the image".into()));
        }
        if self.octaves == 0 {
            return Err(Error::InvalidConfig("octaves must be >= 1".into()));
        }
        if self.train_pairs + self.val_pairs + self.test_pairs == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one pair".into()));
        }
        if self.train_pairs.max(self.val_pairs).max(self.test_pairs) as u64 >= SPLIT_SEED_STRIDE {
            return Err(Error::InvalidConfig("too many pairs per split".into()));
        }
        self.bounds.validate()
    }
}

/// Groundtruth generator metadata stored with each pair.
#[derive(Debug, Clone)]
pub enum Generator {
    Homography(Mat3),
    Poses {
        camera: CameraModel,
        plane_depth: f64,
        source: RigidPose,
        target: RigidPose,
    },
}

impl Generator {
    /// The exact source->target pixel map (induced by the plane geometry in
    /// the posed case).
    pub fn groundtruth_homography(&self) -> Mat3 {
        match self {
            Generator::Homography(h) => *h,
            Generator::Poses {
                camera,
                plane_depth,
                target,
                ..
            } => induced_plane_homography(camera, target, *plane_depth),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pair_id: String,
    pub source_name: String,
    pub target_name: String,
    pub generator: Generator,
    pub points: Vec<(PixelLoc, PixelLoc)>,
}

/// Homography mapping source pixels to target pixels for a plane at
/// `depth` in the source camera frame, viewed by `pose` (source camera is
/// at the identity).
pub fn induced_plane_homography(camera: &CameraModel, pose: &RigidPose, depth: f64) -> Mat3 {
    let k: Mat3 = [
        [camera.fx, 0.0, camera.cx],
        [0.0, camera.fy, camera.cy],
        [0.0, 0.0, 1.0],
    ];
    let k_inv: Mat3 = [
        [1.0 / camera.fx, 0.0, -camera.cx / camera.fx],
        [0.0, 1.0 / camera.fy, -camera.cy / camera.fy],
        [0.0, 0.0, 1.0],
    ];
    // x_cam = R * (depth * K^-1 p) + t = depth * (R + t n^T / depth) K^-1 p
    let mut core = pose.rotation;
    for i in 0..3 {
        core[i][2] += pose.translation[i] / depth;
    }
    mat_mul(&k, &mat_mul(&core, &k_inv))
}

fn grid_keypoints(height: usize, width: usize, step: usize) -> Vec<PixelLoc> {
    let mut out = Vec::new();
    let mut r = step / 2;
    while r < height {
        let mut c = step / 2;
        while c < width {
            out.push(PixelLoc::new(r, c));
            c += step;
        }
        r += step;
    }
    out
}

struct GeneratedPair {
    source: Tensor,
    target: Tensor,
    corr: CorrespondenceSet,
    texture_seed: u64,
}

fn generate_pair(config: &SynthConfig, split: Split, index: usize) -> Result<GeneratedPair> {
    let texture_seed = config.seed + split.seed_offset() + index as u64;
    let geometry_seed = texture_seed ^ 0x9e37_79b9_7f4a_7c15;
    let source = generate_texture(texture_seed, config.height, config.width, config.octaves)?;
    let keypoints = grid_keypoints(config.height, config.width, config.grid_step);

    let (generator, gt_h) = match config.mode {
        GenMode::Homography => {
            let h = sample_homography(geometry_seed, &config.bounds, config.height, config.width)?;
            (Generator::Homography(h), h)
        }
        GenMode::Projective => {
            let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
            let camera = CameraModel {
                fx: 1.2 * config.width.max(config.height) as f64,
                fy: 1.2 * config.width.max(config.height) as f64,
                cx: (config.width as f64 - 1.0) / 2.0,
                cy: (config.height as f64 - 1.0) / 2.0,
            };
            let depth = 10.0;
            let angle = config.bounds.max_rotation_deg.to_radians();
            let axis = [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                1.0,
            ];
            let theta = if angle == 0.0 { 0.0 } else { rng.gen_range(-angle..=angle) };
            // translation bound expressed as a fraction of the frame: a
            // lateral move of t shifts pixels by roughly fx * t / depth
            let t_frac = config.bounds.max_translation_frac;
            let lateral = t_frac * config.width as f64 * depth / camera.fx;
            let translation = [
                if t_frac == 0.0 { 0.0 } else { rng.gen_range(-lateral..=lateral) },
                if t_frac == 0.0 { 0.0 } else { rng.gen_range(-lateral..=lateral) },
                if t_frac == 0.0 { 0.0 } else { rng.gen_range(-0.2 * lateral..=0.2 * lateral) },
            ];
            let target_pose = RigidPose::from_axis_angle(axis, theta, translation);
            let h = induced_plane_homography(&camera, &target_pose, depth);
            (
                Generator::Poses {
                    camera,
                    plane_depth: depth,
                    source: RigidPose::identity(),
                    target: target_pose,
                },
                h,
            )
        }
    };

    let (mut target, mask) = warp_image(&source, &gt_h)?;
    if config.photometric_jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed.wrapping_add(1));
        let gain = rng.gen_range(0.85..1.15);
        let offset = rng.gen_range(-0.08..0.08);
        let data = target.data().iter().map(|v| (v * gain + offset).clamp(0.0, 1.0)).collect();
        target = Tensor::from_vec(data, target.shape(), false)?;
    }

    let points: Vec<(PixelLoc, PixelLoc)> = match &generator {
        Generator::Homography(h) => {
            correspondences_from_homography(h, &keypoints, config.height, config.width)
        }
        Generator::Poses {
            camera,
            plane_depth,
            source: source_pose,
            target: target_pose,
        } => {
            // back-project the grid onto the plane, then project into both views
            let points3d: Vec<[f64; 3]> = keypoints
                .iter()
                .map(|kp| {
                    [
                        *plane_depth * (kp.col as f64 - camera.cx) / camera.fx,
                        *plane_depth * (kp.row as f64 - camera.cy) / camera.fy,
                        *plane_depth,
                    ]
                })
                .collect();
            let in_source = project_points(&points3d, source_pose, camera, config.height, config.width);
            let in_target = project_points(&points3d, target_pose, camera, config.height, config.width);
            let mut by_index = std::collections::HashMap::new();
            for (idx, loc) in in_target {
                by_index.insert(idx, loc);
            }
            in_source
                .into_iter()
                .filter_map(|(idx, src)| by_index.get(&idx).map(|tgt| (src, *tgt)))
                .collect()
        }
    };
    // keep only targets that landed on validly rendered pixels
    let points = points
        .into_iter()
        .filter(|(_, tgt)| mask[tgt.row * config.width + tgt.col])
        .collect();

    let pair_id = format!("pair_{}_{:06}", split.name(), index);
    Ok(GeneratedPair {
        source,
        target,
        corr: CorrespondenceSet {
            pair_id: pair_id.clone(),
            source_name: "source.ppm".into(),
            target_name: "target.ppm".into(),
            generator,
            points,
        },
        texture_seed,
    })
}

fn write_correspondences(path: &Path, corr: &CorrespondenceSet) -> Result<()> {
    let mut out = String::new();
    out.push_str("# correspondences v1\n");
    let _ = writeln!(out, "# pair {}", corr.pair_id);
    let _ = writeln!(out, "# source {}", corr.source_name);
    let _ = writeln!(out, "# target {}", corr.target_name);
    match &corr.generator {
        Generator::Homography(h) => {
            let _ = writeln!(out, "# generator homography");
            let flat: Vec<String> = h.iter().flatten().map(|v| format!("{}", v)).collect();
            let _ = writeln!(out, "# h {}", flat.join(" "));
        }
        Generator::Poses {
            camera,
            plane_depth,
            source,
            target,
        } => {
            let _ = writeln!(out, "# generator poses");
            let _ = writeln!(
                out,
                "# camera {} {} {} {}",
                camera.fx, camera.fy, camera.cx, camera.cy
            );
            let _ = writeln!(out, "# plane_depth {}", plane_depth);
            for (tag, pose) in [("pose_source", source), ("pose_target", target)] {
                let mut fields: Vec<String> = pose
                    .rotation
                    .iter()
                    .flatten()
                    .map(|v| format!("{}", v))
                    .collect();
                fields.extend(pose.translation.iter().map(|v| format!("{}", v)));
                let _ = writeln!(out, "# {} {}", tag, fields.join(" "));
            }
        }
    }
    out.push_str("# rows: src_row src_col tgt_row tgt_col\n");
    for (s, t) in &corr.points {
        let _ = writeln!(out, "{} {} {} {}", s.row, s.col, t.row, t.col);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_floats(path: &Path, rest: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::data(path, format!("bad float list: {}", rest)))?;
    if values.len() != expected {
        return Err(Error::data(
            path,
            format!("expected {} floats, got {}", expected, values.len()),
        ));
    }
    Ok(values)
}

fn pose_from_fields(v: &[f64]) -> RigidPose {
    RigidPose {
        rotation: [
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
        ],
        translation: [v[9], v[10], v[11]],
    }
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pair_id = String::new();
    let mut source_name = String::new();
    let mut target_name = String::new();
    let mut homography: Option<Mat3> = None;
    let mut camera: Option<CameraModel> = None;
    let mut plane_depth: Option<f64> = None;
    let mut pose_source: Option<RigidPose> = None;
    let mut pose_target: Option<RigidPose> = None;
    let mut points = Vec::new();

    for line in text.lines() {
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(rest) = comment.strip_prefix("pair ") {
                pair_id = rest.trim().to_string();
            } else if let Some(rest) = comment.strip_prefix("source ") {
                source_name = rest.trim().to_string();
            } else if let Some(rest) = comment.strip_prefix("target ") {
                target_name = rest.trim().to_string();
            } else if let Some(rest) = comment.strip_prefix("h ") {
                let v = parse_floats(path, rest, 9)?;
                homography = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
            } else if let Some(rest) = comment.strip_prefix("camera ") {
                let v = parse_floats(path, rest, 4)?;
                camera = Some(CameraModel {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                });
            } else if let Some(rest) = comment.strip_prefix("plane_depth ") {
                plane_depth = Some(parse_floats(path, rest, 1)?[0]);
            } else if let Some(rest) = comment.strip_prefix("pose_source ") {
                pose_source = Some(pose_from_fields(&parse_floats(path, rest, 12)?));
            } else if let Some(rest) = comment.strip_prefix("pose_target ") {
                pose_target = Some(pose_from_fields(&parse_floats(path, rest, 12)?));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(path, format!("bad correspondence row: {}", line)))?;
        if fields.len() != 4 {
            return Err(Error::data(path, format!("bad correspondence row: {}", line)));
        }
        points.push((
            PixelLoc::new(fields[0], fields[1]),
            PixelLoc::new(fields[2], fields[3]),
        ));
    }

    let generator = if let Some(h) = homography {
        Generator::Homography(h)
    } else {
        Generator::Poses {
            camera: camera.ok_or_else(|| Error::data(path, "missing camera line"))?,
            plane_depth: plane_depth.ok_or_else(|| Error::data(path, "missing plane_depth"))?,
            source: pose_source.ok_or_else(|| Error::data(path, "missing pose_source"))?,
            target: pose_target.ok_or_else(|| Error::data(path, "missing pose_target"))?,
        }
    };
    Ok(CorrespondenceSet {
        pair_id,
        source_name,
        target_name,
        generator,
        points,
    })
}

/// Generate and write a full dataset: manifest, per-pair images and
/// correspondence files. Deterministic per seed.
pub fn build_dataset(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs_dir = out_dir.join("pairs");
    std::fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;

    let mut manifest = String::new();
    manifest.push_str("# densedesc dataset manifest\n");
    let _ = writeln!(manifest, "version {}", MANIFEST_VERSION);
    let _ = writeln!(manifest, "mode {}", config.mode.name());
    let _ = writeln!(manifest, "height {}", config.height);
    let _ = writeln!(manifest, "width {}", config.width);
    let _ = writeln!(manifest, "grid_step {}", config.grid_step);
    let _ = writeln!(manifest, "octaves {}", config.octaves);
    let _ = writeln!(manifest, "seed {}", config.seed);

    for (split, count) in [
        (Split::Train, config.train_pairs),
        (Split::Val, config.val_pairs),
        (Split::Test, config.test_pairs),
    ] {
        for index in 0..count {
            let pair = generate_pair(config, split, index)?;
            let dir = pairs_dir.join(&pair.corr.pair_id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_ppm(&dir.join("source.ppm"), &pair.source)?;
            write_ppm(&dir.join("target.ppm"), &pair.target)?;
            write_correspondences(&dir.join("correspondences.txt"), &pair.corr)?;
            let _ = writeln!(
                manifest,
                "pair {} {} {}",
                pair.corr.pair_id,
                split.name(),
                pair.texture_seed
            );
        }
    }

    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(out_dir.to_path_buf())
}

#[derive(Debug, Clone)]
pub struct PairMeta {
    pub id: String,
    pub split: Split,
    pub texture_seed: u64,
}

#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub mode: GenMode,
    pub height: usize,
    pub width: usize,
    pub grid_step: usize,
    pub pairs: Vec<PairMeta>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut mode = None;
        let mut height = None;
        let mut width = None;
        let mut grid_step = None;
        let mut pairs = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("version") => {
                    let v: u32 = fields
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::data(&manifest_path, "bad version"))?;
                    if v != MANIFEST_VERSION {
                        return Err(Error::data(
                            &manifest_path,
                            format!("manifest version {} unsupported", v),
                        ));
                    }
                }
                Some("mode") => {
                    mode = Some(GenMode::parse(fields.next().unwrap_or(""))?);
                }
                Some("height") => height = fields.next().and_then(|t| t.parse().ok()),
                Some("width") => width = fields.next().and_then(|t| t.parse().ok()),
                Some("grid_step") => grid_step = fields.next().and_then(|t| t.parse().ok()),
                Some("octaves") | Some("seed") => {}
                Some("pair") => {
                    let id = fields
                        .next()
                        .ok_or_else(|| Error::data(&manifest_path, "pair line missing id"))?;
                    let split = Split::parse(fields.next().unwrap_or(""))?;
                    let texture_seed = fields
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::data(&manifest_path, "pair line missing seed"))?;
                    pairs.push(PairMeta {
                        id: id.to_string(),
                        split,
                        texture_seed,
                    });
                }
                Some(other) => {
                    return Err(Error::data(
                        &manifest_path,
                        format!("unknown manifest key {:?}", other),
                    ));
                }
                None => {}
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            mode: mode.ok_or_else(|| Error::data(&manifest_path, "missing mode"))?,
            height: height.ok_or_else(|| Error::data(&manifest_path, "missing height"))?,
            width: width.ok_or_else(|| Error::data(&manifest_path, "missing width"))?,
            grid_step: grid_step.ok_or_else(|| Error::data(&manifest_path, "missing grid_step"))?,
            pairs,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&PairMeta> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn pair_dir(&self, meta: &PairMeta) -> PathBuf {
        self.root.join("pairs").join(&meta.id)
    }

    pub fn load_pair(&self, meta: &PairMeta) -> Result<LoadedPair> {
        let dir = self.pair_dir(meta);
        let corr = read_correspondences(&dir.join("correspondences.txt"))?;
        Ok(LoadedPair {
            source: read_ppm(&dir.join(&corr.source_name))?,
            target: read_ppm(&dir.join(&corr.target_name))?,
            corr,
        })
    }
}

#[derive(Debug)]
pub struct LoadedPair {
    pub source: Tensor,
    pub target: Tensor,
    pub corr: CorrespondenceSet,
}

/// Groundtruth at grid keypoints recomputed from the stored generator; the
/// valid mask is "the warped target pixel exists and stays in frame".
pub fn grid_groundtruth(
    corr: &CorrespondenceSet,
    height: usize,
    width: usize,
    step: usize,
) -> Result<Vec<(PixelLoc, PixelLoc)>> {
    let h = corr.generator.groundtruth_homography();
    // drop grid points whose forward map leaves the frame, mirroring the
    // mask check used at generation time (the warped image is rendered
    // wherever the inverse map stays in frame, which is exactly where the
    // forward image of some source pixel lands)
    let inv = invert(&h)?;
    let kept = correspondences_from_homography(&h, &grid_keypoints(height, width, step), height, width)
        .into_iter()
        .filter(|(_, t)| {
            let (sx, sy) = apply(&inv, t.col as f64, t.row as f64);
            sx >= 0.0 && sy >= 0.0 && sx <= (width - 1) as f64 && sy <= (height - 1) as f64
        })
        .collect();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            train_pairs: 3,
            val_pairs: 2,
            test_pairs: 2,
            height: 32,
            width: 40,
            octaves: 4,
            ..SynthConfig::default()
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        build_dataset(&tiny_config(), &a).unwrap();
        build_dataset(&tiny_config(), &b).unwrap();
        assert_eq!(tree_bytes(&a), tree_bytes(&b));

        let c = dir.path().join("c");
        build_dataset(
            &SynthConfig {
                seed: 8,
                ..tiny_config()
            },
            &c,
        )
        .unwrap();
        assert_ne!(tree_bytes(&a), tree_bytes(&c));
    }

    #[test]
    fn manifest_counts_and_split_seeds_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        build_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 7);
        assert_eq!(ds.split(Split::Train).len(), config.train_pairs);
        assert_eq!(ds.split(Split::Val).len(), config.val_pairs);
        assert_eq!(ds.split(Split::Test).len(), config.test_pairs);

        let mut seen = std::collections::HashMap::new();
        for pair in &ds.pairs {
            if let Some(prev) = seen.insert(pair.texture_seed, pair.split) {
                assert_eq!(prev, pair.split, "seed {} crosses splits", pair.texture_seed);
            }
        }
        assert_eq!(seen.len(), ds.pairs.len(), "texture seeds must be unique");
    }

    #[test]
    fn every_stored_correspondence_is_in_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        build_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for meta in &ds.pairs {
            let pair = ds.load_pair(meta).unwrap();
            assert!(!pair.corr.points.is_empty(), "{} has no correspondences", meta.id);
            for (s, t) in &pair.corr.points {
                assert!(s.row < config.height && s.col < config.width);
                assert!(t.row < config.height && t.col < config.width);
            }
        }
    }

    #[test]
    fn projective_mode_roundtrips_and_matches_its_homography() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            mode: GenMode::Projective,
            ..tiny_config()
        };
        build_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.mode, GenMode::Projective);
        for meta in ds.split(Split::Train) {
            let pair = ds.load_pair(meta).unwrap();
            let h = pair.corr.generator.groundtruth_homography();
            for (s, t) in &pair.corr.points {
                let (x, y) = apply(&h, s.col as f64, s.row as f64);
                assert!(
                    (x - t.col as f64).abs() <= 0.5 + 1e-9 && (y - t.row as f64).abs() <= 0.5 + 1e-9,
                    "pose projection and induced homography disagree: ({}, {}) vs {:?}",
                    x,
                    y,
                    t
                );
            }
        }
    }

    #[test]
    fn correspondence_file_roundtrip_preserves_generator() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&tiny_config(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let meta = &ds.pairs[0];
        let pair = ds.load_pair(meta).unwrap();
        // write it again elsewhere and compare parse results
        let copy = dir.path().join("copy.txt");
        write_correspondences(&copy, &pair.corr).unwrap();
        let again = read_correspondences(&copy).unwrap();
        assert_eq!(pair.corr.points, again.points);
        match (&pair.corr.generator, &again.generator) {
            (Generator::Homography(a), Generator::Homography(b)) => assert_eq!(a, b),
            _ => panic!("generator kind changed"),
        }
    }

    #[test]
    fn grid_groundtruth_agrees_with_stored_points() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        build_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let meta = &ds.pairs[0];
        let pair = ds.load_pair(meta).unwrap();
        let grid = grid_groundtruth(&pair.corr, ds.height, ds.width, ds.grid_step).unwrap();
        // the stored set used the rendered mask; recomputation keeps the
        // same pairs (mask membership may differ only through rounding,
        // so stored points must be a subset)
        for stored in &pair.corr.points {
            assert!(
                grid.contains(stored),
                "stored correspondence {:?} missing from recomputed grid",
                stored
            );
        }
        assert!(grid.len() >= pair.corr.points.len());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let err = build_dataset(&tiny_config(), Path::new("/proc/nope/denied")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
