//! Deterministic synthetic image pairs with exact groundtruth
//! correspondences: textures, planar homographies, posed pinhole cameras,
//! and the dataset builder that ties them together.

pub mod camera;
pub mod dataset;
pub mod homography;
pub mod texture;

pub use camera::{project_points, CameraModel, RigidPose};
pub use dataset::{
    build_dataset, grid_groundtruth, read_correspondences, CorrespondenceSet, Dataset, GenMode,
    Generator, LoadedPair, PairMeta, Split, SynthConfig,
};
pub use homography::{
    correspondences_from_homography, sample_homography, warp_image, HomographyBounds, Mat3,
};
pub use texture::generate_texture;
