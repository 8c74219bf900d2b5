//! Deterministic multi-octave value-noise textures.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Seeded RGB value-noise image in [0, 1]: per octave a random lattice is
/// bilinearly interpolated, octave amplitudes halve, spacing halves.
pub fn generate_texture(seed: u64, height: usize, width: usize, octaves: usize) -> Result<Tensor> {
    assert!(height >= 16 && width >= 16, "texture needs at least 16x16");
    assert!(octaves >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    let mut total_amp = 0.0;
    for octave in 0..octaves {
        let spacing = (1usize << (octaves - octave)).max(2);
        let amp = 0.5f64.powi(octave as i32);
        total_amp += amp;
        let rows = height / spacing + 2;
        let cols = width / spacing + 2;
        for c in 0..3 {
            let lattice: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            for r in 0..height {
                let fy = r as f64 / spacing as f64;
                let y0 = fy as usize;
                let ty = fy - y0 as f64;
                for col in 0..width {
                    let fx = col as f64 / spacing as f64;
                    let x0 = fx as usize;
                    let tx = fx - x0 as f64;
                    let v00 = lattice[y0 * cols + x0];
                    let v01 = lattice[y0 * cols + x0 + 1];
                    let v10 = lattice[(y0 + 1) * cols + x0];
                    let v11 = lattice[(y0 + 1) * cols + x0 + 1];
                    let v = v00 * (1.0 - ty) * (1.0 - tx)
                        + v01 * (1.0 - ty) * tx
                        + v10 * ty * (1.0 - tx)
                        + v11 * ty * tx;
                    data[c * plane + r * width + col] += amp * v;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v /= total_amp;
    }
    Tensor::from_vec(data, &[3, height, width], false)
}
