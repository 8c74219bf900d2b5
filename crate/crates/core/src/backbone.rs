//! Fully convolutional encoder-decoder that turns an image into a
//! same-resolution descriptor map with unit-norm channel vectors.
//!
//! Wiring: per-channel standardization of the input (per-sample statistics,
//! applied only at the stem so the conv tower stays exactly shift
//! equivariant away from borders), an initial 3x3 convolution, then per
//! resolution level a densely connected block (each layer: activation ->
//! 3x3 conv producing `growth_rate` new channels, concatenated onto the
//! running stack), a 1x1 transition plus 2x2 average pooling on the way
//! down, nearest-neighbor upsampling plus a 3x3 convolution over the
//! previous block's new channels on the way up, with encoder-decoder skip
//! concatenation, and a final 1x1 projection to the descriptor length
//! followed by channel L2 normalization. Two-branch training shares the
//! single weight set by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::DescriptorMap;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// 1 (gray) or 3 (color).
    pub input_channels: usize,
    /// Channel count of the output descriptor map.
    pub descriptor_length: usize,
    /// Dense-layer count per encoder level plus one bottleneck entry;
    /// the decoder mirrors the encoder.
    pub layers_per_block: Vec<usize>,
    /// New channels added by each dense layer.
    pub growth_rate: usize,
    /// Number of 2x downsampling levels.
    pub downsample_levels: usize,
    /// Negative slope of the rectifier (0 = plain rectifier).
    pub activation_slope: f64,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    /// Desk-scale default: ~45k parameters, 16-channel descriptors.
    pub fn desk() -> Self {
        BackboneConfig {
            input_channels: 3,
            descriptor_length: 16,
            layers_per_block: vec![2, 2],
            growth_rate: 12,
            downsample_levels: 1,
            activation_slope: 0.1,
            seed: 7,
        }
    }

    /// Gray-input variant with a receptive field at least four times
    /// smaller than [`BackboneConfig::desk`] at a near-identical parameter
    /// count. Trades depth for width: a single dense layer with a large
    /// growth rate and no downsampling.
    pub fn desk_small_receptive() -> Self {
        BackboneConfig {
            input_channels: 1,
            descriptor_length: 16,
            layers_per_block: vec![1],
            growth_rate: 48,
            downsample_levels: 0,
            activation_slope: 0.1,
            seed: 7,
        }
    }

    /// 32 dense layers, growth 10, 256-channel descriptors (~0.53M params).
    pub fn full_256() -> Self {
        BackboneConfig {
            input_channels: 3,
            descriptor_length: 256,
            layers_per_block: vec![4, 4, 4, 8],
            growth_rate: 10,
            downsample_levels: 3,
            activation_slope: 0.1,
            seed: 7,
        }
    }

    /// 38 dense layers, growth 16, 256-channel descriptors (~1.8M params).
    pub fn full_256_wide() -> Self {
        BackboneConfig {
            input_channels: 3,
            descriptor_length: 256,
            layers_per_block: vec![5, 5, 5, 8],
            growth_rate: 16,
            downsample_levels: 3,
            activation_slope: 0.1,
            seed: 7,
        }
    }

    fn first_conv_channels(&self) -> usize {
        2 * self.growth_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.descriptor_length == 0 {
            return Err(Error::InvalidConfig("descriptor_length must be >= 1".into()));
        }
        if self.growth_rate == 0 {
            return Err(Error::InvalidConfig("growth_rate must be >= 1".into()));
        }
        if self.layers_per_block.len() != self.downsample_levels + 1 {
            return Err(Error::InvalidConfig(format!(
                "layers_per_block needs one entry per level plus the bottleneck: \
                 expected {} entries, got {}",
                self.downsample_levels + 1,
                self.layers_per_block.len()
            )));
        }
        if self.downsample_levels > 0 && self.layers_per_block.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig(
                "every block needs at least one layer when downsampling is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// One step of the architecture walk shared by parameter construction,
/// the forward pass, and receptive-field accounting.
#[derive(Debug, Clone)]
pub(crate) enum PlanStep {
    Conv(ConvSpec),
    BlockStart,
    /// Dense layer: norm -> activation -> conv, output concatenated.
    DenseConv(ConvSpec),
    PushSkip,
    /// 1x1 transition followed by 2x2 average pooling.
    DownConv(ConvSpec),
    /// Nearest upsample of the previous block's new maps, then conv.
    UpConv(ConvSpec),
    PopSkip,
    /// Norm -> activation -> 1x1 projection -> channel L2 normalization.
    FinalConv(ConvSpec),
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

impl ConvSpec {
    fn numel(&self) -> usize {
        self.cout * self.cin * self.ksize * self.ksize
    }
}

/// Architecture walk for a config. Single source of the channel arithmetic.
pub(crate) fn plan(config: &BackboneConfig) -> Vec<PlanStep> {
    let g = config.growth_rate;
    let mut steps = Vec::new();
    let mut c = config.first_conv_channels();
    steps.push(PlanStep::Conv(ConvSpec {
        name: "stem".into(),
        cin: config.input_channels,
        cout: c,
        ksize: 3,
    }));

    let levels = config.downsample_levels;
    let mut skip_channels = Vec::new();
    for level in 0..levels {
        steps.push(PlanStep::BlockStart);
        for layer in 0..config.layers_per_block[level] {
            steps.push(PlanStep::DenseConv(ConvSpec {
                name: format!("down{}.dense{}", level, layer),
                cin: c,
                cout: g,
                ksize: 3,
            }));
            c += g;
        }
        skip_channels.push(c);
        steps.push(PlanStep::PushSkip);
        steps.push(PlanStep::DownConv(ConvSpec {
            name: format!("down{}.transition", level),
            cin: c,
            cout: c,
            ksize: 1,
        }));
    }

    steps.push(PlanStep::BlockStart);
    let bottleneck_layers = config.layers_per_block[levels];
    for layer in 0..bottleneck_layers {
        steps.push(PlanStep::DenseConv(ConvSpec {
            name: format!("bottleneck.dense{}", layer),
            cin: c,
            cout: g,
            ksize: 3,
        }));
        c += g;
    }
    let mut new_maps = bottleneck_layers * g;

    for level in (0..levels).rev() {
        steps.push(PlanStep::UpConv(ConvSpec {
            name: format!("up{}.transition", level),
            cin: new_maps,
            cout: new_maps,
            ksize: 3,
        }));
        steps.push(PlanStep::PopSkip);
        c = skip_channels[level] + new_maps;
        steps.push(PlanStep::BlockStart);
        for layer in 0..config.layers_per_block[level] {
            steps.push(PlanStep::DenseConv(ConvSpec {
                name: format!("up{}.dense{}", level, layer),
                cin: c,
                cout: g,
                ksize: 3,
            }));
            c += g;
        }
        new_maps = config.layers_per_block[level] * g;
    }

    steps.push(PlanStep::FinalConv(ConvSpec {
        name: "head".into(),
        cin: c,
        cout: config.descriptor_length,
        ksize: 1,
    }));
    steps
}

fn conv_specs(config: &BackboneConfig) -> Vec<ConvSpec> {
    plan(config)
        .into_iter()
        .filter_map(|s| match s {
            PlanStep::Conv(spec)
            | PlanStep::DenseConv(spec)
            | PlanStep::DownConv(spec)
            | PlanStep::UpConv(spec)
            | PlanStep::FinalConv(spec) => Some(spec),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// A built descriptor network: config plus one named kernel per convolution.
#[derive(Debug)]
pub struct DescriptorNetwork {
    config: BackboneConfig,
    params: Vec<Parameter>,
}

/// Build a network with seeded fan-in-scaled normal initialization.
pub fn build_network(config: &BackboneConfig) -> Result<DescriptorNetwork> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    for spec in conv_specs(config) {
        let fan_in = (spec.cin * spec.ksize * spec.ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data: Vec<f64> = (0..spec.numel()).map(|_| gaussian(&mut rng) * std).collect();
        let tensor = Tensor::from_vec(data, &[spec.cout, spec.cin, spec.ksize, spec.ksize], true)?;
        params.push(Parameter {
            name: spec.name.clone(),
            tensor,
        });
    }
    Ok(DescriptorNetwork {
        config: config.clone(),
        params,
    })
}

/// Box-Muller standard normal. Kept local so parameter streams depend only
/// on the ChaCha seed, not on a rand_distr version.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl DescriptorNetwork {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replace every parameter tensor (used by the optimizer and by
    /// checkpoint loading). Count, order, and shapes must match.
    pub fn replace_parameters(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (param, tensor) in self.params.iter_mut().zip(tensors) {
            if param.tensor.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {}: expected shape {:?}, got {:?}",
                    param.name,
                    param.tensor.shape(),
                    tensor.shape()
                )));
            }
            param.tensor = tensor;
        }
        Ok(())
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.tensor.clear_grad();
        }
    }

    /// Dense descriptor map for an image, same resolution, unit channel
    /// norms. Spatial extents must be divisible by `2^downsample_levels`.
    pub fn forward(&self, image: &Tensor) -> Result<DescriptorMap> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected [{},H,W] input, got {:?}",
                self.config.input_channels, shape
            )));
        }
        let multiple = 1usize << self.config.downsample_levels;
        if shape[1] % multiple != 0 || shape[2] % multiple != 0 {
            return Err(Error::InvalidArgument(format!(
                "input resolution {}x{} must be divisible by {}",
                shape[1], shape[2], multiple
            )));
        }

        let slope = self.config.activation_slope;
        let mut kernels = self.params.iter().map(|p| &p.tensor);
        let mut next = |x: &Tensor, pad: usize| -> Result<Tensor> {
            let k = kernels.next().expect("plan and parameter list stay in sync");
            x.conv2d(k, 1, pad)
        };

        // Input standardization is the one data-dependent normalization;
        // everything after it is shift equivariant up to border effects.
        let mut x = image.instance_norm(NORM_EPS)?;
        let mut skips: Vec<Tensor> = Vec::new();
        let mut block_new: Option<Tensor> = None;
        for step in plan(&self.config) {
            match step {
                PlanStep::Conv(_) => {
                    x = next(&x, 1)?;
                }
                PlanStep::BlockStart => {
                    block_new = None;
                }
                PlanStep::DenseConv(_) => {
                    let y = next(&x.leaky_relu(slope), 1)?;
                    block_new = Some(match block_new {
                        None => y.clone(),
                        Some(b) => b.concat_channels(&y)?,
                    });
                    x = x.concat_channels(&y)?;
                }
                PlanStep::PushSkip => {
                    skips.push(x.clone());
                }
                PlanStep::DownConv(_) => {
                    x = next(&x.leaky_relu(slope), 0)?.avg_pool2()?;
                }
                PlanStep::UpConv(_) => {
                    let maps = block_new
                        .take()
                        .expect("transition up always follows a dense block");
                    x = next(&maps.upsample2_nearest()?, 1)?;
                }
                PlanStep::PopSkip => {
                    let skip = skips.pop().expect("skip stack balanced by plan");
                    x = skip.concat_channels(&x)?;
                }
                PlanStep::FinalConv(_) => {
                    x = next(&x.leaky_relu(slope), 0)?.channel_l2_normalize(L2_EPS)?;
                }
            }
        }
        debug_assert!(kernels.next().is_none());
        DescriptorMap::new(x)
    }
}

/// Side length in input pixels of the region influencing one output pixel.
pub fn receptive_field(config: &BackboneConfig) -> usize {
    let mut rf: usize = 1;
    let mut jump: usize = 1;
    for step in plan(config) {
        match step {
            PlanStep::Conv(spec) | PlanStep::DenseConv(spec) => {
                rf += (spec.ksize - 1) * jump;
            }
            PlanStep::DownConv(_) => {
                // 1x1 transition leaves rf; the 2x2 pool widens then strides.
                rf += jump;
                jump *= 2;
            }
            PlanStep::UpConv(spec) => {
                jump /= 2;
                rf += (spec.ksize - 1) * jump;
            }
            PlanStep::FinalConv(_) | PlanStep::BlockStart | PlanStep::PushSkip | PlanStep::PopSkip => {}
        }
    }
    rf
}

/// Parameter count derived from the architecture walk without building
/// any tensors.
pub fn parameter_count(config: &BackboneConfig) -> Result<usize> {
    config.validate()?;
    Ok(conv_specs(config).iter().map(|s| s.numel()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, &[c, h, w], false).unwrap()
    }

    /// Independent parameter-count arithmetic for the desk config
    /// (stem 3x3, dense blocks, 1x1 transitions, up convs over the previous
    /// block's new maps, final 1x1), written without the plan walker.
    fn desk_expected_count(g: usize, input_ch: usize, c_desc: usize) -> usize {
        let f0 = 2 * g;
        let stem = input_ch * f0 * 9;
        let enc = (f0 * g + (f0 + g) * g) * 9;
        let c_skip = f0 + 2 * g;
        let td = c_skip * c_skip;
        let bot = (c_skip * g + (c_skip + g) * g) * 9;
        let m = 2 * g;
        let tu = m * m * 9;
        let c_dec_in = c_skip + m;
        let dec = (c_dec_in * g + (c_dec_in + g) * g) * 9;
        let head = (c_dec_in + 2 * g) * c_desc;
        stem + enc + td + bot + tu + dec + head
    }

    #[test]
    fn desk_parameter_count_matches_architecture_arithmetic() {
        // The spec'd desk example: blocks [2,2], growth 8, one level.
        let config = BackboneConfig {
            growth_rate: 8,
            ..BackboneConfig::desk()
        };
        let count = parameter_count(&config).unwrap();
        assert_eq!(count, desk_expected_count(8, 3, 16));
        assert!((20_000..=100_000).contains(&count), "count {}", count);

        let net = build_network(&config).unwrap();
        assert_eq!(net.parameter_count(), count);

        // default desk preset sits near 50k
        let desk = build_network(&BackboneConfig::desk()).unwrap();
        assert_eq!(desk.parameter_count(), desk_expected_count(12, 3, 16));
        assert!(
            (35_000..=65_000).contains(&desk.parameter_count()),
            "desk count {}",
            desk.parameter_count()
        );
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let config = BackboneConfig::desk();
        let a = build_network(&config).unwrap();
        let b = build_network(&config).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let other = build_network(&BackboneConfig {
            seed: 8,
            ..config
        })
        .unwrap();
        assert_ne!(
            a.parameters()[0].tensor.data(),
            other.parameters()[0].tensor.data()
        );
    }

    #[test]
    fn full_preset_parameter_count_near_reported() {
        let count = parameter_count(&BackboneConfig::full_256()).unwrap() as f64;
        let target = 0.53e6;
        assert!(
            (count - target).abs() / target <= 0.10,
            "count {} vs target {}",
            count,
            target
        );
    }

    #[test]
    fn forward_produces_unit_norm_descriptors() {
        let config = BackboneConfig {
            descriptor_length: 8,
            growth_rate: 4,
            ..BackboneConfig::desk()
        };
        let net = build_network(&config).unwrap();
        let image = random_image(3, 3, 16, 24);
        let map = net.forward(&image).unwrap();
        assert_eq!(map.tensor().shape(), &[8, 16, 24]);
        let data = map.tensor().data();
        let plane = 16 * 24;
        for p in 0..plane {
            let norm: f64 = (0..8).map(|c| data[c * plane + p].powi(2)).sum::<f64>().sqrt();
            assert!(
                (norm - 1.0).abs() <= 1e-5 || norm == 0.0,
                "pixel {} norm {}",
                p,
                norm
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_network(&BackboneConfig::desk()).unwrap();
        let image = random_image(5, 3, 16, 16);
        let a = net.forward(&image).unwrap();
        let b = net.forward(&image).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
    }

    #[test]
    fn forward_rejects_indivisible_resolution() {
        let net = build_network(&BackboneConfig::desk()).unwrap();
        let image = random_image(6, 3, 17, 16);
        let err = net.forward(&image).unwrap_err();
        assert!(err.to_string().contains("divisible by 2"), "{}", err);
    }

    #[test]
    fn zero_image_gives_spatially_constant_map() {
        let net = build_network(&BackboneConfig::desk()).unwrap();
        let image = Tensor::zeros(&[3, 8, 8]);
        let map = net.forward(&image).unwrap();
        let data = map.tensor().data();
        let plane = 64;
        for c in 0..16 {
            let first = data[c * plane];
            for p in 0..plane {
                assert_eq!(data[c * plane + p], first);
            }
        }
    }

    #[test]
    fn descriptors_shift_with_circularly_shifted_input() {
        let config = BackboneConfig {
            descriptor_length: 8,
            growth_rate: 6,
            ..BackboneConfig::desk()
        };
        let net = build_network(&config).unwrap();
        let (h, w) = (32, 40);
        let image = random_image(7, 3, h, w);
        let shift = 1usize << config.downsample_levels;

        // circular shift keeps per-channel statistics identical
        let mut shifted = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    shifted[c * h * w + ((r + shift) % h) * w + (col + shift) % w] =
                        image.data()[c * h * w + r * w + col];
                }
            }
        }
        let shifted = Tensor::from_vec(shifted, &[3, h, w], false).unwrap();

        let base = net.forward(&image).unwrap();
        let moved = net.forward(&shifted).unwrap();
        let margin = receptive_field(&config) / 2 + shift;
        let plane = h * w;
        for c in 0..config.descriptor_length {
            for r in margin..h - margin {
                for col in margin..w - margin {
                    let a = base.tensor().data()[c * plane + r * w + col];
                    let b = moved.tensor().data()[c * plane + (r + shift) * w + (col + shift)];
                    assert!(
                        (a - b).abs() <= 1e-4,
                        "equivariance at c={} r={} col={}: {} vs {}",
                        c,
                        r,
                        col,
                        a,
                        b
                    );
                }
            }
        }
    }

    #[test]
    fn receptive_field_examples() {
        // stem only: a single 3x3 convolution
        let single = BackboneConfig {
            layers_per_block: vec![0],
            downsample_levels: 0,
            ..BackboneConfig::desk()
        };
        assert_eq!(receptive_field(&single), 3);

        // stem + one dense layer: two stacked 3x3
        let two = BackboneConfig {
            layers_per_block: vec![1],
            downsample_levels: 0,
            ..BackboneConfig::desk()
        };
        assert_eq!(receptive_field(&two), 5);

        // one extra downsample level strictly increases the field
        let mut prev = receptive_field(&BackboneConfig {
            layers_per_block: vec![2, 2],
            downsample_levels: 1,
            ..BackboneConfig::desk()
        });
        for levels in 2..4 {
            let cfg = BackboneConfig {
                layers_per_block: vec![2; levels + 1],
                downsample_levels: levels,
                ..BackboneConfig::desk()
            };
            let rf = receptive_field(&cfg);
            assert!(rf > prev, "levels {}: {} vs {}", levels, rf, prev);
            prev = rf;
        }
    }

    #[test]
    fn small_receptive_variant_relations() {
        let rr = BackboneConfig::desk();
        let sg = BackboneConfig::desk_small_receptive();
        let rf_rr = receptive_field(&rr);
        let rf_sg = receptive_field(&sg);
        assert!(
            rf_sg * 4 <= rf_rr,
            "receptive fields: variant {} vs base {}",
            rf_sg,
            rf_rr
        );
        let count_rr = parameter_count(&rr).unwrap() as f64;
        let count_sg = parameter_count(&sg).unwrap() as f64;
        assert!(
            (count_sg - count_rr).abs() / count_rr <= 0.25,
            "params: variant {} vs base {}",
            count_sg,
            count_rr
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let mut config = BackboneConfig::desk();
        config.descriptor_length = 0;
        assert!(build_network(&config).is_err());

        let mut config = BackboneConfig::desk();
        config.layers_per_block = vec![2];
        assert!(build_network(&config).is_err());

        let mut config = BackboneConfig::desk();
        config.input_channels = 2;
        assert!(build_network(&config).is_err());
    }
}
