//! Small convolutional feature extractor with a shallow and a deep tap.
//!
//! Default: three 3x3 stride-2 stages (widths 32/64/D) with a smooth
//! softplus nonlinearity; the shallow map is tapped after stage 1, the deep
//! map after the last stage, giving a spatial ratio of 4 between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{Graph, NodeId, PadMode};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Softplus,
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    /// Output channels per stage; the last entry is the deep dimension D.
    pub stage_widths: Vec<usize>,
    /// Downsample factor per stage.
    pub stage_strides: Vec<usize>,
    pub kernel_size: usize,
    /// Stage index (0-based) after which the shallow map is tapped; the
    /// deep map is always the last stage's output.
    pub shallow_stage: usize,
    pub nonlinearity: Nonlinearity,
    pub padding: PadMode,
    pub init_seed: u64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            stage_widths: vec![32, 64, 64],
            stage_strides: vec![2, 2, 2],
            kernel_size: 3,
            shallow_stage: 0,
            nonlinearity: Nonlinearity::Softplus,
            padding: PadMode::Zeros,
            init_seed: 1,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_strides.len() {
            return Err(Error::Config(
                "stage_widths and stage_strides must be equal-length and non-empty".into(),
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero-width stage".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("zero-stride stage".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd and positive".into()));
        }
        if self.shallow_stage + 1 >= self.stage_widths.len() {
            return Err(Error::Config(
                "shallow tap must come before the last stage".into(),
            ));
        }
        Ok(())
    }

    pub fn deep_dim(&self) -> usize {
        *self.stage_widths.last().unwrap()
    }

    pub fn shallow_dim(&self) -> usize {
        self.stage_widths[self.shallow_stage]
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Spatial ratio between shallow and deep grids.
    pub fn spatial_ratio(&self) -> usize {
        self.stage_strides[self.shallow_stage + 1..].iter().product()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected [3, h, w] image, got {shape:?}")));
        }
        let total = self.total_stride();
        if shape[1] % total != 0 || shape[2] % total != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by total stride {total}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub config: FeatureExtractorConfig,
    pub stages: Vec<ConvStage>,
}

impl BackboneParams {
    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.weight.len() + s.bias.len()).sum()
    }
}

/// Fan-in scaled init: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// (variance `1 / (3 fan_in)`), biases zero. Deterministic in the seed.
pub fn init_params(config: &FeatureExtractorConfig) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
    let k = config.kernel_size;
    let mut stages = Vec::with_capacity(config.stage_widths.len());
    let mut in_ch = 3;
    for &out_ch in &config.stage_widths {
        let fan_in = (in_ch * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor::from_vec(
            &[out_ch, in_ch, k, k],
            (0..out_ch * in_ch * k * k)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )?;
        stages.push(ConvStage {
            weight,
            bias: Tensor::zeros(&[out_ch]),
        });
        in_ch = out_ch;
    }
    Ok(BackboneParams { config: config.clone(), stages })
}

/// Graph leaves for the backbone parameters, in a fixed order
/// (stage 0 weight, stage 0 bias, stage 1 weight, ...).
pub struct BackboneNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl BackboneNodes {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

pub fn insert_backbone(g: &mut Graph, params: &BackboneParams, trainable: bool) -> BackboneNodes {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for stage in &params.stages {
        let (w, b) = if trainable {
            (g.param(stage.weight.clone()), g.param(stage.bias.clone()))
        } else {
            (g.constant(stage.weight.clone()), g.constant(stage.bias.clone()))
        };
        weights.push(w);
        biases.push(b);
    }
    BackboneNodes { weights, biases }
}

/// Forward pass producing `(shallow, deep)` feature-map nodes.
pub fn forward_backbone(
    g: &mut Graph,
    config: &FeatureExtractorConfig,
    nodes: &BackboneNodes,
    image: NodeId,
) -> Result<(NodeId, NodeId)> {
    config.check_input(g.value(image).shape())?;
    let pad = config.kernel_size / 2;
    let mut x = image;
    let mut shallow = None;
    for (i, (&w, &b)) in nodes.weights.iter().zip(&nodes.biases).enumerate() {
        let conv = g.conv2d(x, w, b, config.stage_strides[i], pad, config.padding)?;
        x = match config.nonlinearity {
            Nonlinearity::Softplus => g.softplus(conv),
            Nonlinearity::Tanh => g.tanh(conv),
            Nonlinearity::Relu => g.relu(conv),
        };
        if i == config.shallow_stage {
            shallow = Some(x);
        }
    }
    Ok((shallow.expect("shallow tap before last stage"), x))
}

/// Shallow and deep feature maps, stored `[channels, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub shallow: Tensor,
    pub deep: Tensor,
}

/// Value-level feature extraction over a batch, order preserved.
pub fn extract_features(params: &BackboneParams, images: &[Tensor]) -> Result<Vec<FeatureMaps>> {
    images
        .iter()
        .map(|img| {
            let mut g = Graph::new();
            let image = g.constant(img.clone());
            let nodes = insert_backbone(&mut g, params, false);
            let (shallow, deep) = forward_backbone(&mut g, &params.config, &nodes, image)?;
            Ok(FeatureMaps {
                shallow: g.value(shallow).clone(),
                deep: g.value(deep).clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::{finite_diff_gradient, relative_error, DEFAULT_STEP};
    use rand::Rng;

    fn rand_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn default_config_shapes() {
        let params = init_params(&FeatureExtractorConfig::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let maps = extract_features(&params, &[rand_image(&mut rng, 96, 96)]).unwrap();
        assert_eq!(maps[0].deep.shape(), &[64, 12, 12]);
        assert_eq!(maps[0].shallow.shape(), &[32, 48, 48]);
        assert_eq!(params.config.spatial_ratio(), 4);
    }

    #[test]
    fn batch_preserves_order() {
        let params = init_params(&FeatureExtractorConfig::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let imgs = vec![rand_image(&mut rng, 32, 32), rand_image(&mut rng, 32, 32)];
        let batch = extract_features(&params, &imgs).unwrap();
        let single0 = extract_features(&params, &imgs[..1]).unwrap();
        let single1 = extract_features(&params, &imgs[1..]).unwrap();
        assert_eq!(batch[0], single0[0]);
        assert_eq!(batch[1], single1[0]);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let params = init_params(&FeatureExtractorConfig::default()).unwrap();
        let img = Tensor::zeros(&[3, 100, 100]);
        assert!(extract_features(&params, &[img]).is_err());
    }

    #[test]
    fn zero_width_stage_is_a_config_error() {
        let config = FeatureExtractorConfig {
            stage_widths: vec![8, 0, 4],
            ..FeatureExtractorConfig::default()
        };
        assert!(init_params(&config).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let config = FeatureExtractorConfig::default();
        assert_eq!(init_params(&config).unwrap(), init_params(&config).unwrap());
    }

    #[test]
    fn init_variance_matches_fan_in_formula() {
        // uniform(-b, b) with b = 1/sqrt(fan_in) has variance 1/(3 fan_in)
        let mut sums = vec![0.0f64; 3];
        let mut counts = vec![0usize; 3];
        for seed in 0..10 {
            let config = FeatureExtractorConfig {
                init_seed: seed,
                ..FeatureExtractorConfig::default()
            };
            let params = init_params(&config).unwrap();
            for (i, stage) in params.stages.iter().enumerate() {
                sums[i] += stage.weight.data().iter().map(|w| w * w).sum::<f64>();
                counts[i] += stage.weight.len();
            }
        }
        let mut in_ch = 3;
        for (i, &width) in FeatureExtractorConfig::default().stage_widths.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let expected = 1.0 / (3.0 * fan_in);
            let observed = sums[i] / counts[i] as f64;
            assert!(
                (observed - expected).abs() / expected < 0.10,
                "stage {i}: observed {observed}, expected {expected}"
            );
            in_ch = width;
        }
    }

    #[test]
    fn full_gradient_check_on_small_config() {
        let config = FeatureExtractorConfig {
            stage_widths: vec![4, 5, 6],
            init_seed: 3,
            ..FeatureExtractorConfig::default()
        };
        let params = init_params(&config).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let img = rand_image(&mut rng, 16, 16);

        let flat: Vec<f64> = params
            .stages
            .iter()
            .flat_map(|s| s.weight.data().iter().chain(s.bias.data()).copied())
            .collect();
        let rebuild = |xs: &[f64]| {
            let mut p = params.clone();
            let mut off = 0;
            for stage in &mut p.stages {
                let wl = stage.weight.len();
                stage.weight.data_mut().copy_from_slice(&xs[off..off + wl]);
                off += wl;
                let bl = stage.bias.len();
                stage.bias.data_mut().copy_from_slice(&xs[off..off + bl]);
                off += bl;
            }
            p
        };
        let eval = |xs: &[f64]| {
            let p = rebuild(xs);
            let maps = extract_features(&p, std::slice::from_ref(&img)).unwrap();
            maps[0].deep.data().iter().sum::<f64>()
        };
        let fd = finite_diff_gradient(eval, &flat, DEFAULT_STEP);

        let mut g = Graph::new();
        let image = g.constant(img.clone());
        let nodes = insert_backbone(&mut g, &params, true);
        let (_, deep) = forward_backbone(&mut g, &config, &nodes, image).unwrap();
        let loss = g.sum(deep);
        let grads = g.backward(loss).unwrap();
        let ad: Vec<f64> = nodes
            .param_ids()
            .iter()
            .flat_map(|&id| grads.get(id).unwrap().data().to_vec())
            .collect();
        let err = relative_error(&ad, &fd);
        assert!(err < 1e-4, "backbone gradient rel err {err}");
    }

    #[test]
    fn sampled_gradient_check_on_default_config() {
        let params = init_params(&FeatureExtractorConfig::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = rand_image(&mut rng, 16, 16);

        let mut g = Graph::new();
        let image = g.constant(img.clone());
        let nodes = insert_backbone(&mut g, &params, true);
        let (_, deep) = forward_backbone(&mut g, &params.config, &nodes, image).unwrap();
        let loss = g.sum(deep);
        let grads = g.backward(loss).unwrap();

        // spot-check 20 random weight entries of stage 2 by central differences
        let stage = 1usize;
        let wlen = params.stages[stage].weight.len();
        for _ in 0..20 {
            let idx = rng.gen_range(0..wlen);
            let step = DEFAULT_STEP;
            let mut eval = |delta: f64| {
                let mut p = params.clone();
                p.stages[stage].weight.data_mut()[idx] += delta;
                let maps = extract_features(&p, std::slice::from_ref(&img)).unwrap();
                maps[0].deep.data().iter().sum::<f64>()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let ad = grads.get(nodes.weights[stage]).unwrap().data()[idx];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((ad - fd) / denom).abs() < 1e-4,
                "entry {idx}: ad {ad} fd {fd}"
            );
        }
    }

    #[test]
    fn periodic_shift_covariance() {
        // shifting the input by the total stride with periodic padding
        // shifts the deep map by exactly one cell
        let config = FeatureExtractorConfig {
            padding: PadMode::Periodic,
            ..FeatureExtractorConfig::default()
        };
        let params = init_params(&config).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = rand_image(&mut rng, 32, 32);
        let total = config.total_stride();

        // circular shift of the image by `total` pixels down and right
        let (h, w) = (32usize, 32usize);
        let mut shifted = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    let v = img.at3(c, r, col);
                    shifted.set3(c, (r + total) % h, (col + total) % w, v);
                }
            }
        }
        let maps = extract_features(&params, &[img, shifted]).unwrap();
        let (d0, d1) = (&maps[0].deep, &maps[1].deep);
        let (dch, dh, dw) = (d0.shape()[0], d0.shape()[1], d0.shape()[2]);
        let mut max_dev = 0.0f64;
        for c in 0..dch {
            for r in 0..dh {
                for col in 0..dw {
                    let expect = d0.at3(c, r, col);
                    let got = d1.at3(c, (r + 1) % dh, (col + 1) % dw);
                    max_dev = max_dev.max((expect - got).abs());
                }
            }
        }
        assert!(max_dev < 1e-5, "covariance deviation {max_dev}");
    }
}
