//! The two desk-scale architectures.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{LayerSpec, ModelGraph};

const BN_EPS: f32 = 1e-5;

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)), seeded.
fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n: usize = shape.iter().product();
    let elems: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), elems).unwrap()
}

fn conv_layer(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> LayerSpec {
    let fan_in = cin * k * k;
    let fan_out = cout * k * k;
    LayerSpec::Conv {
        kernel: init_tensor(rng, &[cout, cin, k, k], fan_in, fan_out),
        bias: Tensor::zeros(&[cout]),
        stride,
        padding,
    }
}

fn batchnorm_layer(channels: usize) -> LayerSpec {
    LayerSpec::BatchNorm {
        gamma: Tensor::filled(&[channels], 1.0),
        beta: Tensor::zeros(&[channels]),
        mean: Tensor::zeros(&[channels]),
        var: Tensor::filled(&[channels], 1.0),
        eps: BN_EPS,
    }
}

fn classifier_layer(rng: &mut ChaCha8Rng, features: usize, classes: usize) -> LayerSpec {
    LayerSpec::Classifier {
        weight: init_tensor(rng, &[classes, features], features, classes),
        bias: Tensor::zeros(&[classes]),
    }
}

/// Conv stage widths for a given multiplier: base 16/32/64/64, rounded up.
pub fn convnet_widths(width_multiplier: f32) -> [usize; 4] {
    [16.0, 32.0, 64.0, 64.0].map(|base| ((base * width_multiplier).ceil() as usize).max(1))
}

/// Four conv+BN+relu stages with stride-2 downsampling after the first,
/// global average pooling, and a dense classifier.
pub fn build_mini_convnet(
    width_multiplier: f32,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if width_multiplier <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    let widths = convnet_widths(width_multiplier);
    let strides = [1usize, 2, 2, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cin = input_shape.0;
    for (width, stride) in widths.into_iter().zip(strides) {
        layers.push(conv_layer(&mut rng, cin, width, 3, stride, 1));
        layers.push(batchnorm_layer(width));
        layers.push(LayerSpec::Relu);
        cin = width;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(classifier_layer(&mut rng, cin, num_classes));
    ModelGraph::new(
        format!("mini_convnet_x{width_multiplier}"),
        layers,
        input_shape,
        num_classes,
    )
}

/// Stem conv followed by `blocks` identity-skip residual blocks (two conv+BN
/// each), global average pooling, and a classifier. Constant width keeps
/// every skip an identity mapping.
pub fn build_mini_resnet(
    blocks: usize,
    width: usize,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("resnet needs at least one block".into()));
    }
    if width == 0 {
        return Err(Error::InvalidArgument("resnet width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    layers.push(conv_layer(&mut rng, input_shape.0, width, 3, 1, 1));
    layers.push(batchnorm_layer(width));
    layers.push(LayerSpec::Relu);
    for _ in 0..blocks {
        layers.push(LayerSpec::ResidualBegin);
        layers.push(conv_layer(&mut rng, width, width, 3, 1, 1));
        layers.push(batchnorm_layer(width));
        layers.push(LayerSpec::Relu);
        layers.push(conv_layer(&mut rng, width, width, 3, 1, 1));
        layers.push(batchnorm_layer(width));
        layers.push(LayerSpec::ResidualEnd);
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(classifier_layer(&mut rng, width, num_classes));
    ModelGraph::new(
        format!("mini_resnet_b{blocks}_w{width}"),
        layers,
        input_shape,
        num_classes,
    )
}
