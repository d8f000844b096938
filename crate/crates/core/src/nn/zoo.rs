//! Desk-scale architectures for 1×28×28 inputs.

use super::{LayerSpec, NetworkSpec};

pub const DIGIT_SHAPE: [usize; 3] = [1, 28, 28];
pub const DIGIT_CLASSES: usize = 10;

/// MLP 784→256→64(z)→10.
pub fn mlp_classifier(seed: u64) -> NetworkSpec {
    NetworkSpec {
        name: "mlp".into(),
        input_shape: DIGIT_SHAPE.to_vec(),
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::dense(784, 256),
            LayerSpec::Relu,
            LayerSpec::dense(256, 64),
            LayerSpec::Relu,
            LayerSpec::dense(64, DIGIT_CLASSES),
        ],
        encoder_cut: 5,
        taps: vec![2, 4],
        seed,
    }
}

/// Two conv+norm+pool blocks, a 128-wide penultimate layer and a linear head.
///
/// `z` is the penultimate pre-activation; the head is ReLU then a linear
/// map. Instance norm after each convolution makes the features invariant
/// to per-channel affine intensity changes.
pub fn desk_cnn(seed: u64) -> NetworkSpec {
    NetworkSpec {
        name: "cnn".into(),
        input_shape: DIGIT_SHAPE.to_vec(),
        layers: vec![
            LayerSpec::conv(1, 8, 3, 1),
            LayerSpec::InstanceNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { window: 2 },
            LayerSpec::conv(8, 16, 3, 1),
            LayerSpec::InstanceNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(784, 128),
            LayerSpec::Relu,
            LayerSpec::dense(128, DIGIT_CLASSES),
        ],
        encoder_cut: 10,
        taps: vec![2, 6, 10],
        seed,
    }
}

/// Bias-free linear encoder `z = W x` with `W` of shape 16×256.
pub fn linear_encoder(seed: u64) -> NetworkSpec {
    NetworkSpec {
        name: "linear".into(),
        input_shape: vec![256],
        layers: vec![LayerSpec::Dense {
            inputs: 256,
            outputs: 16,
            bias: false,
        }],
        encoder_cut: 1,
        taps: vec![],
        seed,
    }
}

/// Encoder 784→128→`latent` and the mirrored decoder back to 1×28×28.
pub fn autoencoder(latent: usize, seed: u64) -> (NetworkSpec, NetworkSpec) {
    let encoder = NetworkSpec {
        name: format!("ae-encoder-{latent}"),
        input_shape: DIGIT_SHAPE.to_vec(),
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::dense(784, 128),
            LayerSpec::Relu,
            LayerSpec::dense(128, latent),
        ],
        encoder_cut: 4,
        taps: vec![],
        seed,
    };
    let decoder = NetworkSpec {
        name: format!("ae-decoder-{latent}"),
        input_shape: vec![latent],
        layers: vec![
            LayerSpec::dense(latent, 128),
            LayerSpec::Relu,
            LayerSpec::dense(128, 784),
            LayerSpec::Reshape {
                shape: DIGIT_SHAPE.to_vec(),
            },
        ],
        encoder_cut: 4,
        taps: vec![],
        seed: seed.wrapping_add(1),
    };
    (encoder, decoder)
}

/// Every encoder configuration the harness ships.
pub fn shipped_specs() -> Vec<NetworkSpec> {
    vec![
        mlp_classifier(0),
        desk_cnn(0),
        linear_encoder(0),
        autoencoder(8, 0).0,
        autoencoder(16, 0).0,
    ]
}

/// Resolves a model config id used by the CLI and experiment configs.
pub fn by_id(id: &str, seed: u64) -> Option<NetworkSpec> {
    match id {
        "mlp" => Some(mlp_classifier(seed)),
        "cnn" => Some(desk_cnn(seed)),
        "linear" => Some(linear_encoder(seed)),
        _ => None,
    }
}
