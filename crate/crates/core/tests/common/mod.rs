#![allow(dead_code)]

use foldctc::encoder::EncoderConfig;
use foldctc::model::{ModelConfig, Variant};
use foldctc::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy dimensions shared by the gradient and sharing checks: D=8,
/// d_model=8, d_ff=16, 2 heads, kernel 3, |V|=3, N_b=1, N_f=1, 2 repeats.
pub fn toy(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        n_layers: 3,
        n_base: 1,
        n_folded: 1,
        n_repeat_train: 2,
        inter_layers: vec![1, 2],
        inter_weight: 0.5,
        encoder: EncoderConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            conv_kernel: 3,
            dropout: 0.0,
        },
        vocab_size: 4,
        feat_dim: 8,
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Paper-scale configuration for parameter counting.
pub fn paper(variant: Variant, n_base: usize, n_folded: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_base,
        n_folded,
        ..ModelConfig::default()
    }
}
