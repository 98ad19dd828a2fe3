#![allow(dead_code)]

use mlim_core::config::ModelConfig;
use mlim_core::data::{generate_scene, sample_corpus, ImageTensor, TokenId};
use mlim_core::rng::{stream, Rng, Stream};
use mlim_core::tensor::Matrix;
use mlim_core::{Mlim, ParamStore};
use rand::Rng as _;

/// Full 64×64 input and the 8×8 grid at a narrow width.
pub fn narrow() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
        embedder_channels: vec![4, 4],
        decoder_channels: vec![4, 4],
        ..ModelConfig::default()
    }
}

pub fn model(cfg: ModelConfig, seed: u64) -> (Mlim, ParamStore) {
    let m = Mlim::new(cfg).unwrap();
    let p = m.init_params(&mut stream(seed, Stream::Init));
    (m, p)
}

pub fn rng(seed: u64) -> Rng {
    stream(seed, Stream::Probe)
}

pub fn noise_image(side: usize, r: &mut Rng) -> ImageTensor {
    ImageTensor::new(side, side, (0..side * side * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

pub fn scene(seed: u64) -> (ImageTensor, Vec<TokenId>) {
    let it = sample_corpus(1, seed, 64).unwrap().remove(0);
    (generate_scene(&it.spec, 64).unwrap(), it.tokens)
}
