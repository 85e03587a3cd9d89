//! Fixtures shared by the benchmarks in `benches/`.

use mmr_core::{AttentionKind, Corpus, ExpertConfig, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TEXT: &str = include_str!("../../core/tests/data/aesop.txt");

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A constant `[rows × cols]` tensor of standard normal draws.
pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let t = Tensor::randn_param(&[rows, cols], 1.0, &mut r);
    Tensor::new(t.to_vec(), &[rows, cols]).unwrap()
}

/// The toy byte-level model with the given attention kind and expert layout.
pub fn config(attention: AttentionKind, n_experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        attention,
        experts: ExpertConfig { n_experts, n_shared: 1, top_k, expert_hidden: None },
        ..ModelConfig::toy()
    }
}

pub fn corpus() -> Corpus {
    Corpus::split(TEXT.bytes().map(usize::from).collect(), 0.1)
}
