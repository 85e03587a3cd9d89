#![allow(dead_code)]

use mmr_core::{Corpus, ExpertConfig, Model, ModelConfig, Tensor};

pub const AESOP: &str = include_str!("../data/aesop.txt");

const SENTENCES: [&str; 10] = [
    "The cat sat on the warm mat.",
    "A little rabbit ran into the garden.",
    "The sun was bright and the sky was blue.",
    "Tom found a red ball under the tree.",
    "The bird sang a happy song in the morning.",
    "Lily baked a cake for her mother.",
    "The dog barked at the big truck.",
    "They played in the park until dark.",
    "An old owl lived in the tall oak tree.",
    "The boat floated down the quiet river.",
];

/// Ten short sentences repeated until the text is about 15 kB.
pub fn repeated_sentences() -> String {
    SENTENCES.join(" ").repeat(40)
}

pub fn byte_corpus(text: &str, val_fraction: f64) -> Corpus {
    Corpus::split(text.bytes().map(usize::from).collect(), val_fraction)
}

/// Two-layer latent-attention MoE model small enough to finite-difference.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 17,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        latent_dim: 16,
        experts: ExpertConfig { n_experts: 4, n_shared: 1, top_k: 2, expert_hidden: None },
        dropout: 0.0,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares backprop against central differences for every parameter entry,
/// with the routing selection frozen to that of the unperturbed input.
pub fn gradient_check(model: &Model<f64>, tokens: &[usize], targets: &[usize], eps: f64) -> Vec<TensorCheck> {
    let frozen = model.forward_with(tokens, None, None).unwrap().frozen_routes();
    let loss = || -> Tensor<f64> {
        model
            .forward_with(tokens, None, Some(&frozen))
            .unwrap()
            .logits
            .cross_entropy(targets)
            .unwrap()
    };
    model.zero_grad();
    loss().backward().unwrap();
    model
        .named_parameters()
        .into_iter()
        .map(|(name, p)| {
            let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let numeric: Vec<f64> = (0..p.numel())
                .map(|i| {
                    let orig = p.at(i);
                    p.update_data(|d| d[i] = orig + eps);
                    let up = loss().item();
                    p.update_data(|d| d[i] = orig - eps);
                    let down = loss().item();
                    p.update_data(|d| d[i] = orig);
                    (up - down) / (2.0 * eps)
                })
                .collect();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let scale = norm(&analytic).max(norm(&numeric));
            TensorCheck {
                name,
                rel_err: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
                grad_norm: norm(&analytic),
            }
        })
        .collect()
}
