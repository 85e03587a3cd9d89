mod common;

use mmr_core::moe::{ExpertWeights, RouterState};
use mmr_core::{moe_forward, route, BalanceStrategy, ExpertConfig, Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let model = Model::<f64>::new(common::gradcheck_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(0..17)).collect();
    let targets: Vec<usize> = (0..8).map(|_| rng.gen_range(0..17)).collect();
    let checks = common::gradient_check(&model, &tokens, &targets, 1e-5);
    assert_eq!(checks.len(), model.named_parameters().len());
    for c in &checks {
        assert!(c.grad_norm > 0.0, "{} has no gradient", c.name);
        assert!(c.rel_err < 1e-3, "{}: rel err {:.2e}", c.name, c.rel_err);
    }
}

#[test]
fn initial_loss_is_near_log_vocab_across_seeds() {
    let text = common::AESOP.as_bytes();
    for seed in 0..10 {
        let model = Model::<f32>::new(ModelConfig { seed, ..ModelConfig::toy() }).unwrap();
        let start = seed as usize * 300;
        let window: Vec<usize> = text[start..start + 65].iter().map(|&b| b as usize).collect();
        let (loss, _) = model.loss(&window[..64], &window[1..]).unwrap();
        let rel = (loss.item() as f64 - 256f64.ln()).abs() / 256f64.ln();
        assert!(rel < 0.05, "seed {seed}: loss {} ({rel:.3})", loss.item());
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let m = Model::<f32>::new(ModelConfig { seed: 4, ..ModelConfig::toy() }).unwrap();
        m.forward(&[10, 20, 30, 40, 50]).unwrap().to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Dense oracle: every routed expert is evaluated on every token and the
/// outputs are combined with the selected gates.
fn dense_gather_oracle(x: &Tensor<f64>, w: &ExpertWeights<f64>, indices: &[usize], gates: &[f64], k: usize) -> Vec<f64> {
    let (n, d) = x.dims2().unwrap();
    let routed: Vec<Vec<f64>> = w.routed().iter().map(|e| e.forward(x).unwrap().to_vec()).collect();
    let mut out: Vec<f64> = vec![0.0; n * d];
    for e in w.shared() {
        out.iter_mut().zip(e.forward(x).unwrap().to_vec()).for_each(|(o, v)| *o += v);
    }
    for i in 0..n {
        for s in 0..k {
            let e = indices[i * k + s];
            for j in 0..d {
                out[i * d + j] += gates[i * k + s] * routed[e][i * d + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn moe_matches_dense_gather(
        n_experts in 2usize..=16,
        shared_frac in 0.0f64..0.5,
        k_frac in 0.0f64..1.0,
        n in 1usize..=32,
        seed in 0u64..1000,
    ) {
        let n_shared = ((n_experts as f64 * shared_frac) as usize).min(n_experts - 1);
        let routed = n_experts - n_shared;
        let k = 1 + ((routed - 1) as f64 * k_frac) as usize;
        let cfg = ExpertConfig { n_experts, n_shared, top_k: k, expert_hidden: Some(8) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ExpertWeights::<f64>::init(8, 8, &cfg, &mut rng, 0.3, 0.3);
        let x = Tensor::<f64>::randn_param(&[n, 8], 1.0, &mut rng).detach();
        let mut state = RouterState::new(routed, BalanceStrategy::None, 0.0, 0.0);
        state.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let decision = route(&x, &state, &w, k, None).unwrap();
        let got = moe_forward(&x, &w, &decision).unwrap().to_vec();
        let want = dense_gather_oracle(&x, &w, &decision.indices, &decision.gates.to_vec(), k);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
