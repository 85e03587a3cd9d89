//! Closed-form compute and memory models, reconciled against the FLOP counter
//! and the live KV cache.
//!
//! Two unit conventions appear here. [`flops_mha`] and [`flops_mla`] in
//! [`MlaCost::AsStated`] mode count multiply-accumulates, which is how the
//! textbook per-layer costs are written. Everything suffixed `_counted`, and
//! [`MlaCost::AsImplemented`], counts 2 FLOPs per multiply-accumulate, which is
//! what [`crate::flops`] records.

use std::collections::BTreeMap;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::attention::cache_bytes;
use crate::config::{AttentionKind, FfnKind, ModelConfig};
use crate::error::Result;
use crate::model::Model;
use crate::moe::{self, routing_combinations};
use crate::tensor::{flops, no_grad, Float};

/// `4nd² + 2n²d`: one full-attention layer in multiply-accumulates.
pub fn flops_mha(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

/// One full-attention layer as executed: Q, K, V and output projections plus
/// scores and weighted values, 2 FLOPs per multiply-accumulate.
pub fn flops_mha_counted(n: u64, d: u64) -> u64 {
    2 * flops_mha(n, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlaCost {
    /// `2nd²(1 + ρ) + 2n²dρ` with `ρ = r/d`, in multiply-accumulates. Its
    /// attention term assumes scores are taken in the latent space.
    AsStated,
    /// Counted FLOPs of compress, reconstruct per head, then attend at full
    /// width: `4nd² + 4ndr + 4nrd + 4n²d`.
    AsImplemented,
}

pub fn flops_mla(n: u64, d: u64, r: u64, mode: MlaCost) -> u64 {
    match mode {
        MlaCost::AsStated => 2 * n * d * d + 2 * n * d * r + 2 * n * n * r,
        MlaCost::AsImplemented => 4 * n * d * d + 4 * n * d * r + 4 * n * r * d + 4 * n * n * d,
    }
}

/// Counted FLOPs of one attention layer of the given kind over `n` positions.
pub fn attention_flops_counted(kind: AttentionKind, n: u64, d: u64, r: u64) -> u64 {
    match kind {
        AttentionKind::Mha => flops_mha_counted(n, d),
        AttentionKind::Mla => flops_mla(n, d, r, MlaCost::AsImplemented),
    }
}

/// Per-token counted FLOPs of a mixture-of-experts layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeCost {
    /// Router projection, `2·d·N_r`.
    pub routing: u64,
    /// `k` routed experts, two `d×h` matmuls each.
    pub active_experts: u64,
    /// `N_s` shared experts.
    pub shared_experts: u64,
}

impl MoeCost {
    pub fn total(&self) -> u64 {
        self.routing + self.active_experts + self.shared_experts
    }
}

pub fn cost_moe(d: u64, hidden: u64, n_experts: u64, n_shared: u64, k: u64) -> MoeCost {
    let per_expert = 4 * d * hidden;
    MoeCost {
        routing: 2 * d * n_experts.saturating_sub(n_shared),
        active_experts: k * per_expert,
        shared_experts: n_shared * per_expert,
    }
}

/// Counted FLOPs of a dense feed-forward layer over `n` positions.
pub fn dense_ffn_flops(n: u64, d: u64, hidden: u64) -> u64 {
    4 * n * d * hidden
}

/// `(1/ρ) · N / (k + N_s)`.
pub fn speedup_asymptotic(rho: f64, n_experts: u64, n_shared: u64, k: u64) -> f64 {
    (1.0 / rho) * n_experts as f64 / (k + n_shared) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KvVariant {
    /// A separate `r`-wide latent per head: `2nLHr` elements.
    PerHead,
    /// One latent shared by all heads: `2nLr` elements (what the cache stores).
    Shared,
}

/// KV-cache bytes for `n` cached positions (fold batch into `n`).
pub fn kv_cache_model(n: u64, layers: u64, heads: u64, r: u64, bytes: u64, variant: KvVariant) -> u64 {
    match variant {
        KvVariant::PerHead => 2 * n * layers * heads * r * bytes,
        KvVariant::Shared => 2 * n * layers * r * bytes,
    }
}

/// Full-attention cache, `2nLHd_k` elements.
pub fn kv_cache_baseline(n: u64, layers: u64, heads: u64, head_dim: u64, bytes: u64) -> u64 {
    2 * n * layers * heads * head_dim * bytes
}

/// `1 − r/d`: fraction of baseline cache memory saved by a shared latent.
pub fn reduction_factor(r: u64, d: u64) -> f64 {
    1.0 - r as f64 / d as f64
}

/// Counted FLOPs of one forward pass of `config` over `n` positions.
pub fn forward_flops(config: &ModelConfig, n: u64) -> u64 {
    let d = config.d_model as u64;
    let layer = attention_flops_counted(config.attention, n, d, config.latent_dim as u64) + ffn_flops(config, n);
    config.n_layers as u64 * layer + 2 * n * d * config.vocab_size as u64
}

fn ffn_flops(config: &ModelConfig, n: u64) -> u64 {
    let d = config.d_model as u64;
    match config.ffn {
        FfnKind::Dense => dense_ffn_flops(n, d, config.ffn_hidden() as u64),
        FfnKind::Moe => n * moe_cost(config).total(),
    }
}

fn moe_cost(config: &ModelConfig) -> MoeCost {
    let e = &config.experts;
    cost_moe(
        config.d_model as u64,
        config.expert_hidden() as u64,
        e.n_experts as u64,
        e.n_shared as u64,
        e.top_k as u64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub n: u64,
    pub batch: u64,
    pub d: u64,
    pub r: u64,
    pub rho: f64,
    pub n_experts: u64,
    pub n_shared: u64,
    pub top_k: u64,
    pub layers: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub vocab: u64,
    pub attention: AttentionKind,
    pub ffn: FfnKind,
    pub accounting_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analytic {
    /// Per layer, multiply-accumulates.
    pub c_mha: u64,
    /// Per layer, multiply-accumulates.
    pub c_mla_as_stated: u64,
    /// Per layer, counted FLOPs.
    pub c_mla_as_implemented: u64,
    /// Per layer, counted FLOPs.
    pub c_mha_as_implemented: u64,
    /// Per token, counted FLOPs.
    pub c_moe: MoeCost,
    /// One layer of this config over `n` positions (attention + FFN), counted FLOPs.
    pub c_combined: u64,
    /// Whole forward pass over `n` positions, counted FLOPs.
    pub flops_forward: u64,
    pub speedup_asymptotic: f64,
    /// Full-attention cache for `n · batch` positions.
    pub kv_bytes_baseline: u64,
    pub kv_bytes_theorem: u64,
    pub kv_bytes_shared: u64,
    /// Cache of this config's attention kind.
    pub kv_bytes_model: u64,
    pub reduction_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    /// One sequence of `n` positions, in the compute width.
    pub flops_forward: u64,
    pub flops_expected: u64,
    pub kv_bytes_live: u64,
    pub kv_bytes_expected: u64,
    pub compute_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deltas {
    pub flops: i64,
    pub kv_bytes: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub inputs: ReportInputs,
    pub analytic: Analytic,
    pub measured: Option<Measured>,
    pub deltas: Option<Deltas>,
}

/// Analytic costs for `config` at `n` positions and `batch` sequences.
pub fn complexity_report(config: &ModelConfig, n: u64, batch: u64) -> Result<ComplexityReport> {
    config.validate()?;
    let d = config.d_model as u64;
    let r = match config.attention {
        AttentionKind::Mha => d,
        AttentionKind::Mla => config.latent_dim as u64,
    };
    let (layers, heads, head_dim) = (config.n_layers as u64, config.n_heads as u64, config.head_dim() as u64);
    let bytes = config.precision.accounting_bytes as u64;
    let e = &config.experts;
    let tokens = n * batch;
    let kv_bytes_baseline = kv_cache_baseline(tokens, layers, heads, head_dim, bytes);
    let kv_bytes_shared = kv_cache_model(tokens, layers, heads, r, bytes, KvVariant::Shared);
    let inputs = ReportInputs {
        n,
        batch,
        d,
        r,
        rho: r as f64 / d as f64,
        n_experts: e.n_experts as u64,
        n_shared: e.n_shared as u64,
        top_k: e.top_k as u64,
        layers,
        heads,
        head_dim,
        vocab: config.vocab_size as u64,
        attention: config.attention,
        ffn: config.ffn,
        accounting_bytes: bytes,
    };
    let analytic = Analytic {
        c_mha: flops_mha(n, d),
        c_mla_as_stated: flops_mla(n, d, r, MlaCost::AsStated),
        c_mla_as_implemented: flops_mla(n, d, r, MlaCost::AsImplemented),
        c_mha_as_implemented: flops_mha_counted(n, d),
        c_moe: moe_cost(config),
        c_combined: attention_flops_counted(config.attention, n, d, r) + ffn_flops(config, n),
        flops_forward: forward_flops(config, n),
        speedup_asymptotic: speedup_asymptotic(
            r as f64 / d as f64,
            e.n_experts as u64,
            e.n_shared as u64,
            e.top_k as u64,
        ),
        kv_bytes_baseline,
        kv_bytes_theorem: kv_cache_model(tokens, layers, heads, r, bytes, KvVariant::PerHead),
        kv_bytes_shared,
        kv_bytes_model: match config.attention {
            AttentionKind::Mha => kv_bytes_baseline,
            AttentionKind::Mla => kv_bytes_shared,
        },
        reduction_factor: match config.attention {
            AttentionKind::Mha => 0.0,
            AttentionKind::Mla => reduction_factor(r, d),
        },
    };
    Ok(ComplexityReport {
        inputs,
        analytic,
        measured: None,
        deltas: None,
    })
}

/// Prefills a fresh cache with `n` tokens on a freshly initialised model and
/// compares counted FLOPs and live cache bytes with the closed forms.
pub fn measure<T: Float>(config: &ModelConfig, n: usize) -> Result<Measured> {
    let model = Model::<T>::new(config.clone())?;
    let tokens: Vec<usize> = (0..n).map(|i| (i * 31 + 7) % config.vocab_size).collect();
    let mut cache = model.new_cache();
    let (out, counted) = no_grad(|| flops::measure(|| model.forward_with(&tokens, Some(&mut cache), None)));
    out?;
    Ok(Measured {
        flops_forward: counted,
        flops_expected: forward_flops(config, n as u64),
        kv_bytes_live: cache.live_bytes() as u64,
        kv_bytes_expected: cache_bytes(
            config.attention,
            n,
            config.n_layers,
            config.n_heads,
            config.head_dim(),
            config.latent_dim,
            T::BYTES,
        ),
        compute_bytes: T::BYTES as u64,
    })
}

impl ComplexityReport {
    pub fn with_measurement(mut self, m: Measured) -> Self {
        self.deltas = Some(Deltas {
            flops: m.flops_forward as i64 - m.flops_expected as i64,
            kv_bytes: m.kv_bytes_live as i64 - m.kv_bytes_expected as i64,
        });
        self.measured = Some(m);
        self
    }
}

/// Routing statistics of one expert layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRouteStats {
    pub layer: usize,
    /// Token-slots per routed expert; sums to `tokens · k`.
    pub histogram: Vec<u64>,
    pub loads: Vec<f64>,
    pub cv: f64,
    /// Shannon entropy (bits) of the selected expert sets.
    pub combination_entropy_bits: f64,
    pub distinct_combinations: usize,
    /// `log2 C(N_r, k)`, the entropy of uniformly random sets.
    pub max_entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub tokens: u64,
    pub top_k: usize,
    pub layers: Vec<LayerRouteStats>,
}

/// Routes `tokens` (in windows of at most `window` positions) without
/// updating any router state.
pub fn route_stats<T: Float>(model: &Model<T>, tokens: &[usize], window: usize) -> Result<RouteStats> {
    let k = model.config().experts.top_k;
    let n_layers = model.routers().len();
    let n_routed = model.config().experts.n_routed();
    let mut hist = vec![vec![0u64; n_routed]; n_layers];
    let mut combos: Vec<BTreeMap<Vec<usize>, u64>> = vec![BTreeMap::new(); n_layers];
    let window = window.clamp(1, model.config().max_seq_len);
    for chunk in tokens.chunks(window) {
        let out = no_grad(|| model.forward_with(chunk, None, None))?;
        for (layer, decision) in out.routes.iter().enumerate() {
            hist[layer].iter_mut().zip(decision.counts()).for_each(|(h, c)| *h += c);
            for set in decision.indices.chunks(k) {
                let mut key = set.to_vec();
                key.sort_unstable();
                *combos[layer].entry(key).or_insert(0) += 1;
            }
        }
    }
    let max_entropy_bits = log2_big(&routing_combinations(n_routed as u64, k as u64));
    let layers = hist
        .into_iter()
        .zip(combos)
        .enumerate()
        .map(|(layer, (histogram, sets))| {
            let loads = moe::fractions(&histogram);
            let total: u64 = sets.values().sum();
            let entropy = sets
                .values()
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.log2()
                })
                .sum::<f64>();
            LayerRouteStats {
                layer,
                cv: moe::load_cv(&loads).unwrap_or(f64::NAN),
                loads,
                histogram,
                combination_entropy_bits: entropy,
                distinct_combinations: sets.len(),
                max_entropy_bits,
            }
        })
        .collect();
    Ok(RouteStats {
        tokens: tokens.len() as u64,
        top_k: k,
        layers,
    })
}

fn log2_big(v: &num_bigint::BigUint) -> f64 {
    let bits = v.bits();
    if bits <= 1000 {
        v.to_f64().map_or(f64::INFINITY, f64::log2)
    } else {
        let shift = bits - 64;
        (v >> shift).to_f64().map_or(f64::INFINITY, f64::log2) + shift as f64
    }
}
