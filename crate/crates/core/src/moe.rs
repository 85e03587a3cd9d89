//! Fine-grained mixture of experts with shared-expert isolation.
//!
//! Each token passes through every shared expert with weight 1 and through the
//! `k` routed experts with the highest router probability, weighted by those
//! probabilities renormalised over the selected set. Router logits carry a
//! non-learned per-expert bias that a balancer nudges after every step so that
//! routed load evens out without adding anything to the loss.

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExpertConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How routed load is kept balanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceStrategy {
    None,
    /// `b_i -= γ (f_i - 1/N_r)`.
    #[default]
    BiasDiff,
    /// `b_i -= γ (f_i / f̄ - 1)`.
    BiasRatio,
    /// Switch-style auxiliary loss `α · N_r · Σ f_i P̄_i`; the bias stays fixed.
    AuxLoss,
}

pub const DEFAULT_GAMMA: f64 = 1e-3;
pub const DEFAULT_ALPHA: f64 = 1e-2;

/// Per-layer balancing state. Never part of the differentiation graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub bias: Vec<f64>,
    /// Load fractions of the most recent step.
    pub loads: Vec<f64>,
    /// Token-slots routed to each expert since creation.
    pub totals: Vec<u64>,
    pub strategy: BalanceStrategy,
    pub gamma: f64,
    pub alpha: f64,
}

impl RouterState {
    pub fn new(n_routed: usize, strategy: BalanceStrategy, gamma: f64, alpha: f64) -> Self {
        Self {
            bias: vec![0.0; n_routed],
            loads: vec![0.0; n_routed],
            totals: vec![0; n_routed],
            strategy,
            gamma,
            alpha,
        }
    }

    pub fn n_routed(&self) -> usize {
        self.bias.len()
    }

    /// Load fractions accumulated over the state's lifetime.
    pub fn cumulative_loads(&self) -> Vec<f64> {
        fractions(&self.totals)
    }
}

/// One expert: `gelu(x·W_in)·W_out`.
pub struct Expert<T: Float> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Float> Expert<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R, std: f64, out_std: f64) -> Self {
        Self {
            w_in: Tensor::randn_param(&[d, hidden], std, rng),
            w_out: Tensor::randn_param(&[hidden, d], out_std, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w_in)?.gelu().matmul(&self.w_out)
    }
}

pub struct ExpertWeights<T: Float> {
    /// `n_shared` shared experts first, then the routed ones.
    pub experts: Vec<Expert<T>>,
    /// `[d × N_r]` router projection.
    pub router: Tensor<T>,
    pub n_shared: usize,
}

impl<T: Float> ExpertWeights<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, cfg: &ExpertConfig, rng: &mut R, std: f64, out_std: f64) -> Self {
        let experts = (0..cfg.n_experts)
            .map(|_| Expert::init(d, hidden, rng, std, out_std))
            .collect();
        Self {
            experts,
            router: Tensor::randn_param(&[d, cfg.n_routed()], std, rng),
            n_shared: cfg.n_shared,
        }
    }

    pub fn shared(&self) -> &[Expert<T>] {
        &self.experts[..self.n_shared]
    }

    pub fn routed(&self) -> &[Expert<T>] {
        &self.experts[self.n_shared..]
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("router".to_string(), self.router.clone())];
        for (e, ex) in self.experts.iter().enumerate() {
            out.push((format!("experts.{e}.w_in"), ex.w_in.clone()));
            out.push((format!("experts.{e}.w_out"), ex.w_out.clone()));
        }
        out
    }
}

/// Router output for `n` tokens.
pub struct RoutingDecision<T: Float> {
    pub top_k: usize,
    /// Row-major `[n × k]` expert indices (into the routed experts), best first.
    pub indices: Vec<usize>,
    /// `[n × k]` renormalised gate values, differentiable through the router.
    pub gates: Tensor<T>,
    /// `[n × N_r]` router probabilities.
    pub probs: Tensor<T>,
}

impl<T: Float> RoutingDecision<T> {
    pub fn n_tokens(&self) -> usize {
        self.indices.len() / self.top_k
    }

    pub fn n_routed(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Token-slots assigned to each routed expert.
    pub fn counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_routed()];
        for &e in &self.indices {
            counts[e] += 1;
        }
        counts
    }

    /// Fractions of token-slots per expert; sums to 1.
    pub fn loads(&self) -> Vec<f64> {
        fractions(&self.counts())
    }
}

/// Normalises counts to fractions; all zeros when nothing was counted.
pub fn fractions(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Indices of the `k` largest entries, best first; ties go to the lower index.
pub fn top_k<T: Float>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Routes from precomputed (unbiased) logits `[n × N_r]`.
///
/// The bias is added as a constant, so the router projection receives gradient
/// through the gates but the bias never does. `frozen` replaces the top-k
/// selection with a given one (used when finite-differencing through routing).
pub fn route_logits<T: Float>(
    logits: &Tensor<T>,
    state: &RouterState,
    k: usize,
    frozen: Option<&[usize]>,
) -> Result<RoutingDecision<T>> {
    let (n, n_routed) = logits.dims2()?;
    if k == 0 || k > n_routed {
        return Err(Error::Config(format!("top_k {k} not in 1..={n_routed}")));
    }
    if state.n_routed() != n_routed {
        return Err(Error::Shape {
            op: "route",
            lhs: vec![n, n_routed],
            rhs: vec![state.n_routed()],
        });
    }
    let bias = Tensor::new(state.bias.iter().map(|&b| T::lit(b)).collect(), &[n_routed])?;
    let probs = logits.add_row(&bias)?.softmax(1)?;
    let indices = match frozen {
        Some(f) => {
            if f.len() != n * k || f.iter().any(|&e| e >= n_routed) {
                return Err(Error::Contract("frozen routing does not match this batch".into()));
            }
            f.to_vec()
        }
        None => {
            let p = probs.data();
            (0..n)
                .flat_map(|i| top_k(&p[i * n_routed..(i + 1) * n_routed], k))
                .collect()
        }
    };
    let flat: Vec<usize> = indices
        .iter()
        .enumerate()
        .map(|(slot, &e)| (slot / k) * n_routed + e)
        .collect();
    let gates = probs.gather(&flat)?.reshape(&[n, k])?.normalize_rows()?;
    Ok(RoutingDecision {
        top_k: k,
        indices,
        gates,
        probs,
    })
}

/// `ℓ = x·W_g + b`, `probs = softmax(ℓ)`, top-k, renormalised gates.
pub fn route<T: Float>(
    x: &Tensor<T>,
    state: &RouterState,
    weights: &ExpertWeights<T>,
    k: usize,
    frozen: Option<&[usize]>,
) -> Result<RoutingDecision<T>> {
    route_logits(&x.matmul(&weights.router)?, state, k, frozen)
}

/// Shared experts plus gate-weighted routed experts.
pub fn moe_forward<T: Float>(x: &Tensor<T>, weights: &ExpertWeights<T>, decision: &RoutingDecision<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let k = decision.top_k;
    if decision.n_tokens() != n {
        return Err(Error::Contract(format!(
            "routing decision covers {} tokens, input has {n}",
            decision.n_tokens()
        )));
    }

    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); weights.routed().len()];
    for (slot, &e) in decision.indices.iter().enumerate() {
        slots[e].push(slot);
    }
    let mut parts = Vec::new();
    for (expert, slots) in weights.routed().iter().zip(&slots) {
        if slots.is_empty() {
            continue;
        }
        let rows: Vec<usize> = slots.iter().map(|s| s / k).collect();
        let gate = decision.gates.gather(slots)?;
        let y = expert.forward(&x.index_rows(&rows)?)?.mul_col(&gate)?;
        parts.push((y, rows));
    }
    let mut out = Tensor::scatter_rows(n, d, parts)?;
    for expert in weights.shared() {
        out = out.add(&expert.forward(x)?)?;
    }
    Ok(out)
}

/// Applies the strategy's bias update for one step's loads.
pub fn balancer_update(state: &mut RouterState, loads: &[f64]) -> Result<()> {
    if loads.len() != state.n_routed() {
        return Err(Error::Shape {
            op: "balancer_update",
            lhs: vec![state.n_routed()],
            rhs: vec![loads.len()],
        });
    }
    let target = 1.0 / loads.len() as f64;
    match state.strategy {
        BalanceStrategy::BiasDiff => {
            for (b, &f) in state.bias.iter_mut().zip(loads) {
                *b -= state.gamma * (f - target);
            }
        }
        BalanceStrategy::BiasRatio => {
            for (b, &f) in state.bias.iter_mut().zip(loads) {
                *b -= state.gamma * (f / target - 1.0);
            }
        }
        BalanceStrategy::None | BalanceStrategy::AuxLoss => {}
    }
    state.loads = loads.to_vec();
    Ok(())
}

/// Records a decision's counts, then updates the bias.
pub fn observe<T: Float>(state: &mut RouterState, decision: &RoutingDecision<T>) -> Result<()> {
    observe_counts(state, &decision.counts())
}

/// Records per-expert slot counts of one step (possibly merged over a batch),
/// then updates the bias.
pub fn observe_counts(state: &mut RouterState, counts: &[u64]) -> Result<()> {
    if counts.len() != state.n_routed() {
        return Err(Error::Shape {
            op: "observe",
            lhs: vec![state.n_routed()],
            rhs: vec![counts.len()],
        });
    }
    state.totals.iter_mut().zip(counts).for_each(|(t, c)| *t += c);
    balancer_update(state, &fractions(counts))
}

/// `α · N_r · Σ_i f_i · P̄_i`, with `P̄` the mean router probability per expert.
pub fn aux_balance_loss<T: Float>(probs: &Tensor<T>, loads: &[f64], alpha: f64) -> Result<Tensor<T>> {
    let (_, n_routed) = probs.dims2()?;
    if loads.len() != n_routed {
        return Err(Error::Shape {
            op: "aux_balance_loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![loads.len()],
        });
    }
    let f = Tensor::new(loads.iter().map(|&v| T::lit(v)).collect(), &[n_routed])?;
    Ok(probs.mean_rows()?.mul(&f)?.sum().scale(T::lit(alpha * n_routed as f64)))
}

/// Coefficient of variation (population std / mean) of load fractions.
pub fn load_cv(loads: &[f64]) -> Result<f64> {
    if loads.is_empty() {
        return Err(Error::Contract("load_cv of an empty load vector".into()));
    }
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Contract("load_cv with no routed tokens".into()));
    }
    let var = loads.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Number of distinct expert sets of size `k` among `n_routed`, exactly.
///
/// For 62 routed experts and k = 6 this is 61,474,519. The figure
/// 36,288,252 sometimes quoted for that configuration is C(57, 6).
pub fn routing_combinations(n_routed: u64, k: u64) -> BigUint {
    if k > n_routed {
        return BigUint::from(0u32);
    }
    let k = k.min(n_routed - k);
    // C(n, i+1) = C(n, i) · (n - i) / (i + 1), exact at every step
    (0..k).fold(BigUint::from(1u32), |acc, i| acc * (n_routed - i) / (i + 1))
}
