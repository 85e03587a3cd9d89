//! Decoder-only language model.
//!
//! Each block is pre-norm: `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))`,
//! where the attention is latent or full and the FFN is dense or a mixture
//! of experts. Token embeddings are tied with the output projection.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{maybe_dropout, AttentionWeights, Dropout, KvCache, LayerKv};
use crate::config::{AttentionKind, FfnKind, ModelConfig};
use crate::error::{Error, Result};
use crate::moe::{self, BalanceStrategy, Expert, ExpertWeights, RouterState, RoutingDecision};
use crate::rope::RopeTable;
use crate::tensor::{no_grad, Float, Tensor};

const INIT_STD: f64 = 0.02;

pub enum Ffn<T: Float> {
    Dense(Expert<T>),
    Moe(ExpertWeights<T>),
}

pub struct Block<T: Float> {
    pub ln1_gain: Tensor<T>,
    pub ln1_offset: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_offset: Tensor<T>,
    pub ffn: Ffn<T>,
}

/// Everything a block needs besides its weights.
pub struct BlockCtx<'a> {
    pub rope: &'a Arc<RopeTable>,
    pub router: Option<&'a RouterState>,
    pub top_k: usize,
    pub frozen: Option<&'a [usize]>,
    pub dropout: Option<Dropout<'a>>,
    pub eps: f64,
}

impl<T: Float> Block<T> {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let ones = || Tensor::param(vec![T::one(); d], &[d]).expect("shape");
        let zeros = || Tensor::param(vec![T::zero(); d], &[d]).expect("shape");
        let attn = AttentionWeights::init(config, rng, INIT_STD, out_std);
        let ffn = match config.ffn {
            FfnKind::Dense => Ffn::Dense(Expert::init(d, config.ffn_hidden(), rng, INIT_STD, out_std)),
            FfnKind::Moe => Ffn::Moe(ExpertWeights::init(
                d,
                config.expert_hidden(),
                &config.experts,
                rng,
                INIT_STD,
                out_std,
            )),
        };
        Self {
            ln1_gain: ones(),
            ln1_offset: zeros(),
            attn,
            ln2_gain: ones(),
            ln2_offset: zeros(),
            ffn,
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("ln1.gain".to_string(), self.ln1_gain.clone()),
            ("ln1.offset".to_string(), self.ln1_offset.clone()),
        ];
        out.extend(self.attn.named().into_iter().map(|(n, t)| (format!("attn.{n}"), t)));
        out.push(("ln2.gain".to_string(), self.ln2_gain.clone()));
        out.push(("ln2.offset".to_string(), self.ln2_offset.clone()));
        match &self.ffn {
            Ffn::Dense(e) => {
                out.push(("ffn.w_in".to_string(), e.w_in.clone()));
                out.push(("ffn.w_out".to_string(), e.w_out.clone()));
            }
            Ffn::Moe(w) => out.extend(w.named().into_iter().map(|(n, t)| (format!("ffn.{n}"), t))),
        }
        out
    }

    /// One pre-norm residual block over `x[n × d]`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        cache: Option<&mut LayerKv<T>>,
        ctx: &BlockCtx<'_>,
    ) -> Result<(Tensor<T>, Option<RoutingDecision<T>>)> {
        let eps = T::lit(ctx.eps);
        let a = self
            .attn
            .forward(&x.layer_norm(&self.ln1_gain, &self.ln1_offset, eps)?, cache, ctx.rope, true, ctx.dropout)?;
        let h = x.add(&a)?;
        let normed = h.layer_norm(&self.ln2_gain, &self.ln2_offset, eps)?;
        let (f, decision) = match &self.ffn {
            Ffn::Dense(e) => (e.forward(&normed)?, None),
            Ffn::Moe(w) => {
                let router = ctx
                    .router
                    .ok_or_else(|| Error::Contract("mixture-of-experts block without router state".into()))?;
                let decision = moe::route(&normed, router, w, ctx.top_k, ctx.frozen)?;
                (moe::moe_forward(&normed, w, &decision)?, Some(decision))
            }
        };
        let out = h.add(&maybe_dropout(f, ctx.dropout))?;
        Ok((out, decision))
    }
}

/// Result of a forward pass.
pub struct ForwardOutput<T: Float> {
    /// `[n × vocab]` next-token logits.
    pub logits: Tensor<T>,
    /// One decision per block for mixture-of-experts models, empty otherwise.
    pub routes: Vec<RoutingDecision<T>>,
}

impl<T: Float> ForwardOutput<T> {
    /// Selected expert indices per layer, for replaying the same routing.
    pub fn frozen_routes(&self) -> Vec<Vec<usize>> {
        self.routes.iter().map(|r| r.indices.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    TopP { temperature: f64, p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: u64,
    /// Parameters touched by one token: everything except unselected routed experts.
    pub active: u64,
}

/// Closed-form parameter counts for a configuration.
pub fn param_counts(config: &ModelConfig) -> ParamCounts {
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    let layers = config.n_layers as u64;
    let attn = match config.attention {
        AttentionKind::Mha => 4 * d * d,
        AttentionKind::Mla => {
            let r = config.latent_dim as u64;
            // W_Q, W_O, shared W_Kc/W_Vc, per-head W_Kr/W_Vr (H · r · d_k = r · d)
            2 * d * d + 2 * d * r + 2 * r * d
        }
    };
    let (ffn, idle) = match config.ffn {
        FfnKind::Dense => (2 * d * config.ffn_hidden() as u64, 0),
        FfnKind::Moe => {
            let e = &config.experts;
            let per_expert = 2 * d * config.expert_hidden() as u64;
            let routed = e.n_routed() as u64;
            (
                e.n_experts as u64 * per_expert + d * routed,
                (routed - e.top_k as u64) * per_expert,
            )
        }
    };
    let per_layer = 4 * d + attn + ffn;
    let total = v * d + layers * per_layer + 2 * d;
    ParamCounts {
        total,
        active: total - layers * idle,
    }
}

pub struct Model<T: Float = f32> {
    config: ModelConfig,
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f_gain: Tensor<T>,
    pub ln_f_offset: Tensor<T>,
    rope: Arc<RopeTable>,
    routers: Vec<RouterState>,
    training: bool,
    dropout_rng: RefCell<ChaCha8Rng>,
}

impl<T: Float> Model<T> {
    /// Seeded initialisation: `N(0, 0.02)` weights, residual output projections
    /// scaled by `1/√(2L)`, unit gains, zero offsets, zero router bias.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embed = Tensor::randn_param(&[config.vocab_size, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers).map(|_| Block::init(&config, &mut rng)).collect();
        let rope = RopeTable::shared(config.head_dim(), config.rope_base, config.max_seq_len)?;
        let routers = match config.ffn {
            FfnKind::Moe => (0..config.n_layers)
                .map(|_| {
                    RouterState::new(
                        config.experts.n_routed(),
                        BalanceStrategy::default(),
                        moe::DEFAULT_GAMMA,
                        moe::DEFAULT_ALPHA,
                    )
                })
                .collect(),
            FfnKind::Dense => Vec::new(),
        };
        Ok(Self {
            embed,
            blocks,
            ln_f_gain: Tensor::param(vec![T::one(); d], &[d])?,
            ln_f_offset: Tensor::param(vec![T::zero(); d], &[d])?,
            rope,
            routers,
            training: false,
            dropout_rng: RefCell::new(ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d80f)),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &Arc<RopeTable> {
        &self.rope
    }

    pub fn routers(&self) -> &[RouterState] {
        &self.routers
    }

    pub fn routers_mut(&mut self) -> &mut [RouterState] {
        &mut self.routers
    }

    pub fn set_routers(&mut self, routers: Vec<RouterState>) -> Result<()> {
        if routers.len() != self.routers.len()
            || routers.iter().any(|r| r.n_routed() != self.config.experts.n_routed())
        {
            return Err(Error::Contract("router states do not match the model layout".into()));
        }
        self.routers = routers;
        Ok(())
    }

    /// Sets the balancing strategy of every mixture-of-experts layer.
    pub fn set_balancing(&mut self, strategy: BalanceStrategy, gamma: f64, alpha: f64) {
        for r in &mut self.routers {
            r.strategy = strategy;
            r.gamma = gamma;
            r.alpha = alpha;
        }
    }

    /// Training mode enables dropout.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn reseed_dropout(&self, seed: u64) {
        *self.dropout_rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// All trainable tensors under stable names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".to_string(), self.ln_f_gain.clone()));
        out.push(("ln_f.offset".to_string(), self.ln_f_offset.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::for_config(&self.config)
    }

    /// Next-token logits for every position of `tokens`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_with(tokens, None, None)?.logits)
    }

    /// Forward pass that may extend `cache` (positions continue from its
    /// length) and may replay a fixed routing per layer.
    pub fn forward_with(
        &self,
        tokens: &[usize],
        cache: Option<&mut KvCache<T>>,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<ForwardOutput<T>> {
        self.forward_impl(tokens, cache, frozen, self.training)
    }

    fn forward_impl(
        &self,
        tokens: &[usize],
        mut cache: Option<&mut KvCache<T>>,
        frozen: Option<&[Vec<usize>]>,
        train: bool,
    ) -> Result<ForwardOutput<T>> {
        let offset = cache.as_ref().map_or(0, |c| c.len());
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty token sequence".into()));
        }
        if offset + tokens.len() > self.config.max_seq_len {
            let msg = format!(
                "{} positions exceed max_seq_len {}",
                offset + tokens.len(),
                self.config.max_seq_len
            );
            return Err(if cache.is_some() { Error::Cache(msg) } else { Error::Contract(msg) });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!("token {bad} >= vocabulary {}", self.config.vocab_size)));
        }
        if let Some(f) = frozen {
            if f.len() != self.routers.len() {
                return Err(Error::Contract("frozen routing needs one entry per expert layer".into()));
            }
        }
        let dropout = (train && self.config.dropout > 0.0).then_some(Dropout {
            rate: self.config.dropout,
            rng: &self.dropout_rng,
        });

        let mut x = self.embed.index_rows(tokens)?;
        let mut routes = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let ctx = BlockCtx {
                rope: &self.rope,
                router: self.routers.get(i),
                top_k: self.config.experts.top_k,
                frozen: frozen.map(|f| f[i].as_slice()),
                dropout,
                eps: self.config.layer_norm_eps,
            };
            let layer_cache = cache.as_deref_mut().map(|c| c.layer_mut(i));
            let (y, decision) = block.forward(&x, layer_cache, &ctx)?;
            x = y;
            routes.extend(decision);
        }
        let h = x.layer_norm(&self.ln_f_gain, &self.ln_f_offset, T::lit(self.config.layer_norm_eps))?;
        let logits = h.matmul(&self.embed.transpose()?)?;
        Ok(ForwardOutput { logits, routes })
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`, plus the
    /// auxiliary balance term for layers whose strategy asks for one.
    pub fn loss(&self, inputs: &[usize], targets: &[usize]) -> Result<(Tensor<T>, Vec<RoutingDecision<T>>)> {
        let out = self.forward_with(inputs, None, None)?;
        let mut loss = out.logits.cross_entropy(targets)?;
        for (state, decision) in self.routers.iter().zip(&out.routes) {
            if state.strategy == BalanceStrategy::AuxLoss && state.alpha != 0.0 {
                let aux = moe::aux_balance_loss(&decision.probs, &decision.loads(), state.alpha)?;
                loss = loss.add(&aux)?;
            }
        }
        Ok((loss, out.routes))
    }

    /// Autoregressive continuation of `prompt` by `max_new` tokens.
    ///
    /// With `use_cache` the prompt is prefilled once and each new token costs one
    /// single-position pass against the KV cache; otherwise every step re-runs
    /// the whole sequence. Dropout is never applied.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        sampling: Sampling,
        seed: u64,
        use_cache: bool,
    ) -> Result<Vec<usize>> {
        let mut tokens = prompt.to_vec();
        if max_new == 0 {
            return Ok(tokens);
        }
        if prompt.is_empty() {
            return Err(Error::Contract("generation needs a non-empty prompt".into()));
        }
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(Error::Cache(format!(
                "prompt {} + {max_new} new tokens exceed max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        no_grad(|| {
            let mut cache = use_cache.then(|| self.new_cache());
            let mut next_input: Vec<usize> = tokens.clone();
            for _ in 0..max_new {
                let logits = match cache.as_mut() {
                    Some(c) => self.forward_impl(&next_input, Some(c), None, false)?.logits,
                    None => self.forward_impl(&tokens, None, None, false)?.logits,
                };
                let (n, v) = logits.dims2()?;
                let last: Vec<f64> = logits.data()[(n - 1) * v..]
                    .iter()
                    .map(|x| x.to_f64().unwrap_or(f64::NAN))
                    .collect();
                let next = sample(&last, sampling, &mut rng);
                tokens.push(next);
                next_input = vec![next];
            }
            Ok(tokens)
        })
    }
}

/// Picks the next token from one row of logits.
pub fn sample<R: Rng + ?Sized>(logits: &[f64], sampling: Sampling, rng: &mut R) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let (temperature, top_p) = match sampling {
        Sampling::Greedy => return argmax(),
        Sampling::Temperature(t) => (t, 1.0),
        Sampling::TopP { temperature, p } => (temperature, p),
    };
    if temperature <= 0.0 {
        return argmax();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    if top_p < 1.0 {
        probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut keep = 0;
        for (i, p) in probs.iter().enumerate() {
            cum += p.1;
            keep = i + 1;
            if cum >= top_p {
                break;
            }
        }
        probs.truncate(keep);
    }
    let total: f64 = probs.iter().map(|p| p.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(i, p) in &probs {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.last().map_or(0, |p| p.0)
}
