//! Multi-head attention in two flavours and the KV cache that backs decoding.
//!
//! Latent attention projects the input once into shared key and value codes
//! `C_K = X·W_Kc`, `C_V = X·W_Vc` of width `r`. Only these codes are cached.
//! Every head reconstructs its own keys and values from the full cache
//! (`K_h = C_K·W_Kr[h]`), after which keys and queries are rotated at their
//! absolute positions. Values are never rotated.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::rope::RopeTable;
use crate::tensor::{Float, Tensor};

/// Dropout rate plus the generator its masks are drawn from.
#[derive(Clone, Copy)]
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a RefCell<ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.dropout(self.rate, &mut *self.rng.borrow_mut())
    }
}

pub(crate) fn maybe_dropout<T: Float>(x: Tensor<T>, dropout: Option<Dropout<'_>>) -> Tensor<T> {
    match dropout {
        Some(d) => d.apply(&x),
        None => x,
    }
}

pub struct MlaWeights<T: Float> {
    pub w_q: Tensor<T>,
    /// `[d × r]`, shared by every head.
    pub w_kc: Tensor<T>,
    pub w_vc: Tensor<T>,
    /// One `[r × d_k]` reconstruction per head.
    pub w_kr: Vec<Tensor<T>>,
    pub w_vr: Vec<Tensor<T>>,
    pub w_o: Tensor<T>,
}

pub struct MhaWeights<T: Float> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

pub enum AttentionWeights<T: Float> {
    Mha(MhaWeights<T>),
    Mla(MlaWeights<T>),
}

impl<T: Float> AttentionWeights<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R, std: f64, out_std: f64) -> Self {
        let d = config.d_model;
        let dk = config.head_dim();
        match config.attention {
            AttentionKind::Mha => Self::Mha(MhaWeights {
                w_q: Tensor::randn_param(&[d, d], std, rng),
                w_k: Tensor::randn_param(&[d, d], std, rng),
                w_v: Tensor::randn_param(&[d, d], std, rng),
                w_o: Tensor::randn_param(&[d, d], out_std, rng),
            }),
            AttentionKind::Mla => {
                let r = config.latent_dim;
                let w_q = Tensor::randn_param(&[d, d], std, rng);
                let w_kc = Tensor::randn_param(&[d, r], std, rng);
                let w_vc = Tensor::randn_param(&[d, r], std, rng);
                let w_kr = (0..config.n_heads).map(|_| Tensor::randn_param(&[r, dk], std, rng)).collect();
                let w_vr = (0..config.n_heads).map(|_| Tensor::randn_param(&[r, dk], std, rng)).collect();
                Self::Mla(MlaWeights {
                    w_q,
                    w_kc,
                    w_vc,
                    w_kr,
                    w_vr,
                    w_o: Tensor::randn_param(&[d, d], out_std, rng),
                })
            }
        }
    }

    /// Parameters with stable names relative to the layer.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        match self {
            Self::Mha(w) => vec![
                ("w_q".into(), w.w_q.clone()),
                ("w_k".into(), w.w_k.clone()),
                ("w_v".into(), w.w_v.clone()),
                ("w_o".into(), w.w_o.clone()),
            ],
            Self::Mla(w) => {
                let mut out = vec![
                    ("w_q".into(), w.w_q.clone()),
                    ("w_kc".into(), w.w_kc.clone()),
                    ("w_vc".into(), w.w_vc.clone()),
                ];
                out.extend(w.w_kr.iter().enumerate().map(|(h, t)| (format!("w_kr.{h}"), t.clone())));
                out.extend(w.w_vr.iter().enumerate().map(|(h, t)| (format!("w_vr.{h}"), t.clone())));
                out.push(("w_o".into(), w.w_o.clone()));
                out
            }
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        cache: Option<&mut LayerKv<T>>,
        rope: &Arc<RopeTable>,
        causal: bool,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Tensor<T>> {
        match self {
            Self::Mha(w) => mha_forward(x, w, cache, rope, causal, dropout),
            Self::Mla(w) => mla_forward(x, w, cache, rope, causal, dropout),
        }
    }
}

/// Cached key/value rows of one layer.
///
/// For latent attention the rows are the `r`-wide codes `C_K`, `C_V`; for
/// full attention they are the `H·d_k`-wide (unrotated) keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    keys: Vec<T>,
    values: Vec<T>,
    width: usize,
    len: usize,
    capacity: usize,
}

impl<T: Float> LayerKv<T> {
    pub fn new(width: usize, capacity: usize) -> Self {
        Self {
            keys: Vec::with_capacity(width * capacity),
            values: Vec::with_capacity(width * capacity),
            width,
            len: 0,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn check_room(&self, n_new: usize) -> Result<()> {
        if self.len + n_new > self.capacity {
            return Err(Error::Cache(format!(
                "appending {n_new} rows to {} cached exceeds capacity {}",
                self.len, self.capacity
            )));
        }
        Ok(())
    }

    fn append(&mut self, keys: &Tensor<T>, values: &Tensor<T>) -> Result<()> {
        let (n, w) = keys.dims2()?;
        if w != self.width || values.shape() != keys.shape() {
            return Err(Error::Shape {
                op: "cache append",
                lhs: vec![n, self.width],
                rhs: values.shape().to_vec(),
            });
        }
        self.check_room(n)?;
        self.keys.extend_from_slice(&keys.data());
        self.values.extend_from_slice(&values.data());
        self.len += n;
        Ok(())
    }

    /// Cached rows followed by `new_keys`/`new_values`, and stores the new rows.
    fn extend_with(&mut self, new_keys: &Tensor<T>, new_values: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let old = self.len;
        let full = if old == 0 {
            (new_keys.clone(), new_values.clone())
        } else {
            let k = Tensor::new(self.keys.clone(), &[old, self.width])?;
            let v = Tensor::new(self.values.clone(), &[old, self.width])?;
            (
                Tensor::concat_rows(&[k, new_keys.clone()])?,
                Tensor::concat_rows(&[v, new_values.clone()])?,
            )
        };
        self.append(new_keys, new_values)?;
        Ok(full)
    }

    /// Bytes of cached elements actually held.
    pub fn live_bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * T::BYTES
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
        self.len = 0;
    }
}

/// Per-layer caches for one decoding session.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    kind: AttentionKind,
    layers: Vec<LayerKv<T>>,
}

impl<T: Float> KvCache<T> {
    pub fn for_config(config: &ModelConfig) -> Self {
        let width = match config.attention {
            AttentionKind::Mha => config.d_model,
            AttentionKind::Mla => config.latent_dim,
        };
        Self {
            kind: config.attention,
            layers: (0..config.n_layers)
                .map(|_| LayerKv::new(width, config.max_seq_len))
                .collect(),
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::capacity)
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerKv<T> {
        &mut self.layers[i]
    }

    pub fn live_bytes(&self) -> usize {
        self.layers.iter().map(LayerKv::live_bytes).sum()
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(LayerKv::clear);
    }
}

/// The shared latent codes `(X·W_Kc, X·W_Vc)`.
pub fn compress_kv<T: Float>(x: &Tensor<T>, w: &MlaWeights<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((x.matmul(&w.w_kc)?, x.matmul(&w.w_vc)?))
}

/// Scaled dot-product attention for one head; `offset` is the number of
/// positions preceding the first query row.
pub(crate) fn attend<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    offset: usize,
    causal: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<Tensor<T>> {
    let dk = q.dims2()?.1;
    let mut scores = q.matmul(&k.transpose()?)?.scale(T::one() / T::lit(dk as f64).sqrt());
    if causal {
        scores = scores.causal_mask(offset)?;
    }
    let probs = maybe_dropout(scores.softmax(1)?, dropout);
    probs.matmul(v)
}

fn positions(start: usize, len: usize) -> Vec<i64> {
    (start..start + len).map(|p| p as i64).collect()
}

/// Latent attention over `x[n_new × d]`, extending `cache` by `n_new` code rows.
pub fn mla_forward<T: Float>(
    x: &Tensor<T>,
    w: &MlaWeights<T>,
    cache: Option<&mut LayerKv<T>>,
    rope: &Arc<RopeTable>,
    causal: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<Tensor<T>> {
    let n_new = x.dims2()?.0;
    let offset = cache.as_ref().map_or(0, |c| c.len());
    if let Some(c) = cache.as_ref() {
        c.check_room(n_new)?;
    }
    let q = x.matmul(&w.w_q)?;
    let (ck_new, cv_new) = compress_kv(x, w)?;
    let (ck, cv) = match cache {
        Some(c) => c.extend_with(&ck_new, &cv_new)?,
        None => (ck_new, cv_new),
    };
    let n_total = offset + n_new;
    let q_pos = positions(offset, n_new);
    let k_pos = positions(0, n_total);
    let dk = w.w_kr.first().ok_or_else(|| Error::Contract("no heads".into()))?.dims2()?.1;

    let heads = w
        .w_kr
        .iter()
        .zip(&w.w_vr)
        .enumerate()
        .map(|(h, (w_kr, w_vr))| {
            let qh = q.narrow_cols(h * dk, dk)?.rope(&q_pos, rope)?;
            let kh = ck.matmul(w_kr)?.rope(&k_pos, rope)?;
            let vh = cv.matmul(w_vr)?;
            attend(&qh, &kh, &vh, offset, causal, dropout)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&heads)?.matmul(&w.w_o)
}

/// Standard multi-head attention; caches full-width keys and values.
pub fn mha_forward<T: Float>(
    x: &Tensor<T>,
    w: &MhaWeights<T>,
    cache: Option<&mut LayerKv<T>>,
    rope: &Arc<RopeTable>,
    causal: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<Tensor<T>> {
    let n_new = x.dims2()?.0;
    let offset = cache.as_ref().map_or(0, |c| c.len());
    if let Some(c) = cache.as_ref() {
        c.check_room(n_new)?;
    }
    let q = x.matmul(&w.w_q)?;
    let k_new = x.matmul(&w.w_k)?;
    let v_new = x.matmul(&w.w_v)?;
    let (k, v) = match cache {
        Some(c) => c.extend_with(&k_new, &v_new)?,
        None => (k_new, v_new),
    };
    let n_total = offset + n_new;
    let q_pos = positions(offset, n_new);
    let k_pos = positions(0, n_total);
    let dk = rope.head_dim();
    let n_heads = q.dims2()?.1 / dk;

    let heads = (0..n_heads)
        .map(|h| {
            let qh = q.narrow_cols(h * dk, dk)?.rope(&q_pos, rope)?;
            let kh = k.narrow_cols(h * dk, dk)?.rope(&k_pos, rope)?;
            let vh = v.narrow_cols(h * dk, dk)?;
            attend(&qh, &kh, &vh, offset, causal, dropout)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&heads)?.matmul(&w.w_o)
}

/// Bytes needed to cache `n_tokens` positions (summed over a batch) across `layers`.
///
/// Full attention stores `2·n·L·H·d_k` elements; latent attention with shared
/// compression stores `2·n·L·r`.
pub fn cache_bytes(
    kind: AttentionKind,
    n_tokens: usize,
    layers: usize,
    heads: usize,
    head_dim: usize,
    latent: usize,
    bytes_per_elem: usize,
) -> u64 {
    let width = match kind {
        AttentionKind::Mha => heads * head_dim,
        AttentionKind::Mla => latent,
    };
    2 * n_tokens as u64 * layers as u64 * width as u64 * bytes_per_elem as u64
}
