//! Encoder-only transformer: scaled dot-product attention, multi-head
//! self-attention, and the post-norm encoder layer
//!
//! ```text
//! L(X)  = Linear(Dropout(ReLU(Linear(X))))
//! Ê(S)  = LayerNorm(S + Dropout(A_h(S)))
//! E(S)  = LayerNorm(Ê(S) + Dropout(L(Ê(S))))
//! ```

use crate::autodiff::{Graph, Var};
use crate::error::{GarError, Result};
use crate::params::{join, xavier, LayerNormParams, Linear, ParamTree};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub d_model: usize,
    pub num_heads: usize,
}

impl MultiHeadConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 {
            return Err(GarError::Config("d_model and num_heads must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(GarError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub heads: MultiHeadConfig,
    pub d_ff: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.heads.validate()?;
        if self.num_layers == 0 {
            return Err(GarError::Config("num_layers must be at least 1".into()));
        }
        if self.d_ff == 0 {
            return Err(GarError::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GarError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-head query/key/value projections, each `d_model × head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<P> {
    pub query: P,
    pub key: P,
    pub value: P,
}

impl<P> ParamTree<P> for HeadWeights<P> {
    type Mapped<Q> = HeadWeights<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<HeadWeights<Q>, E> {
        Ok(HeadWeights {
            query: f(&join(prefix, "query"), &self.query)?,
            key: f(&join(prefix, "key"), &self.key)?,
            value: f(&join(prefix, "value"), &self.value)?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "query"), &mut self.query);
        f(&join(prefix, "key"), &mut self.key);
        f(&join(prefix, "value"), &mut self.value);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights<P> {
    pub heads: Vec<HeadWeights<P>>,
    /// `d_model × d_model`, no bias.
    pub output: P,
    pub ff_in: Linear<P>,
    pub ff_out: Linear<P>,
    pub norm_attn: LayerNormParams<P>,
    pub norm_ff: LayerNormParams<P>,
}

impl<P> ParamTree<P> for EncoderLayerWeights<P> {
    type Mapped<Q> = EncoderLayerWeights<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<EncoderLayerWeights<Q>, E> {
        Ok(EncoderLayerWeights {
            heads: self.heads.try_map(&join(prefix, "heads"), f)?,
            output: f(&join(prefix, "output"), &self.output)?,
            ff_in: self.ff_in.try_map(&join(prefix, "ff_in"), f)?,
            ff_out: self.ff_out.try_map(&join(prefix, "ff_out"), f)?,
            norm_attn: self.norm_attn.try_map(&join(prefix, "norm_attn"), f)?,
            norm_ff: self.norm_ff.try_map(&join(prefix, "norm_ff"), f)?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.heads.for_each_mut(&join(prefix, "heads"), f);
        f(&join(prefix, "output"), &mut self.output);
        self.ff_in.for_each_mut(&join(prefix, "ff_in"), f);
        self.ff_out.for_each_mut(&join(prefix, "ff_out"), f);
        self.norm_attn.for_each_mut(&join(prefix, "norm_attn"), f);
        self.norm_ff.for_each_mut(&join(prefix, "norm_ff"), f);
    }
}

impl<T: Real> EncoderLayerWeights<Tensor<T>> {
    pub fn init(rng: &mut Rng, cfg: &EncoderConfig) -> Self {
        let d = cfg.heads.d_model;
        let hd = cfg.heads.head_dim();
        let heads = (0..cfg.heads.num_heads)
            .map(|_| HeadWeights {
                query: xavier(rng, d, hd),
                key: xavier(rng, d, hd),
                value: xavier(rng, d, hd),
            })
            .collect();
        EncoderLayerWeights {
            heads,
            output: xavier(rng, d, d),
            ff_in: Linear::init(rng, d, cfg.d_ff, true),
            ff_out: Linear::init(rng, cfg.d_ff, d, true),
            norm_attn: LayerNormParams::identity(d),
            norm_ff: LayerNormParams::identity(d),
        }
    }
}

pub fn init_encoder<T: Real>(rng: &mut Rng, cfg: &EncoderConfig) -> Vec<EncoderLayerWeights<Tensor<T>>> {
    (0..cfg.num_layers)
        .map(|_| EncoderLayerWeights::init(rng, cfg))
        .collect()
}

/// Post-softmax attention weights of one head in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T: Real = f64> {
    pub branch: usize,
    pub layer: usize,
    pub head: usize,
    /// `N × N`; row `i` is the distribution actor `i` places over all actors.
    pub weights: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord<T: Real = f64> {
    pub maps: Vec<AttentionMap<T>>,
}

/// `softmax(Q·Kᵀ / √d_k) · V`. Returns the output and the attention weights.
pub fn attention<T: Real>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(GarError::dim("attention", "Q, K, V must be matrices"));
    }
    if qs[1] != ks[1] {
        return Err(GarError::dim(
            "attention",
            format!("query width {} differs from key width {}", qs[1], ks[1]),
        ));
    }
    if ks[0] != vs[0] {
        return Err(GarError::dim(
            "attention",
            format!("{} keys but {} values", ks[0], vs[0]),
        ));
    }
    let dk = qs[1];
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention over the rows of `s`. When `record` is given,
/// each head's weights are appended as `(head, weights)`.
pub fn multi_head<T: Real>(
    g: &mut Graph<'_, T>,
    s: Var,
    w: &EncoderLayerWeights<Var>,
    mut record: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let q = g.matmul(s, head.query)?;
        let k = g.matmul(s, head.key)?;
        let v = g.matmul(s, head.value)?;
        let (h, a) = attention(g, q, k, v)?;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(g.value(a).clone());
        }
        outs.push(h);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    g.matmul(cat, w.output)
}

/// One post-norm encoder layer. Dropout is active only in training mode.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<'_, T>,
    s: Var,
    w: &EncoderLayerWeights<Var>,
    dropout: T,
    record: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let attn = multi_head(g, s, w, record)?;
    let attn = g.dropout(attn, dropout)?;
    let res = g.add(s, attn)?;
    let e_hat = w.norm_attn.forward(g, res)?;

    let hidden = w.ff_in.forward(g, e_hat)?;
    let hidden = g.relu(hidden)?;
    let hidden = g.dropout(hidden, dropout)?;
    let ff = w.ff_out.forward(g, hidden)?;
    let ff = g.dropout(ff, dropout)?;
    let res = g.add(e_hat, ff)?;
    w.norm_ff.forward(g, res)
}

/// Applies the stack of layers in order.
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    s: Var,
    layers: &[EncoderLayerWeights<Var>],
    dropout: T,
    record_attention: bool,
) -> Result<(Var, AttentionRecord<T>)> {
    if layers.is_empty() {
        return Err(GarError::Config("encoder needs at least one layer".into()));
    }
    let mut x = s;
    let mut record = AttentionRecord::default();
    for (li, layer) in layers.iter().enumerate() {
        let mut maps = Vec::new();
        x = encoder_layer(g, x, layer, dropout, record_attention.then_some(&mut maps))?;
        record
            .maps
            .extend(maps.into_iter().enumerate().map(|(head, weights)| AttentionMap {
                branch: 0,
                layer: li,
                head,
                weights,
            }));
    }
    Ok((x, record))
}
