//! Actor-transformer group activity model.
//!
//! Each branch embeds per-actor features to `d_model`, optionally adds the
//! positional encoding of the box centers, refines the set with the
//! transformer encoder, and classifies individual actions per actor and the
//! group activity from the max-pooled set. Branches are combined by early
//! fusion (sum or concatenation of embeddings before one shared encoder) or
//! by late fusion (weighted sum of per-branch class probabilities).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{softmax_rows, Graph, Mode, Var};
use crate::error::{GarError, Result};
use crate::params::{bind, join, Linear, ParamTree};
use crate::posenc::{apply_pe, BoxCenter, DEFAULT_PE_SCALE};
use crate::rng::{rng_for, Rng};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{
    encode, init_encoder, AttentionRecord, EncoderConfig, EncoderLayerWeights, MultiHeadConfig,
};

/// How actor features are aggregated before the classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Aggregator {
    /// Transformer encoder, then max-pooling.
    Transformer,
    /// Baseline without an encoder: embed, max-pool, classify.
    MaxPool,
}

/// Where the positional encoding is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeStage {
    /// To the `d_model`-wide embedded features.
    AfterEmbed,
    /// To the raw branch features (their width must be divisible by 4).
    BeforeEmbed,
}

/// Where the positional encoding is added under early fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EarlyPe {
    AfterFusion,
    PerBranch,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionMode {
    None,
    EarlySum,
    EarlyConcat,
    /// Per-branch probability weights; normalized to sum to 1 when combined.
    Late { weights: Vec<f64> },
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::EarlySum => "early-sum",
            FusionMode::EarlyConcat => "early-concat",
            FusionMode::Late { .. } => "late",
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $( $name:literal => $val:expr ),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = GarError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $( $name => Ok($val), )+
                    other => Err(GarError::Config(format!(
                        concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $( if *self == $val { return f.write_str($name); } )+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Aggregator, "aggregator", "transformer" => Aggregator::Transformer, "maxpool" => Aggregator::MaxPool);
keyword_enum!(PeStage, "pe stage", "after-embed" => PeStage::AfterEmbed, "before-embed" => PeStage::BeforeEmbed);
keyword_enum!(EarlyPe, "early pe placement", "after-fusion" => EarlyPe::AfterFusion, "per-branch" => EarlyPe::PerBranch);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Indices of the scene branches the model consumes, in order.
    pub branches: Vec<usize>,
    /// Feature width of each consumed branch.
    pub branch_dims: Vec<usize>,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub num_actions: usize,
    pub num_activities: usize,
    pub use_pe: bool,
    pub pe_scale: f64,
    pub pe_stage: PeStage,
    pub early_pe: EarlyPe,
    pub aggregator: Aggregator,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    /// Single static branch at the reference sizes: `d = 128`, one head, one
    /// layer, feed-forward width 256, dropout 0.1.
    fn default() -> Self {
        ModelConfig {
            branches: vec![0],
            branch_dims: vec![32],
            d_model: 128,
            num_heads: 1,
            num_layers: 1,
            d_ff: 256,
            dropout: 0.1,
            num_actions: 9,
            num_activities: 8,
            use_pe: true,
            pe_scale: DEFAULT_PE_SCALE,
            pe_stage: PeStage::AfterEmbed,
            early_pe: EarlyPe::AfterFusion,
            aggregator: Aggregator::Transformer,
            fusion: FusionMode::None,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            heads: MultiHeadConfig {
                d_model: self.d_model,
                num_heads: self.num_heads,
            },
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggregator == Aggregator::Transformer {
            self.encoder().validate()?;
        } else if !(0.0..1.0).contains(&self.dropout) {
            return Err(GarError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.d_model == 0 {
            return Err(GarError::Config("d_model must be positive".into()));
        }
        if self.branches.is_empty() || self.branches.len() != self.branch_dims.len() {
            return Err(GarError::Config(
                "branches and branch_dims must be non-empty and of equal length".into(),
            ));
        }
        if self.branch_dims.contains(&0) {
            return Err(GarError::Config("branch feature widths must be positive".into()));
        }
        if self.num_actions < 2 || self.num_activities < 2 {
            return Err(GarError::Config("need at least two action and two activity classes".into()));
        }
        if self.use_pe {
            let widths: Vec<usize> = match self.pe_stage {
                PeStage::AfterEmbed => vec![self.d_model],
                PeStage::BeforeEmbed => self.branch_dims.clone(),
            };
            if let Some(w) = widths.iter().find(|&&w| w % 4 != 0) {
                return Err(GarError::Config(format!(
                    "positional encoding needs widths divisible by 4, got {w}"
                )));
            }
            if !(self.pe_scale > 0.0) {
                return Err(GarError::Config("pe scale must be positive".into()));
            }
        }
        match &self.fusion {
            FusionMode::None if self.branches.len() != 1 => Err(GarError::Config(
                "fusion 'none' takes exactly one branch".into(),
            )),
            FusionMode::EarlySum | FusionMode::EarlyConcat if self.branches.len() < 2 => Err(
                GarError::Config("early fusion needs at least two branches".into()),
            ),
            FusionMode::Late { weights } => {
                if weights.len() != self.branches.len() {
                    return Err(GarError::Config(format!(
                        "{} late-fusion weights for {} branches",
                        weights.len(),
                        self.branches.len()
                    )));
                }
                if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                    return Err(GarError::Config("late-fusion weights must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn use_encoder(&self) -> bool {
        self.aggregator == Aggregator::Transformer
    }
}

/// One branch's features for a scene together with the actors' box centers.
#[derive(Clone, Copy, Debug)]
pub struct BranchInput<'a, T: Real = f64> {
    /// `N × f_b`.
    pub features: &'a Tensor<T>,
    pub centers: &'a [BoxCenter],
}

/// Embedding, encoder and both classifiers of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights<P> {
    pub embed: Linear<P>,
    /// Empty for the max-pool baseline.
    pub encoder: Vec<EncoderLayerWeights<P>>,
    pub action_head: Linear<P>,
    pub activity_head: Linear<P>,
}

impl<P> ParamTree<P> for BranchWeights<P> {
    type Mapped<Q> = BranchWeights<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<BranchWeights<Q>, E> {
        Ok(BranchWeights {
            embed: self.embed.try_map(&join(prefix, "embed"), f)?,
            encoder: self.encoder.try_map(&join(prefix, "encoder"), f)?,
            action_head: self.action_head.try_map(&join(prefix, "action_head"), f)?,
            activity_head: self.activity_head.try_map(&join(prefix, "activity_head"), f)?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.embed.for_each_mut(&join(prefix, "embed"), f);
        self.encoder.for_each_mut(&join(prefix, "encoder"), f);
        self.action_head.for_each_mut(&join(prefix, "action_head"), f);
        self.activity_head.for_each_mut(&join(prefix, "activity_head"), f);
    }
}

/// Early fusion: per-branch embeddings, an optional `k·d → d` projection for
/// concatenation, and one shared encoder and classifier pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyWeights<P> {
    pub embeds: Vec<Linear<P>>,
    pub fuse: Option<Linear<P>>,
    pub encoder: Vec<EncoderLayerWeights<P>>,
    pub action_head: Linear<P>,
    pub activity_head: Linear<P>,
}

impl<P> ParamTree<P> for EarlyWeights<P> {
    type Mapped<Q> = EarlyWeights<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<EarlyWeights<Q>, E> {
        Ok(EarlyWeights {
            embeds: self.embeds.try_map(&join(prefix, "embeds"), f)?,
            fuse: match &self.fuse {
                Some(l) => Some(l.try_map(&join(prefix, "fuse"), f)?),
                None => None,
            },
            encoder: self.encoder.try_map(&join(prefix, "encoder"), f)?,
            action_head: self.action_head.try_map(&join(prefix, "action_head"), f)?,
            activity_head: self.activity_head.try_map(&join(prefix, "activity_head"), f)?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.embeds.for_each_mut(&join(prefix, "embeds"), f);
        if let Some(l) = &mut self.fuse {
            l.for_each_mut(&join(prefix, "fuse"), f);
        }
        self.encoder.for_each_mut(&join(prefix, "encoder"), f);
        self.action_head.for_each_mut(&join(prefix, "action_head"), f);
        self.activity_head.for_each_mut(&join(prefix, "activity_head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelWeights<P> {
    Single(BranchWeights<P>),
    Early(EarlyWeights<P>),
    Late(Vec<BranchWeights<P>>),
}

impl<P> ParamTree<P> for ModelWeights<P> {
    type Mapped<Q> = ModelWeights<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<ModelWeights<Q>, E> {
        Ok(match self {
            ModelWeights::Single(b) => ModelWeights::Single(b.try_map(&join(prefix, "single"), f)?),
            ModelWeights::Early(e) => ModelWeights::Early(e.try_map(&join(prefix, "early"), f)?),
            ModelWeights::Late(bs) => ModelWeights::Late(bs.try_map(&join(prefix, "late"), f)?),
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        match self {
            ModelWeights::Single(b) => b.for_each_mut(&join(prefix, "single"), f),
            ModelWeights::Early(e) => e.for_each_mut(&join(prefix, "early"), f),
            ModelWeights::Late(bs) => bs.for_each_mut(&join(prefix, "late"), f),
        }
    }
}

/// Graph handles for one classifier pair's outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `N × num_actions`.
    pub action_logits: Var,
    /// `1 × num_activities`.
    pub activity_logits: Var,
}

/// Late-fusion probabilities on the graph.
#[derive(Clone, Copy, Debug)]
pub struct FusedOutputs {
    pub action_probs: Var,
    pub activity_probs: Var,
}

#[derive(Clone, Debug)]
pub struct Outputs<T: Real> {
    /// One entry for single-branch and early-fusion models, one per branch
    /// under late fusion.
    pub heads: Vec<HeadOutputs>,
    pub fused: Option<FusedOutputs>,
    pub attention: AttentionRecord<T>,
}

/// Model output for one scene, detached from any graph.
///
/// Under late fusion the logits are the natural logarithm of the fused
/// probabilities, so `softmax(logits)` returns the fused distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T: Real = f64> {
    pub action_logits: Tensor<T>,
    pub activity_logits: Tensor<T>,
    pub attention: AttentionRecord<T>,
}

impl<T: Real> Prediction<T> {
    pub fn activity_probs(&self) -> Tensor<T> {
        softmax_rows(&self.activity_logits)
    }

    pub fn action_probs(&self) -> Tensor<T> {
        softmax_rows(&self.action_logits)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `(group class, per-actor action classes)`.
pub fn predict<T: Real>(pred: &Prediction<T>) -> (usize, Vec<usize>) {
    let group = argmax(pred.activity_logits.data());
    let n_actions = pred.action_logits.cols();
    let actions = pred
        .action_logits
        .data()
        .chunks(n_actions)
        .map(argmax)
        .collect();
    (group, actions)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GarModel<T: Real = f64> {
    pub config: ModelConfig,
    pub weights: ModelWeights<Tensor<T>>,
}

impl<T: Real> GarModel<T> {
    /// Fresh weights drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init", &[]);
        let c = &config;
        let d = c.d_model;
        let weights = match &c.fusion {
            FusionMode::None => ModelWeights::Single(init_branch(&mut rng, c, c.branch_dims[0])),
            FusionMode::Late { .. } => ModelWeights::Late(
                c.branch_dims
                    .iter()
                    .map(|&f| init_branch(&mut rng, c, f))
                    .collect(),
            ),
            FusionMode::EarlySum | FusionMode::EarlyConcat => {
                let embeds = c
                    .branch_dims
                    .iter()
                    .map(|&f| Linear::init(&mut rng, f, d, true))
                    .collect();
                let fuse = (c.fusion == FusionMode::EarlyConcat)
                    .then(|| Linear::init(&mut rng, d * c.branch_dims.len(), d, true));
                ModelWeights::Early(EarlyWeights {
                    embeds,
                    fuse,
                    encoder: init_trunk_encoder(&mut rng, c),
                    action_head: Linear::init(&mut rng, d, c.num_actions, true),
                    activity_head: Linear::init(&mut rng, d, c.num_activities, true),
                })
            }
        };
        Ok(GarModel { config, weights })
    }

    /// Checks that stored weight shapes agree with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = GarModel::<T>::init(self.config.clone(), 0)?;
        let a = crate::params::named_leaves(&self.weights);
        let b = crate::params::named_leaves(&fresh.weights);
        if a.len() != b.len() {
            return Err(GarError::Data(format!(
                "weights hold {} tensors, configuration needs {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(GarError::Data(format!(
                    "tensor {na} {:?} does not match expected {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind<'w>(&'w self, g: &mut Graph<'w, T>) -> ModelWeights<Var> {
        bind(g, &self.weights)
    }

    /// Builds the forward pass for one scene. `inputs` follow `config.branches`.
    pub fn forward<'w>(
        &self,
        g: &mut Graph<'w, T>,
        bound: &ModelWeights<Var>,
        inputs: &[BranchInput<'w, T>],
        record_attention: bool,
    ) -> Result<Outputs<T>> {
        let c = &self.config;
        if inputs.len() != c.branches.len() {
            return Err(GarError::Usage(format!(
                "model consumes {} branches, got {} inputs",
                c.branches.len(),
                inputs.len()
            )));
        }
        let n = check_inputs(inputs, &c.branch_dims)?;
        let dropout = T::of(c.dropout);
        match bound {
            ModelWeights::Single(w) => {
                let (head, attention) = forward_branch(g, c, w, &inputs[0], dropout, record_attention)?;
                Ok(Outputs {
                    heads: vec![head],
                    fused: None,
                    attention,
                })
            }
            ModelWeights::Late(ws) => {
                let weights = match &c.fusion {
                    FusionMode::Late { weights } => weights,
                    _ => return Err(GarError::Usage("late weights under non-late config".into())),
                };
                let mut heads = Vec::with_capacity(ws.len());
                let mut attention = AttentionRecord::default();
                for (b, (w, input)) in ws.iter().zip(inputs).enumerate() {
                    let (h, mut rec) = forward_branch(g, c, w, input, dropout, record_attention)?;
                    for m in &mut rec.maps {
                        m.branch = b;
                    }
                    attention.maps.extend(rec.maps);
                    heads.push(h);
                }
                let fused = fuse_late(g, &heads, weights)?;
                Ok(Outputs {
                    heads,
                    fused: Some(fused),
                    attention,
                })
            }
            ModelWeights::Early(w) => {
                let centers = inputs[0].centers;
                let mut embedded = Vec::with_capacity(inputs.len());
                for (lin, input) in w.embeds.iter().zip(inputs) {
                    let mut x = g.constant_ref(input.features);
                    if c.use_pe && c.pe_stage == PeStage::BeforeEmbed {
                        x = apply_pe(g, x, centers, c.pe_scale)?;
                    }
                    x = lin.forward(g, x)?;
                    if c.use_pe && c.pe_stage == PeStage::AfterEmbed && c.early_pe == EarlyPe::PerBranch {
                        x = apply_pe(g, x, centers, c.pe_scale)?;
                    }
                    embedded.push(x);
                }
                let mut s = match &w.fuse {
                    None => {
                        let mut acc = embedded[0];
                        for &e in &embedded[1..] {
                            acc = g.add(acc, e)?;
                        }
                        acc
                    }
                    Some(proj) => {
                        let cat = g.concat_cols(&embedded)?;
                        proj.forward(g, cat)?
                    }
                };
                if c.use_pe && c.pe_stage == PeStage::AfterEmbed && c.early_pe == EarlyPe::AfterFusion {
                    s = apply_pe(g, s, centers, c.pe_scale)?;
                }
                debug_assert_eq!(g.value(s).rows(), n);
                let (head, attention) = trunk(
                    g,
                    s,
                    &w.encoder,
                    &w.action_head,
                    &w.activity_head,
                    dropout,
                    record_attention,
                )?;
                Ok(Outputs {
                    heads: vec![head],
                    fused: None,
                    attention,
                })
            }
        }
    }

    /// Inference-mode prediction for one scene.
    pub fn predict_scene(&self, inputs: &[BranchInput<'_, T>], record_attention: bool) -> Result<Prediction<T>> {
        let mut g = Graph::new(Mode::Inference, 0);
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, inputs, record_attention)?;
        Ok(out.prediction(&g))
    }
}

impl<T: Real> Outputs<T> {
    pub fn prediction(self, g: &Graph<'_, T>) -> Prediction<T> {
        let (action_logits, activity_logits) = match self.fused {
            Some(f) => (
                g.value(f.action_probs).map(|p| p.ln()),
                g.value(f.activity_probs).map(|p| p.ln()),
            ),
            None => (
                g.value(self.heads[0].action_logits).clone(),
                g.value(self.heads[0].activity_logits).clone(),
            ),
        };
        let c = activity_logits.len();
        Prediction {
            action_logits,
            activity_logits: activity_logits.reshape(vec![c]).expect("same length"),
            attention: self.attention,
        }
    }
}

fn init_trunk_encoder<T: Real>(rng: &mut Rng, c: &ModelConfig) -> Vec<EncoderLayerWeights<Tensor<T>>> {
    if c.use_encoder() {
        init_encoder(rng, &c.encoder())
    } else {
        Vec::new()
    }
}

fn init_branch<T: Real>(rng: &mut Rng, c: &ModelConfig, f: usize) -> BranchWeights<Tensor<T>> {
    BranchWeights {
        embed: Linear::init(rng, f, c.d_model, true),
        encoder: init_trunk_encoder(rng, c),
        action_head: Linear::init(rng, c.d_model, c.num_actions, true),
        activity_head: Linear::init(rng, c.d_model, c.num_activities, true),
    }
}

fn check_inputs<T: Real>(inputs: &[BranchInput<'_, T>], dims: &[usize]) -> Result<usize> {
    let n = inputs[0].centers.len();
    if n == 0 {
        return Err(GarError::EmptySet("scene without actors"));
    }
    for (input, &f) in inputs.iter().zip(dims) {
        match input.features.shape() {
            [rows, cols] if *rows == n && *cols == f => {}
            s => {
                return Err(GarError::dim(
                    "forward",
                    format!("expected {n}x{f} branch features, got {s:?}"),
                ))
            }
        }
        if input.centers.len() != n {
            return Err(GarError::dim("forward", "branches disagree on actor count"));
        }
    }
    Ok(n)
}

/// Per-actor embedding `x · W + b`.
pub fn embed<T: Real>(g: &mut Graph<'_, T>, features: Var, w: &Linear<Var>) -> Result<Var> {
    w.forward(g, features)
}

/// Single-branch forward: embed, optional positional encoding, encoder,
/// per-actor action logits and pooled group activity logits.
pub fn forward_branch<'w, T: Real>(
    g: &mut Graph<'w, T>,
    cfg: &ModelConfig,
    w: &BranchWeights<Var>,
    input: &BranchInput<'w, T>,
    dropout: T,
    record_attention: bool,
) -> Result<(HeadOutputs, AttentionRecord<T>)> {
    let mut x = g.constant_ref(input.features);
    if cfg.use_pe && cfg.pe_stage == PeStage::BeforeEmbed {
        x = apply_pe(g, x, input.centers, cfg.pe_scale)?;
    }
    let mut s = embed(g, x, &w.embed)?;
    if cfg.use_pe && cfg.pe_stage == PeStage::AfterEmbed {
        s = apply_pe(g, s, input.centers, cfg.pe_scale)?;
    }
    trunk(
        g,
        s,
        &w.encoder,
        &w.action_head,
        &w.activity_head,
        dropout,
        record_attention,
    )
}

fn trunk<T: Real>(
    g: &mut Graph<'_, T>,
    s: Var,
    encoder: &[EncoderLayerWeights<Var>],
    action_head: &Linear<Var>,
    activity_head: &Linear<Var>,
    dropout: T,
    record_attention: bool,
) -> Result<(HeadOutputs, AttentionRecord<T>)> {
    let (encoded, attention) = if encoder.is_empty() {
        (s, AttentionRecord::default())
    } else {
        encode(g, s, encoder, dropout, record_attention)?
    };
    let action_logits = action_head.forward(g, encoded)?;
    let pooled = g.max_over_set(encoded)?;
    let d = g.value(pooled).len();
    let pooled = g.reshape(pooled, vec![1, d])?;
    let activity_logits = activity_head.forward(g, pooled)?;
    Ok((
        HeadOutputs {
            action_logits,
            activity_logits,
        },
        attention,
    ))
}

/// `Σ_b (w_b / Σw) · softmax(logits_b)` for both heads.
pub fn fuse_late<T: Real>(g: &mut Graph<'_, T>, heads: &[HeadOutputs], weights: &[f64]) -> Result<FusedOutputs> {
    if heads.is_empty() || heads.len() != weights.len() {
        return Err(GarError::Config("one late-fusion weight per branch required".into()));
    }
    let total: f64 = weights.iter().sum();
    let combine = |g: &mut Graph<'_, T>, pick: fn(&HeadOutputs) -> Var| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (h, &w) in heads.iter().zip(weights) {
            let p = g.softmax_rows(pick(h))?;
            let p = g.scale(p, T::of(w / total))?;
            acc = Some(match acc {
                Some(a) => g.add(a, p)?,
                None => p,
            });
        }
        Ok(acc.expect("at least one branch"))
    };
    let action_probs = combine(g, |h| h.action_logits)?;
    let activity_probs = combine(g, |h| h.activity_logits)?;
    Ok(FusedOutputs {
        action_probs,
        activity_probs,
    })
}
