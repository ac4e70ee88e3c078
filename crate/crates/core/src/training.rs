//! Joint objective, optimizers, learning-rate schedules and the training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{GarError, Result};
use crate::model::{GarModel, HeadOutputs, ModelWeights, Outputs};
use crate::params::{grads_of, named_leaves, ParamTree};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Real;
use crate::scenes::ActorScene;
use crate::model::BranchInput;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v ← μ·v + g`, `w ← w − lr·v`.
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Piecewise-constant learning rate: each `(start, lr)` holds from `start`
/// until the next entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(GarError::Config("learning-rate schedule is empty".into()));
        }
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(GarError::Config(
                "schedule iterations must be strictly increasing".into(),
            ));
        }
        if steps.iter().any(|&(_, lr)| !(lr >= 0.0) || !lr.is_finite()) {
            return Err(GarError::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(LrSchedule { steps })
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            steps: vec![(0, lr)],
        }
    }

    /// 0.01 for the first 10,000 iterations, then 0.001.
    pub fn volleyball() -> Self {
        LrSchedule {
            steps: vec![(0, 0.01), (10_000, 0.001)],
        }
    }

    /// 1e-4, divided by ten after 5,000 and again after 10,000 iterations.
    pub fn collective() -> Self {
        LrSchedule {
            steps: vec![(0, 1e-4), (5_000, 1e-5), (10_000, 1e-6)],
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|(start, _)| *start <= iteration)
            .last()
            .unwrap_or(&self.steps[0])
            .1
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }
}

impl FromStr for LrSchedule {
    type Err = GarError;

    /// `"0:0.01,10000:0.001"`, or a bare rate for a constant schedule.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GarError::Config(format!("malformed learning-rate schedule '{s}'"));
        if !s.contains(':') {
            return Ok(LrSchedule::constant(s.trim().parse().map_err(|_| bad())?));
        }
        let steps = s
            .split(',')
            .map(|part| {
                let (it, lr) = part.split_once(':').ok_or_else(bad)?;
                Ok((
                    it.trim().parse().map_err(|_| bad())?,
                    lr.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        LrSchedule::new(steps)
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|(i, lr)| format!("{i}:{lr}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    /// Total iteration count; a resumed run stops here as well.
    pub iterations: usize,
    pub lambda_group: f64,
    pub lambda_action: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// SGD with momentum 0.9 and the 20,000-iteration Volleyball schedule,
    /// batch 16, equal loss weights.
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            schedule: LrSchedule::volleyball(),
            batch_size: 16,
            iterations: 20_000,
            lambda_group: 1.0,
            lambda_action: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Adam with β = (0.9, 0.999), ε = 1e-10 and the Collective schedule, batch 8.
    pub fn adam_collective(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-10,
            },
            schedule: LrSchedule::collective(),
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GarError::Config("batch size must be positive".into()));
        }
        if !(self.lambda_group >= 0.0) || !(self.lambda_action >= 0.0) {
            return Err(GarError::Config("loss weights must be non-negative".into()));
        }
        match self.optimizer {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(GarError::Config(format!("momentum {momentum} not in [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, epsilon }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) =>
            {
                Err(GarError::Config("invalid Adam hyper-parameters".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Graph handles of the three loss values.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub activity: Var,
    pub action: Var,
}

/// `λ_g · CE(activity) + λ_a · mean over actors of CE(actions)`.
pub fn joint_loss<T: Real>(
    g: &mut Graph<'_, T>,
    head: &HeadOutputs,
    activity_label: usize,
    action_labels: &[usize],
    lambda_group: f64,
    lambda_action: f64,
) -> Result<LossVars> {
    let activity = g.cross_entropy(head.activity_logits, &[activity_label])?;
    let action = g.cross_entropy(head.action_logits, action_labels)?;
    let a = g.scale(activity, T::of(lambda_group))?;
    let b = g.scale(action, T::of(lambda_action))?;
    let total = g.add(a, b)?;
    Ok(LossVars {
        total,
        activity,
        action,
    })
}

/// Training objective for any model layout. Late-fusion branches each carry
/// their own joint loss, so summing them trains the branches independently.
pub fn model_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &Outputs<T>,
    scene: &ActorScene,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let mut acc: Option<LossVars> = None;
    for head in &out.heads {
        let l = joint_loss(
            g,
            head,
            scene.activity,
            &scene.actions,
            cfg.lambda_group,
            cfg.lambda_action,
        )?;
        acc = Some(match acc {
            None => l,
            Some(p) => LossVars {
                total: g.add(p.total, l.total)?,
                activity: g.add(p.activity, l.activity)?,
                action: g.add(p.action, l.action)?,
            },
        });
    }
    acc.ok_or_else(|| GarError::Usage("model produced no heads".into()))
}

/// Joint loss on the late-fused probabilities, using negative log-likelihood.
pub fn fused_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &Outputs<T>,
    scene: &ActorScene,
    lambda_group: f64,
    lambda_action: f64,
) -> Result<Var> {
    let fused = out
        .fused
        .ok_or_else(|| GarError::Usage("fused loss needs a late-fusion model".into()))?;
    let activity = g.nll_probs(fused.activity_probs, &[scene.activity])?;
    let action = g.nll_probs(fused.action_probs, &scene.actions)?;
    let a = g.scale(activity, T::of(lambda_group))?;
    let b = g.scale(action, T::of(lambda_action))?;
    g.add(a, b)
}

/// Optimizer slots and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real = f64> {
    pub iteration: usize,
    /// Adam step count (bias correction).
    pub adam_steps: u64,
    /// Velocity (SGD) or first moment (Adam), one per parameter tensor.
    pub first: Vec<Tensor<T>>,
    /// Second moment (Adam only).
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn new(weights: &ModelWeights<Tensor<T>>, optimizer: &OptimizerKind) -> Self {
        let zeros: Vec<Tensor<T>> = named_leaves(weights)
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let second = match optimizer {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        TrainState {
            iteration: 0,
            adam_steps: 0,
            first: zeros,
            second,
        }
    }

    fn check_layout(&self, n: usize, optimizer: &OptimizerKind) -> Result<()> {
        let want_second = matches!(optimizer, OptimizerKind::Adam { .. });
        if self.first.len() != n || (want_second && self.second.len() != n) {
            return Err(GarError::Usage(
                "optimizer state does not match the model's parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Classical momentum update of every parameter.
pub fn sgd_momentum_step<T: Real, W: ParamTree<Tensor<T>>>(
    weights: &mut W,
    grads: &[&Tensor<T>],
    velocity: &mut [Tensor<T>],
    momentum: T,
    lr: T,
) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    weights.for_each_mut("", &mut |name, w| {
        let (Some(g), Some(v)) = (grads.get(i), velocity.get_mut(i)) else {
            err.get_or_insert_with(|| GarError::Usage(format!("missing gradient for {name}")));
            return;
        };
        i += 1;
        if g.shape() != w.shape() || v.shape() != w.shape() {
            err.get_or_insert_with(|| crate::error::GarError::dim("sgd_momentum_step", format!("shape mismatch for {name}")));
            return;
        }
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *wv = *wv - lr * *vv;
        }
    });
    if i != grads.len() && err.is_none() {
        err = Some(GarError::Usage("more gradients than parameters".into()));
    }
    err.map_or(Ok(()), Err)
}

/// Bias-corrected Adam update; `step` is the 1-based step count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real, W: ParamTree<Tensor<T>>>(
    weights: &mut W,
    grads: &[&Tensor<T>],
    first: &mut [Tensor<T>],
    second: &mut [Tensor<T>],
    step: u64,
    (beta1, beta2, epsilon): (f64, f64, f64),
    lr: T,
) -> Result<()> {
    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(epsilon));
    let c1 = T::one() - T::of(beta1.powi(step as i32));
    let c2 = T::one() - T::of(beta2.powi(step as i32));
    let mut i = 0;
    let mut err = None;
    weights.for_each_mut("", &mut |name, w| {
        let (Some(g), Some(m), Some(v)) = (grads.get(i), first.get_mut(i), second.get_mut(i)) else {
            err.get_or_insert_with(|| GarError::Usage(format!("missing gradient for {name}")));
            return;
        };
        i += 1;
        if g.shape() != w.shape() {
            err.get_or_insert_with(|| crate::error::GarError::dim("adam_step", format!("shape mismatch for {name}")));
            return;
        }
        for (((wv, mv), vv), &gv) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *wv = *wv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    if i != grads.len() && err.is_none() {
        err = Some(GarError::Usage("more gradients than parameters".into()));
    }
    err.map_or(Ok(()), Err)
}

/// One row of the loss curve; losses are batch means.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub activity: f64,
    pub action: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,lr,total_loss,activity_loss,action_loss";

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e}",
            r.iteration, r.lr, r.total, r.activity, r.action
        );
    }
    s
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOSS_CSV_HEADER => {}
        _ => {
            return Err(GarError::Parse {
                source_name: "loss curve".into(),
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = || GarError::Parse {
                source_name: "loss curve".into(),
                line: i + 1,
                msg: format!("malformed row '{l}'"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(err());
            }
            Ok(LossRecord {
                iteration: f[0].parse().map_err(|_| err())?,
                lr: f[1].parse().map_err(|_| err())?,
                total: f[2].parse().map_err(|_| err())?,
                activity: f[3].parse().map_err(|_| err())?,
                action: f[4].parse().map_err(|_| err())?,
            })
        })
        .collect()
}

/// Scene indices of the `batch_size` samples used at `iteration`. Each epoch
/// is a fresh seeded shuffle, so the schedule depends only on the seed and
/// the iteration, and a resumed run sees the same batches.
pub fn batch_indices(n: usize, batch_size: usize, iteration: usize, seed: u64) -> Vec<usize> {
    let start = iteration * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch_size {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(seed, "shuffle", &[epoch as u64]));
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}

fn scene_features<T: Real>(scene: &ActorScene) -> Vec<Tensor<T>> {
    scene.features.iter().map(|f| f.cast()).collect()
}

/// Mean loss of one batch and the mean gradient over it.
pub fn batch_gradient<T: Real>(
    model: &GarModel<T>,
    scenes: &[(&ActorScene, &[Tensor<T>])],
    cfg: &TrainConfig,
    mode: Mode,
    dropout_seed: u64,
) -> Result<((f64, f64, f64), ModelWeights<Tensor<T>>)> {
    let mut g = Graph::new(mode, dropout_seed);
    let bound = model.bind(&mut g);
    let mut total: Option<LossVars> = None;
    for (scene, feats) in scenes {
        let inputs: Vec<BranchInput<'_, T>> = model
            .config
            .branches
            .iter()
            .map(|&b| {
                feats
                    .get(b)
                    .map(|features| BranchInput {
                        features,
                        centers: &scene.centers,
                    })
                    .ok_or_else(|| GarError::Data(format!("scene {} lacks branch {b}", scene.id)))
            })
            .collect::<Result<_>>()?;
        let out = model.forward(&mut g, &bound, &inputs, false)?;
        let l = model_loss(&mut g, &out, scene, cfg)?;
        total = Some(match total {
            None => l,
            Some(p) => LossVars {
                total: g.add(p.total, l.total)?,
                activity: g.add(p.activity, l.activity)?,
                action: g.add(p.action, l.action)?,
            },
        });
    }
    let total = total.ok_or_else(|| GarError::Data("empty batch".into()))?;
    let inv = T::one() / T::of(scenes.len() as f64);
    let mean = g.scale(total.total, inv)?;
    g.backward(mean)?;
    let v = |x: Var| g.value(x).data()[0].to_f64_lossy() / scenes.len() as f64;
    let losses = (v(total.total), v(total.activity), v(total.action));
    Ok((losses, grads_of(&g, &bound)))
}

/// Runs optimization from `state.iteration` up to `cfg.iterations`.
pub fn train<T: Real>(
    model: &mut GarModel<T>,
    data: &[ActorScene],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GarError::Data("training set is empty".into()));
    }
    let n_params = named_leaves(&model.weights).len();
    state.check_layout(n_params, &cfg.optimizer)?;
    let feats: Vec<Vec<Tensor<T>>> = data.iter().map(scene_features).collect();
    let mut curve = Vec::with_capacity(cfg.iterations.saturating_sub(state.iteration));

    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let lr = cfg.schedule.lr_at(it);
        let idx = batch_indices(data.len(), cfg.batch_size, it, cfg.seed);
        let batch: Vec<(&ActorScene, &[Tensor<T>])> =
            idx.iter().map(|&i| (&data[i], feats[i].as_slice())).collect();
        let dropout_seed = derive_seed(cfg.seed, "dropout", &[it as u64]);
        let ((total, activity, action), grads) =
            match batch_gradient(model, &batch, cfg, Mode::Training, dropout_seed) {
                Ok(r) => r,
                Err(GarError::NonFinite { .. }) => {
                    return Err(GarError::Diverged {
                        iteration: it,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
        if !total.is_finite() {
            return Err(GarError::Diverged {
                iteration: it,
                loss: total,
            });
        }
        let grad_list: Vec<&Tensor<T>> = named_leaves(&grads).into_iter().map(|(_, t)| t).collect();
        match cfg.optimizer {
            OptimizerKind::SgdMomentum { momentum } => sgd_momentum_step(
                &mut model.weights,
                &grad_list,
                &mut state.first,
                T::of(momentum),
                T::of(lr),
            )?,
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                state.adam_steps += 1;
                adam_step(
                    &mut model.weights,
                    &grad_list,
                    &mut state.first,
                    &mut state.second,
                    state.adam_steps,
                    (beta1, beta2, epsilon),
                    T::of(lr),
                )?
            }
        }
        if model.weights_non_finite() {
            return Err(GarError::Diverged {
                iteration: it,
                loss: total,
            });
        }
        curve.push(LossRecord {
            iteration: it,
            lr,
            total,
            activity,
            action,
        });
        state.iteration += 1;
    }
    Ok(curve)
}

impl<T: Real> GarModel<T> {
    fn weights_non_finite(&self) -> bool {
        named_leaves(&self.weights).iter().any(|(_, t)| !t.all_finite())
    }
}
