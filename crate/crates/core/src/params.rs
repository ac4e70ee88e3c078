//! Parameter containers.
//!
//! Weight structs are generic over the leaf type `P`: `Tensor<T>` when stored,
//! [`Var`](crate::Var) once bound onto a graph, and back to `Tensor<T>` for
//! gradients. [`ParamTree`] walks the leaves in a fixed order with
//! dotted names, which the optimizers and the checkpoint format rely on.

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<Self::Mapped<Q>, E>;

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Flattened `(name, leaf)` list in traversal order.
pub fn named_leaves<'a, P, W: ParamTree<P>>(w: &'a W) -> Vec<(String, &'a P)> {
    let mut out = Vec::new();
    let _ = w.try_map::<(), std::convert::Infallible>("", &mut |name, p| {
        out.push((name.to_string(), p));
        Ok(())
    });
    out
}

/// Binds every tensor of a stored weight tree as a graph parameter.
pub fn bind<'w, T: Real, W: ParamTree<Tensor<T>>>(
    g: &mut Graph<'w, T>,
    w: &'w W,
) -> W::Mapped<Var> {
    match w.try_map::<Var, std::convert::Infallible>("", &mut |_, t| Ok(g.param(t))) {
        Ok(m) => m,
        Err(e) => match e {},
    }
}

/// Reads the accumulated gradient of every bound leaf.
pub fn grads_of<T: Real, W: ParamTree<Var>>(g: &Graph<'_, T>, bound: &W) -> W::Mapped<Tensor<T>> {
    match bound.try_map::<Tensor<T>, std::convert::Infallible>("", &mut |_, v| Ok(g.grad(*v))) {
        Ok(m) => m,
        Err(e) => match e {},
    }
}

pub fn count_scalars<T: Real, W: ParamTree<Tensor<T>>>(w: &W) -> usize {
    named_leaves(w).iter().map(|(_, t)| t.len()).sum()
}

/// Affine map `x · W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

impl<P> ParamTree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<Linear<Q>, E> {
        Ok(Linear {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: match &self.bias {
                Some(b) => Some(f(&join(prefix, "bias"), b)?),
                None => None,
            },
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl<T: Real> Linear<Tensor<T>> {
    /// Glorot-uniform weight, zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: xavier(rng, fan_in, fan_out),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Linear<Var> {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> ParamTree<P> for LayerNormParams<P> {
    type Mapped<Q> = LayerNormParams<Q>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<LayerNormParams<Q>, E> {
        Ok(LayerNormParams {
            gain: f(&join(prefix, "gain"), &self.gain)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> LayerNormParams<Tensor<T>> {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl LayerNormParams<Var> {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

impl<P, W: ParamTree<P>> ParamTree<P> for Vec<W> {
    type Mapped<Q> = Vec<W::Mapped<Q>>;

    fn try_map<'a, Q, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<Self::Mapped<Q>, E> {
        self.iter()
            .enumerate()
            .map(|(i, w)| w.try_map(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (i, w) in self.iter_mut().enumerate() {
            w.for_each_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan sizes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn names_follow_traversal_order() {
        let mut rng = rng_for(0, "t", &[]);
        let layers: Vec<Linear<Tensor<f64>>> =
            vec![Linear::init(&mut rng, 3, 2, true), Linear::init(&mut rng, 2, 2, false)];
        let names: Vec<String> = named_leaves(&layers).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight"]);
        assert_eq!(count_scalars(&layers), 6 + 2 + 4);
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = rng_for(1, "t", &[]);
        let w: Tensor<f64> = xavier(&mut rng, 10, 14);
        let b = (6.0f64 / 24.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= b));
    }
}
