//! Sinusoidal positional encoding of actor box centers. The horizontal
//! coordinate fills the first half of the feature dimensions, the vertical
//! coordinate the second half.

use crate::autodiff::{Graph, Var};
use crate::error::{GarError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Frequency base of the sinusoids.
pub const PE_BASE: f64 = 10_000.0;

/// Normalized coordinates are multiplied by this before encoding.
pub const DEFAULT_PE_SCALE: f64 = 100.0;

/// Center of an actor's bounding box, normalized by frame width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCenter {
    pub x: f64,
    pub y: f64,
}

impl BoxCenter {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(GarError::Data(format!("box center ({x}, {y}) outside [0,1]²")));
        }
        Ok(BoxCenter { x, y })
    }

    pub fn mirrored(self) -> Self {
        BoxCenter {
            x: 1.0 - self.x,
            y: self.y,
        }
    }
}

/// `[sin(p/B^(0/dim)), cos(p/B^(0/dim)), sin(p/B^(2/dim)), cos(...), ...]`.
pub fn pe_1d<T: Real>(pos: f64, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(GarError::Config(format!(
            "positional encoding width must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = pos / PE_BASE.powf((2 * i) as f64 / dim as f64);
        out.push(T::of(angle.sin()));
        out.push(T::of(angle.cos()));
    }
    Tensor::vector(out)
}

pub fn pe_2d<T: Real>(center: BoxCenter, d_model: usize, scale: f64) -> Result<Tensor<T>> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(GarError::Config(format!(
            "2D positional encoding needs a width divisible by 4, got {d_model}"
        )));
    }
    let half = d_model / 2;
    let mut data = pe_1d::<T>(scale * center.x, half)?.into_data();
    data.extend(pe_1d::<T>(scale * center.y, half)?.into_data());
    Tensor::vector(data)
}

/// Row-wise encodings for a set of centers, `N × d_model`.
pub fn pe_matrix<T: Real>(centers: &[BoxCenter], d_model: usize, scale: f64) -> Result<Tensor<T>> {
    if centers.is_empty() {
        return Err(GarError::EmptySet("positional encoding of zero actors"));
    }
    let mut data = Vec::with_capacity(centers.len() * d_model);
    for &c in centers {
        data.extend(pe_2d::<T>(c, d_model, scale)?.into_data());
    }
    Tensor::new(vec![centers.len(), d_model], data)
}

/// `S + PE(centers)`, additive.
pub fn apply_pe<T: Real>(
    g: &mut Graph<'_, T>,
    s: Var,
    centers: &[BoxCenter],
    scale: f64,
) -> Result<Var> {
    let (n, d) = g
        .value(s)
        .dims2()
        .ok_or_else(|| GarError::dim("apply_pe", "expected a matrix"))?;
    if n != centers.len() {
        return Err(GarError::dim(
            "apply_pe",
            format!("{n} feature rows but {} centers", centers.len()),
        ));
    }
    let pe = g.constant(pe_matrix(centers, d, scale)?);
    g.add(s, pe)
}
