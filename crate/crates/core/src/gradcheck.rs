//! Central finite-difference checks for analytic gradients.
//!
//! Only forward evaluations of the loss are used, so the numeric side is
//! independent of the backward implementation it verifies.

use crate::error::Result;
use crate::params::{named_leaves, ParamTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-8,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn set_element<W: ParamTree<Tensor<f64>>>(w: &mut W, leaf: usize, elem: usize, value: f64) {
    let mut i = 0;
    w.for_each_mut("", &mut |_, t| {
        if i == leaf {
            t.data_mut()[elem] = value;
        }
        i += 1;
    });
}

/// Compares `analytic` (same tree layout as `weights`) against central
/// differences of `loss`, element by element.
pub fn check_gradients<W, F>(
    weights: &mut W,
    analytic: &W,
    cfg: GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    W: ParamTree<Tensor<f64>>,
    F: FnMut(&W) -> Result<f64>,
{
    let layout: Vec<(String, Vec<f64>)> = named_leaves(weights)
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let grads: Vec<Vec<f64>> = named_leaves(analytic)
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    assert_eq!(layout.len(), grads.len(), "gradient tree must mirror weights");

    let mut report = GradCheckReport::default();
    for (leaf, (name, values)) in layout.iter().enumerate() {
        for (elem, &orig) in values.iter().enumerate() {
            set_element(weights, leaf, elem, orig + cfg.step);
            let up = loss(weights)?;
            set_element(weights, leaf, elem, orig - cfg.step);
            let down = loss(weights)?;
            set_element(weights, leaf, elem, orig);

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grads[leaf][elem];
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.tolerance {
                report.mismatches.push(Mismatch {
                    param: name.clone(),
                    index: elem,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
